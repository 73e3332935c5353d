"""Deep spatio-temporal sparse decomposition for cardiac cable monitoring."""

from .cable import (AnomalyGroundTruth, CableConfig, SimulationError, SpatioTemporalField,
                    StimulationSchedule, StimulusEvent, simulate)
from .metamodels import ConvLSTM, ConvWaveNet, build_model, load_checkpoint, save_checkpoint

__all__ = [
    "AnomalyGroundTruth", "CableConfig", "ConvLSTM", "ConvWaveNet", "SimulationError",
    "SpatioTemporalField", "StimulationSchedule", "StimulusEvent", "build_model",
    "load_checkpoint", "save_checkpoint", "simulate",
]
__version__ = "0.1.0"
