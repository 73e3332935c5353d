"""Offline robust training of the mean-trend model and its tuning helpers.

With an identity anomaly basis, jointly fitting the model and entrywise
sparse outliers under ``||e - theta_a||^2 + gamma * |theta_a|_1`` is the same
as fitting the model under the Huber loss and reading the outliers off as
soft-thresholded residuals (threshold ``gamma / 2``). Training therefore
minimises::

    sum_t huber(y_{t+1} - mu_{t+1}) + lam * mu_t' R mu_t,   R = D'D

where ``mu`` follows the model's own recursion ``mu_{t+1} = mu_t + g + r_{t+1}``
restarted from the observation at the beginning of every training chunk.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from . import tensor as T
from .cable import SpatioTemporalField, StimulationSchedule, stimulus_field
from .metamodels import Metamodel
from .optim import OptimizerState, clip_grad_norm, optimizer_step
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    pass


# ---------------------------------------------------------------- scalar pieces


def huber(x, gamma: float):
    """x**2 for |x| <= gamma/2, else gamma*|x| - gamma**2/4 (entrywise)."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    x = np.asarray(x, dtype=float)
    if math.isinf(gamma):
        return x * x
    a = np.abs(x)
    return np.where(a <= gamma / 2, x * x, gamma * a - gamma * gamma / 4)


def soft_threshold(x, tau: float):
    if tau < 0:
        raise ValueError("threshold must be non-negative")
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def extract_outliers(residual, gamma: float) -> np.ndarray:
    """Sparse outlier coefficients for the identity basis: S_{gamma/2}(residual)."""
    return soft_threshold(residual, gamma / 2.0)


class SecondDiffOperator:
    """Rows (1, -2, 1) acting on length-``p`` vectors; never formed densely
    unless :meth:`matrix` is asked for."""

    def __init__(self, p: int):
        if p < 3:
            raise ValueError("second differences need p >= 3")
        self.p = p

    def apply(self, mu: np.ndarray) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        return mu[..., :-2] - 2.0 * mu[..., 1:-1] + mu[..., 2:]

    def matrix(self) -> sparse.csr_matrix:
        p = self.p
        return sparse.diags([np.ones(p - 2), -2 * np.ones(p - 2), np.ones(p - 2)],
                            [0, 1, 2], shape=(p - 2, p), format="csr")

    def gram(self) -> sparse.csr_matrix:
        d = self.matrix()
        return (d.T @ d).tocsr()


def smoothness_penalty(mu, lam: float) -> float:
    mu = np.asarray(mu.data if isinstance(mu, Tensor) else mu, dtype=float)
    if mu.shape[-1] < 3:
        raise ValueError("need at least 3 cells")
    d = SecondDiffOperator(mu.shape[-1]).apply(mu)
    return float(lam * np.sum(d * d))


def _penalty_tensor(mu: Tensor, lam: float) -> Tensor:
    d = mu[..., :-2] - 2.0 * mu[..., 1:-1] + mu[..., 2:]
    return T.tsum(T.square(d)) * lam


# ---------------------------------------------------------------- training


@dataclass
class Phase1Config:
    lam: float = 0.0
    gamma: float = 1.0
    sgd_epochs: int = 10
    adamw_epochs: int = 20
    sgd_lr: float = 1e-3
    momentum: float = 0.9
    adamw_lr: float = 1e-3
    weight_decay: float = 0.01
    clip: float = 0.01
    chunk: int = 64
    warmup: int = 16
    batch: int = 1
    rng_seed: int = 0

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.chunk < 1 or self.batch < 1 or self.warmup < 0:
            raise ValueError("chunk/batch must be >= 1, warmup >= 0")
        if self.sgd_epochs < 0 or self.adamw_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.clip <= 0:
            raise ValueError("clip must be positive")

    @property
    def epochs(self) -> int:
        return self.sgd_epochs + self.adamw_epochs


@dataclass
class TrainingHistory:
    epoch_loss: list[float]
    optimizer: list[str]


def _chunks(n_frames: int, chunk: int, warmup: int) -> list[int]:
    """Start frames of the training chunks of one sequence."""
    last = n_frames - 1 - chunk
    first = warmup
    if last < first:
        first = 0
        last = n_frames - 1 - chunk
        if last < 0:
            raise ValueError(f"sequence of {n_frames} frames is shorter than one chunk")
    return list(range(first, last + 1, chunk))


def chunk_loss(model: Metamodel, tp: dict, y: np.ndarray, stim: np.ndarray,
               start: np.ndarray, chunk: int, warmup: int, gamma: float, lam: float) -> Tensor:
    """Mean robust loss of a batch of chunks.

    ``y``/``stim`` are ``(B, n, p)`` arrays; chunk ``b`` starts at frame
    ``start[b]``. Observations before the start warm the carry (no grad).
    """
    B, _, p = y.shape
    idx = np.arange(B)
    n_warm = int(min(warmup, start.min()))
    plain = {k: Tensor(v.data) for k, v in tp.items()}
    carry = model.start(y[idx, start - n_warm], plain)
    # warm-up frames are observations; all chunks in a batch use the same count
    for j in range(n_warm):
        t = start - n_warm + j
        carry, _ = model.step(carry, y[idx, t], stim[idx, t + 1], plain)
    mu = Tensor(y[idx, start])
    total = None
    for j in range(chunk):
        t = start + j
        c = stim[idx, t + 1]
        carry, g = model.step(carry, mu, c, tp)
        mu = mu + g + c
        term = T.tsum(T.huber(Tensor(y[idx, t + 1]) - mu, gamma))
        if lam:
            term = term + _penalty_tensor(mu, lam)
        total = term if total is None else total + term
    return total * (1.0 / (B * chunk * p))


def train_phase1(sequences: list[SpatioTemporalField], schedules: list[StimulationSchedule],
                 model: Metamodel, config: Phase1Config,
                 callback=None) -> tuple[Metamodel, TrainingHistory]:
    """Fit ``model`` in place on the sequences; returns it with the loss history.

    ``schedules`` hold the regular stimulation of each sequence (anything of
    kind ``abnormal`` is ignored: it is what the robust loss absorbs).
    """
    config.validate()
    if len(sequences) != len(schedules):
        raise ValueError("one schedule per sequence is required")
    if not sequences:
        raise ValueError("no training sequences")
    p = sequences[0].n_space
    if any(s.n_space != p for s in sequences):
        raise ValueError("sequences must share the spatial size")

    ys = [s.values for s in sequences]
    stims = [stimulus_field(sc, s.n_time, p, s.dt) for s, sc in zip(sequences, schedules)]
    slots = [(i, t) for i, s in enumerate(sequences)
             for t in _chunks(s.n_time, config.chunk, config.warmup)]
    rng = np.random.default_rng(config.rng_seed)
    names = list(model.params)
    history = TrainingHistory([], [])
    sgd = OptimizerState.sgd(lr=config.sgd_lr, momentum=config.momentum)
    adamw = OptimizerState.adamw(lr=config.adamw_lr, weight_decay=config.weight_decay)

    for epoch in range(config.epochs):
        opt = sgd if epoch < config.sgd_epochs else adamw
        order = rng.permutation(len(slots))
        losses = []
        for b0 in range(0, len(order), config.batch):
            pick = [slots[k] for k in order[b0:b0 + config.batch]]
            n = min(ys[i].shape[0] for i, _ in pick)
            y = np.stack([ys[i][:n] for i, _ in pick])
            st = np.stack([stims[i][:n] for i, _ in pick])
            start = np.array([t for _, t in pick])
            tp = model.tensors(requires_grad=True)
            with Tape() as tape:
                loss = chunk_loss(model, tp, y, st, start, config.chunk, config.warmup,
                                  config.gamma, config.lam)
            val = float(loss.data)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b0 // config.batch}")
            try:
                g = backward(tape, loss, wrt=list(tp.values()))
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b0 // config.batch}: {exc}") from exc
            grads = clip_grad_norm([g[id(tp[k])] for k in names], config.clip)
            optimizer_step(opt, [model.params[k] for k in names], grads)
            losses.append(val)
        history.epoch_loss.append(float(np.mean(losses)))
        history.optimizer.append(opt.kind)
        log.info("epoch %d (%s): loss %.6g", epoch, opt.kind, history.epoch_loss[-1])
        if callback is not None:
            callback(epoch, history.epoch_loss[-1])
    return model, history


# ---------------------------------------------------------------- tuning


def _smooth_masked(y: np.ndarray, mask: np.ndarray, lam: float, R) -> np.ndarray:
    """argmin_mu ||M (y - mu)||^2 + lam mu' R mu for one frame."""
    M = sparse.diags(mask.astype(float))
    A = (M + lam * R).tocsc()
    if lam == 0:
        A = A + sparse.identity(len(y)) * 1e-12
    return spsolve(A, mask * y)


def select_lambda(sequence: SpatioTemporalField, candidates, frac: float = 0.1,
                  rng: np.random.Generator | None = None, frames=None) -> float:
    """Cross-validate the smoothness weight by masking random cells.

    Validation cells are zeroed out of the fit; each candidate smooths the
    remaining cells frame by frame and is scored on the held-out ones.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidate lambdas")
    if len(candidates) == 1:
        return candidates[0]
    rng = rng or np.random.default_rng(0)
    Y = sequence.values
    rows = range(Y.shape[0]) if frames is None else frames
    R = SecondDiffOperator(Y.shape[1]).gram()
    scores = np.zeros(len(candidates))
    for t in rows:
        val = rng.random(Y.shape[1]) < frac
        val[[0, -1]] = False
        keep = ~val
        for j, lam in enumerate(candidates):
            mu = _smooth_masked(Y[t], keep, lam, R)
            scores[j] += np.sum((mu[val] - Y[t, val]) ** 2)
    return candidates[int(np.argmin(scores))]


def select_gamma(residuals, target_fdr: float = 0.05, basis: np.ndarray | None = None,
                 scale: float = 1.0) -> float:
    """Width giving at most the requested share of nonzero coefficients under S_{gamma/2}.

    Coefficients are ``scale * B' r`` per residual frame (``B = I`` by default).
    """
    r = np.atleast_2d(np.asarray(residuals, dtype=float))
    if r.size == 0:
        raise ValueError("no residuals")
    if not 0 <= target_fdr <= 1:
        raise ValueError("target_fdr must be in [0, 1]")
    proj = scale * (r if basis is None else r @ basis)
    a = np.abs(proj).ravel()
    if target_fdr >= 1:
        return 0.0
    if target_fdr <= 0:
        return float(2 * a.max() * (1 + 1e-12))
    # "higher" picks an observed value, so strictly fewer than the target
    # share of entries can exceed it
    return float(2 * np.quantile(a, 1 - target_fdr, method="higher"))
