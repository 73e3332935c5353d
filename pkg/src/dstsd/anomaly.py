"""Buffer-window estimation of sparse abnormal stimulation.

For the frames ``T..T+w`` of a window the mean is unrolled through the
frozen model,

    mu_t = mu_{t-1} + g(mu_{t-1}, c_t) + c_t,    c_t = r_t + B theta_t,

and the coefficients ``theta_T..theta_{T+w}`` are fitted to the observed
frames by proximal gradient: ``theta <- S_{gamma/2}(theta - c * grad)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from . import tensor as T
from .metamodels import Metamodel
from .phase1 import soft_threshold
from .tensor import Tape, Tensor, backward


# ---------------------------------------------------------------- basis


@dataclass(frozen=True)
class SplineBasis:
    matrix: np.ndarray  # (p, m)
    knots: np.ndarray | None = None

    @property
    def p(self) -> int:
        return self.matrix.shape[0]

    @property
    def m(self) -> int:
        return self.matrix.shape[1]

    @property
    def is_identity(self) -> bool:
        return self.knots is None


def build_spline_basis(p: int, m: int, identity: bool = False) -> SplineBasis:
    """``m`` cubic B-splines on uniform knots whose interior spans ``[0, p-1]``.

    With ``identity=True`` (and ``m == p``) the basis is the identity.
    """
    if identity:
        if m != p:
            raise ValueError("identity basis needs m == p")
        return SplineBasis(np.eye(p))
    if not 4 <= m <= p:
        raise ValueError(f"need 4 <= m <= p, got m={m}, p={p}")
    h = (p - 1) / (m - 3)
    knots = (np.arange(m + 4) - 3) * h
    x = np.arange(p, dtype=float)
    # the last cell sits on the final knot; nudge it inside the half-open span
    x[-1] = min(x[-1], np.nextafter(knots[m], -np.inf))
    B = BSpline.design_matrix(x, knots, 3, extrapolate=False).toarray()
    return SplineBasis(B, knots)


# ---------------------------------------------------------------- window problem


@dataclass
class WindowProblem:
    """Frames ``start .. start + w`` of a stream, ready for estimation.

    ``carry`` is the model carry after consuming frames up to ``start - 2``
    and ``mu_prev`` is the committed mean at ``start - 1``; ``stims[j]`` is
    the regular stimulus increment entering frame ``start + j``.
    """

    start: int
    observations: np.ndarray  # (w + 1, p)
    carry: object
    mu_prev: np.ndarray  # (p,)
    stims: np.ndarray  # (w + 1, p)

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        self.stims = np.atleast_2d(np.asarray(self.stims, dtype=float))
        if self.stims.shape != self.observations.shape:
            raise ValueError("stimulus rows must match observation rows")
        if self.mu_prev.shape != (self.observations.shape[1],):
            raise ValueError("mu_prev has the wrong length")

    @property
    def w(self) -> int:
        return self.observations.shape[0] - 1


@dataclass
class AnomalyCoefficients:
    start: int
    values: np.ndarray  # (w + 1, m)
    objective: list[float] = field(default_factory=list)

    def sparsity(self) -> float:
        return float(np.mean(self.values == 0.0))

    def field(self, basis: SplineBasis) -> np.ndarray:
        return self.values @ basis.matrix.T


def _unroll(model: Metamodel, problem: WindowProblem, theta: Tensor, basis: Tensor, tp):
    """Means ``mu_start .. mu_{start+w}`` as a list of ``(1, p)`` tensors."""
    a = T.matmul(theta, basis)  # (w+1, p): basis passed transposed
    mu = Tensor(problem.mu_prev.reshape(1, -1))
    carry = problem.carry
    out = []
    for j in range(problem.w + 1):
        c = T.reshape(a[j], (1, -1)) + problem.stims[j].reshape(1, -1)
        carry, g = model.step(carry, mu, c, tp)
        mu = mu + g + c
        out.append(mu)
    return out, carry


def _loss(model, problem, theta, basis_t, tp):
    mus, _ = _unroll(model, problem, theta, basis_t, tp)
    total = None
    for j, mu in enumerate(mus):
        term = T.tsum(T.square(mu - problem.observations[j].reshape(1, -1)))
        total = term if total is None else total + term
    return total


def windowed_loss(problem: WindowProblem, coeffs, model: Metamodel, basis: SplineBasis,
                  tp=None) -> float:
    theta = np.asarray(coeffs.values if isinstance(coeffs, AnomalyCoefficients) else coeffs)
    if theta.shape != (problem.w + 1, basis.m):
        raise ValueError(f"coefficients must be {(problem.w + 1, basis.m)}, got {theta.shape}")
    tp = tp or model.tensors()
    return float(_loss(model, problem, Tensor(theta), Tensor(basis.matrix.T), tp).data)


def windowed_loss_grad(problem: WindowProblem, theta: np.ndarray, model: Metamodel,
                       basis: SplineBasis, tp=None) -> tuple[float, np.ndarray]:
    """Loss and its gradient w.r.t. all window coefficients (model frozen)."""
    tp = tp or model.tensors()
    th = Tensor(theta, requires_grad=True)
    with Tape() as tape:
        loss = _loss(model, problem, th, Tensor(basis.matrix.T), tp)
    g = backward(tape, loss, wrt=[th])[id(th)]
    return float(loss.data), g


def estimate_window(problem: WindowProblem, model: Metamodel, basis: SplineBasis,
                    gamma: float, step: float = 0.01, epochs: int = 5,
                    tp=None) -> AnomalyCoefficients:
    """Proximal-gradient estimate of the window coefficients, started at 0.

    The objective ``loss + gamma * sum|theta|`` is recorded after every
    update (it need not decrease: the unrolled loss is nonconvex).
    """
    if gamma < 0 or step <= 0:
        raise ValueError("gamma must be >= 0 and step > 0")
    tp = tp or model.tensors()
    theta = np.zeros((problem.w + 1, basis.m))
    trace = []
    tau = gamma / 2.0
    for _ in range(epochs):
        loss, grad = windowed_loss_grad(problem, theta, model, basis, tp)
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite window gradient")
        new = soft_threshold(theta - step * grad, tau)
        if not new.any() and not theta.any():
            # stuck at the origin: every further iteration is identical
            trace.append(loss)
            break
        theta = new
        trace.append(windowed_loss(problem, theta, model, basis, tp) + gamma * np.abs(theta).sum())
    return AnomalyCoefficients(problem.start, theta, trace)


def write_coefficients(path, coeffs: list[AnomalyCoefficients]) -> None:
    """CSV rows ``t, basis_index, value`` for the nonzero coefficients."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "basis_index", "value"])
        for co in coeffs:
            for j, row in enumerate(co.values):
                for k in np.nonzero(row)[0]:
                    w.writerow([co.start + j, int(k), repr(float(row[k]))])
