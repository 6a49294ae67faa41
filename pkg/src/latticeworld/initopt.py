"""Optimizing the initial noise of the structure stage toward a geometric constraint.

The denoising trajectory is replaced by its straight-line approximation through
the current noise ``S_T`` and the fully denoised endpoint ``G(S_T)``, with the
displacement ``G(S_T) - S_T`` held constant for differentiation. The endpoint
gradient is then the identity, so the loss gradient is cheap.

The noise can be optimized directly or through its 3D Fourier coefficients
(``S = Re(ifftn(X))``). Under plain gradient descent the two are the same
algorithm up to a 1/N learning-rate scale (the DFT is a scaled unitary map),
so the default optimizer is Adam, whose per-coordinate normalization acts on
different coordinates in the two parameterizations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalAbort
from .flowmodel import ToyDecoders, ToyFlowModel, decode_occupancy
from .fusion import SamplerConfig, sample_plain
from .lattice import DenseLatentGrid, GridDims, MaskVolume, OccupancyField

log = logging.getLogger(__name__)

_AXES = (0, 1, 2)


@dataclass
class SpectralLatent:
    """Unnormalized forward 3D DFT (over the spatial axes) of a real ``(d, h, w, c)`` latent."""

    coeffs: np.ndarray

    def enforce_hermitian(self) -> "SpectralLatent":
        """Project onto spectra of real fields: ``X_k <- (X_k + conj(X_{-k})) / 2``."""
        flip = np.conj(np.roll(np.flip(self.coeffs, _AXES), 1, _AXES))
        return SpectralLatent(0.5 * (self.coeffs + flip))


def fft3_forward(x) -> SpectralLatent:
    data = x.data if isinstance(x, DenseLatentGrid) else np.asarray(x, dtype=np.float64)
    return SpectralLatent(np.fft.fftn(data, axes=_AXES))


def fft3_inverse(X) -> DenseLatentGrid:
    coeffs = X.coeffs if isinstance(X, SpectralLatent) else X
    return DenseLatentGrid(np.real(np.fft.ifftn(coeffs, axes=_AXES)))


def fft3_adjoint(g) -> np.ndarray:
    """Adjoint of ``fft3_inverse`` under ``<X, A> = Re sum X conj(A)``: ``fftn(g) / N``."""
    g = np.asarray(g, dtype=np.float64)
    n = g.shape[0] * g.shape[1] * g.shape[2]
    return np.fft.fftn(g, axes=_AXES) / n


# --- linear trajectory ------------------------------------------------------------


@dataclass
class LinearTrajectory:
    """``S(t) = S_T + (1 - t / T) [G(S_T) - S_T]_sg``."""

    start: np.ndarray
    displacement: np.ndarray
    T: float = 1.0

    def at(self, t: float) -> np.ndarray:
        if t == self.T:
            return self.start.copy()
        return self.start + (1.0 - t / self.T) * self.displacement

    def endpoint(self) -> np.ndarray:
        return self.start + self.displacement


def denoise(model: ToyFlowModel, S_T: np.ndarray, cond: int, cfg: SamplerConfig) -> np.ndarray:
    """``G(S_T)``: one full plain sampling pass from the given noise."""
    dims = GridDims(*S_T.shape[:3])
    return sample_plain(model, cond, dims, cfg, noise=S_T).data


def linear_trajectory(model, S_T, cond: int, cfg: SamplerConfig) -> LinearTrajectory:
    S = S_T.data if isinstance(S_T, DenseLatentGrid) else np.asarray(S_T, dtype=np.float64)
    return LinearTrajectory(S, denoise(model, S, cond, cfg) - S)


def linear_traj_endpoint(model, S_T, cond: int, cfg: SamplerConfig) -> DenseLatentGrid:
    """Value of the linearized trajectory at ``t = 0``; its derivative w.r.t. ``S_T`` is the identity."""
    return DenseLatentGrid(linear_trajectory(model, S_T, cond, cfg).endpoint())


# --- constraint and loss -------------------------------------------------------------


@dataclass
class TargetConstraint:
    """Binary region ``M`` and the desired structure-latent value ``y`` on it."""

    mask: MaskVolume
    target: np.ndarray

    def __post_init__(self):
        w = self.mask.weights
        if not np.isin(w, (0.0, 1.0)).all():
            raise DataError("constraint mask weights must be 0 or 1")
        if self.target.shape != w.shape:
            raise DataError(f"target shape {self.target.shape} does not match mask {w.shape}")

    @property
    def region(self) -> np.ndarray:
        return self.mask.weights > 0

    def occupancy(self) -> OccupancyField:
        return OccupancyField(np.where(self.region, self.target, -1.0), 0.0)


def ground_and_exclusion_target(dims: GridDims, ground_height: int, excluded: np.ndarray,
                                ground_value: float = 1.0, excluded_value: float = -1.0) -> TargetConstraint:
    """Solid ground slab ``z < ground_height`` and empty space inside ``excluded`` (above the slab)."""
    ex = np.asarray(excluded, bool)
    if ex.shape != dims.spatial:
        raise DataError("excluded region must match the grid")
    ground = np.zeros(dims.spatial, bool)
    ground[:ground_height] = True
    ex = ex & ~ground
    y = np.where(ground, ground_value, np.where(ex, excluded_value, 0.0))
    return TargetConstraint(MaskVolume((ground | ex).astype(np.float64)), y)


def linear_loss_from_endpoint(endpoint: np.ndarray, constraint: TargetConstraint):
    """``||y - M(endpoint)||^2`` over masked voxels and its gradient w.r.t. the endpoint."""
    m = constraint.mask.weights
    if not m.any():
        raise DataError("constraint mask is empty")
    r = m * (endpoint[..., 0] - constraint.target)
    g = np.zeros_like(endpoint)
    g[..., 0] = 2.0 * m * r
    return float(np.sum(r * r)), g


def linear_loss(model, S_T, constraint: TargetConstraint, cond: int, cfg: SamplerConfig,
                parameterization: str = "direct", displacement=None):
    """Loss and gradient w.r.t. the chosen parameterization.

    ``displacement`` freezes ``G(S_T) - S_T``; by default it is recomputed from ``S_T``.
    """
    S = S_T.data if isinstance(S_T, DenseLatentGrid) else np.asarray(S_T, dtype=np.float64)
    if displacement is None:
        displacement = denoise(model, S, cond, cfg) - S
    loss, g = linear_loss_from_endpoint(S + displacement, constraint)
    if parameterization == "direct":
        return loss, g
    if parameterization == "spectral":
        return loss, fft3_adjoint(g)
    raise DataError(f"unknown parameterization {parameterization!r}")


# --- metrics -----------------------------------------------------------------------


def _sets(a, b):
    A = a.active if isinstance(a, OccupancyField) else np.asarray(a, bool)
    B = b.active if isinstance(b, OccupancyField) else np.asarray(b, bool)
    if A.shape != B.shape:
        raise DataError("occupancy fields differ in shape")
    return A, B


def iou(a, b) -> float:
    A, B = _sets(a, b)
    union = int((A | B).sum())
    return 1.0 if union == 0 else int((A & B).sum()) / union


def dice(a, b) -> float:
    A, B = _sets(a, b)
    tot = int(A.sum()) + int(B.sum())
    return 1.0 if tot == 0 else 2.0 * int((A & B).sum()) / tot


# --- optimization loop -------------------------------------------------------------


@dataclass
class OptConfig:
    """A ``dice_threshold`` above 1 never triggers, so the full ``max_steps`` budget is run."""

    lr: float = 9.0
    max_steps: int = 10
    parameterization: str = "spectral"
    dice_threshold: float = 0.9
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    spike_factor: float = 10.0

    def __post_init__(self):
        if self.lr < 0:
            raise DataError("lr must be non-negative")
        if self.max_steps < 1:
            raise DataError("max_steps must be >= 1")
        if self.parameterization not in ("spectral", "direct"):
            raise DataError(f"unknown parameterization {self.parameterization!r}")
        if self.optimizer not in ("adam", "gd"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class OptResult:
    latent: DenseLatentGrid
    loss: list = field(default_factory=list)
    iou: list = field(default_factory=list)
    dice: list = field(default_factory=list)
    converged: bool = False
    spiked: bool = False

    def rows(self):
        return [(i, l, a, b) for i, (l, a, b) in enumerate(zip(self.loss, self.iou, self.dice))]

    @property
    def steps_to_threshold(self):
        return len(self.loss) - 1 if self.converged else None


class _Adam:
    def __init__(self, cfg: OptConfig):
        self.cfg, self.m, self.v, self.k = cfg, None, None, 0

    def step(self, g):
        c = self.cfg
        if c.optimizer == "gd":
            return c.lr * g
        if self.m is None:
            self.m, self.v = np.zeros_like(g), np.zeros(g.shape)
        self.k += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * g
        # complex parameters: real and imaginary parts are separate coordinates
        sq = g.real ** 2 + 1j * g.imag ** 2 if np.iscomplexobj(g) else g * g
        self.v = c.beta2 * self.v + (1 - c.beta2) * sq
        mh = self.m / (1 - c.beta1 ** self.k)
        vh = self.v / (1 - c.beta2 ** self.k)
        if np.iscomplexobj(g):
            return c.lr * (mh.real / (np.sqrt(vh.real) + c.eps) + 1j * mh.imag / (np.sqrt(vh.imag) + c.eps))
        return c.lr * mh / (np.sqrt(vh) + c.eps)


def optimize_initial_latent(model: ToyFlowModel, S_T0, constraint: TargetConstraint, cfg: OptConfig,
                            cond: int, sampler: SamplerConfig, decoders: ToyDecoders | None = None) -> OptResult:
    """Descend ``linear_loss`` from ``S_T0``; ``G(S_T)`` is refreshed every step.

    Row ``i`` of the traces (loss, IoU and Dice of the endpoint occupancy vs the
    target inside the constraint region) is taken after ``i`` updates; at most
    ``max_steps`` rows are recorded and the loop stops early once Dice reaches
    the threshold. A non-finite loss raises ``NumericalAbort``
    carrying the partial result.
    """
    decoders = decoders or ToyDecoders.identity(model.channels, 4)
    S = (S_T0.data if isinstance(S_T0, DenseLatentGrid) else np.asarray(S_T0, dtype=np.float64)).copy()
    X = np.fft.fftn(S, axes=_AXES) if cfg.parameterization == "spectral" else None
    region = constraint.region
    want = constraint.target > 0
    opt = _Adam(cfg)
    res = OptResult(DenseLatentGrid(S.copy()))
    for step in range(cfg.max_steps):
        with np.errstate(over="ignore", invalid="ignore"):
            # a diverged latent (or one the sampler overflows on) yields an infinite loss
            end = np.full_like(S, np.inf)
            if np.isfinite(S).all():
                try:
                    end = denoise(model, S, cond, sampler)
                except DataError:
                    pass
            loss, g = linear_loss_from_endpoint(end, constraint)
        if not np.isfinite(loss):
            res.loss.append(float("inf") if np.isnan(loss) else loss)
            res.iou.append(0.0)
            res.dice.append(0.0)
            raise NumericalAbort(f"init-opt loss became non-finite at step {step}", result=res)
        occ = decode_occupancy(decoders, DenseLatentGrid(end)).active
        res.loss.append(loss)
        res.iou.append(iou(occ & region, want & region))
        res.dice.append(dice(occ & region, want & region))
        res.latent = DenseLatentGrid(S.copy())
        if step and res.loss[-1] > cfg.spike_factor * res.loss[-2]:
            res.spiked = True
            log.info("loss spike at step %d: %.4g -> %.4g", step, res.loss[-2], res.loss[-1])
        if res.dice[-1] >= cfg.dice_threshold:
            res.converged = True
            break
        if cfg.lr == 0.0:
            # nothing can move: the trace stays flat
            for _ in range(cfg.max_steps - 1 - step):
                res.loss.append(loss)
                res.iou.append(res.iou[-1])
                res.dice.append(res.dice[-1])
            break
        if step == cfg.max_steps - 1:
            break
        if X is None:
            S = S - opt.step(g)
        else:
            X = X - opt.step(fft3_adjoint(g))
            S = np.real(np.fft.ifftn(X, axes=_AXES))
    return res
