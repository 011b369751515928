"""ePIE phase-retrieval oracle and the Poisson measurement likelihood.

The engine sweeps the scan positions in a seeded random order each
iteration. For one position it forms the exit wave, replaces the far-field
modulus with the measured one and feeds the difference back into the object
(and, optionally, the probe):

    O += alpha * conj(P) * (psi' - psi) / max|P|^2
    P += beta  * conj(O) * (psi' - psi) / max|O|^2

Sub-pixel positions are sampled with bilinear interpolation in the forward
step and scattered back on the nearest integer footprint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .core import RandomSeed, as_complex_image, derive_stream, ifftshift
from .forward import DiffractionStack, Probe, extract_patch

__all__ = [
    "ReconConfig",
    "ReconResult",
    "ReconstructionDiverged",
    "amplitude_projection",
    "poisson_nll",
    "reconstruct",
]

NLL_EPS = 1e-9


class ReconstructionDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"reconstruction diverged (non-finite estimate) at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class ReconConfig:
    iterations: int = 300
    alpha: float = 0.9
    beta: float = 0.9
    update_probe: bool = False
    seed: RandomSeed = field(default_factory=lambda: RandomSeed(0))
    initial_object: np.ndarray | None = None
    object_shape: tuple[int, int] | None = None

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0 < v <= 2:
                raise ValueError(f"{name} must lie in (0, 2], got {v}")
        object.__setattr__(self, "seed", RandomSeed.coerce(self.seed))


@dataclass(frozen=True)
class ReconResult:
    object_estimate: np.ndarray
    probe_estimate: np.ndarray
    error_history: np.ndarray
    illuminated_mask: np.ndarray


def amplitude_projection(Psi: np.ndarray, measured_amplitude: np.ndarray) -> np.ndarray:
    """Replace ``|Psi|`` by the measured amplitude, keeping the phase.

    Pixels where ``Psi`` vanishes have no defined phase and are set to zero.
    """
    mag = np.abs(Psi)
    out = np.zeros_like(Psi)
    nz = mag > 0
    out[nz] = Psi[nz] * (measured_amplitude[nz] / mag[nz])
    return out


def _corners(positions, size):
    tl = positions - size / 2.0
    return np.rint(tl).astype(np.int64), tl


def reconstruct(stack: DiffractionStack, probe: Probe, config: ReconConfig = ReconConfig()
                ) -> ReconResult:
    """Recover the object (and optionally refine the probe) from ``stack``.

    The probe is taken as given, scaled by ``sqrt(stack.intensity_scale)`` so
    it matches the photon scale of the data. ``error_history[k]`` is the mean
    squared difference between modelled and measured far-field amplitudes
    accumulated during sweep ``k``.
    """
    P = probe.field.astype(np.complex128) * np.sqrt(stack.intensity_scale)
    s = P.shape[0]
    if stack.shape != P.shape:
        raise ValueError(f"pattern shape {stack.shape} does not match probe shape {P.shape}")
    pos = stack.plan.positions
    corners, exact_tl = _corners(pos, s)
    integer = np.all(exact_tl == corners)

    if config.initial_object is not None:
        O = as_complex_image(config.initial_object, "initial_object").copy()
    else:
        if config.object_shape is not None:
            shape = tuple(int(v) for v in config.object_shape)
        else:
            shape = (int(np.ceil(exact_tl[:, 1].max())) + s + 1,
                     int(np.ceil(exact_tl[:, 0].max())) + s + 1)
        O = np.ones(shape, dtype=np.complex128)
    H, W = O.shape
    if (corners < 0).any() or (corners[:, 0] + s > W).any() or (corners[:, 1] + s > H).any():
        raise ValueError("scan positions fall outside the object bounds")
    if not integer:
        # forward-pass interpolation needs the bilinear halo too
        for c in pos:
            extract_patch(O, c, s)

    amps = np.sqrt(np.asarray(stack.patterns, dtype=np.float64))
    amps = ifftshift(amps)
    n = len(stack)
    rng = derive_stream(config.seed, "recon-order", 0).generator()
    alpha, beta = float(config.alpha), float(config.beta)
    history = np.empty(int(config.iterations))
    fft2, ifft2 = scipy.fft.fft2, scipy.fft.ifft2

    # overflow surfaces as ReconstructionDiverged, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(int(config.iterations)):
            p_norm = alpha / np.max(np.abs(P) ** 2)
            Pc = np.conj(P)
            err = 0.0
            for k in rng.permutation(n):
                x0, y0 = corners[k]
                view = O[y0:y0 + s, x0:x0 + s]
                o = view.copy() if integer else extract_patch(O, pos[k], s)
                psi = o * P
                Psi = fft2(psi)
                mag = np.abs(Psi)
                meas = amps[k]
                d = mag - meas
                err += float(np.dot(d.ravel(), d.ravel()))
                np.divide(meas, mag, out=mag, where=mag > 0)
                Psi *= mag
                dpsi = ifft2(Psi)
                dpsi -= psi
                if config.update_probe:
                    P = P + (beta / np.max(np.abs(o) ** 2)) * np.conj(o) * dpsi
                dpsi *= Pc
                dpsi *= p_norm
                view += dpsi
                if config.update_probe:
                    Pc = np.conj(P)
                    p_norm = alpha / np.max(np.abs(P) ** 2)
            history[it] = err / (n * s * s)
            if not (np.isfinite(history[it]) and np.isfinite(O).all() and np.isfinite(P).all()):
                raise ReconstructionDiverged(it)

    illum = np.zeros(O.shape)
    p2 = np.abs(P) ** 2
    for x0, y0 in corners:
        illum[y0:y0 + s, x0:x0 + s] += p2
    return ReconResult(O, P, history, illum)


def poisson_nll(predicted, measured) -> float:
    """Mean per-pixel Poisson negative log-likelihood ``lam - k log(lam + eps)``."""
    lam = np.asarray(predicted, dtype=np.float64)
    k = np.asarray(measured, dtype=np.float64)
    if lam.shape != k.shape:
        raise ValueError(f"shape mismatch {lam.shape} vs {k.shape}")
    if np.any(lam < 0) or np.any(k < 0):
        raise ValueError("poisson_nll needs non-negative inputs")
    if np.any(k != np.round(k)):
        raise ValueError("measured counts must be integer-valued")
    return float(np.mean(lam - k * np.log(lam + NLL_EPS)))
