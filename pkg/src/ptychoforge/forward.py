"""Far-field measurement model, photon statistics and intensity normalization.

A diffraction pattern is the squared modulus of the (unnormalized) Fourier
transform of the exit wave ``object_patch * probe``, stored with zero
frequency at pixel ``(H // 2, W // 2)``.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import (RandomSeed, as_complex_image, as_real_image, derive_stream, fft2_forward,
                   fftshift)
from .scan import ScanPlan

__all__ = [
    "DiffractionStack",
    "NormalizationFactors",
    "OutOfBoundsError",
    "Probe",
    "ProbeNormalization",
    "apply_photon_scale",
    "extract_patch",
    "make_test_probe",
    "normalize_probe",
    "rms_norm",
    "simulate_dataset",
    "simulate_pattern",
]


class OutOfBoundsError(ValueError):
    """A patch footprint (with its interpolation halo) leaves the object."""

    def __init__(self, center, size, shape):
        super().__init__(f"patch of size {size} at center (x={center[0]}, y={center[1]}) "
                         f"does not fit in object of shape {shape}")
        self.center = center


class ProbeNormalization(str, enum.Enum):
    RAW = "raw"
    RMS = "rms"


@dataclass(frozen=True)
class Probe:
    field: np.ndarray
    source_label: str = "synthetic"
    normalization: ProbeNormalization = ProbeNormalization.RAW

    def __post_init__(self):
        f = as_complex_image(self.field, "probe")
        if f.shape[0] != f.shape[1]:
            raise ValueError(f"probe must be square, got {f.shape}")
        object.__setattr__(self, "field", f)
        object.__setattr__(self, "normalization", ProbeNormalization(self.normalization))

    @property
    def size(self) -> int:
        return self.field.shape[0]


@dataclass(frozen=True)
class DiffractionStack:
    """Photon-count (or noiseless intensity) patterns with their scan positions.

    ``intensity_scale`` is the factor that was applied to ``|FT(O P)|**2``
    before Poisson sampling, so the data are consistent with the probe
    ``sqrt(intensity_scale) * P``. ``photon_target`` is ``None`` for noiseless
    or unknown-flux data.
    """

    patterns: np.ndarray
    plan: ScanPlan
    photon_target: float | None = None
    probe_label: str = "synthetic"
    intensity_scale: float = 1.0
    counts: str = "raw"

    def __post_init__(self):
        p = np.asarray(self.patterns)
        if p.ndim != 3:
            raise ValueError(f"patterns must be (N, H, W), got shape {p.shape}")
        if p.shape[0] != len(self.plan):
            raise ValueError(f"{p.shape[0]} patterns but {len(self.plan)} scan positions")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("patterns must be finite and non-negative")
        object.__setattr__(self, "patterns", p)

    def __len__(self):
        return self.patterns.shape[0]

    @property
    def shape(self):
        return self.patterns.shape[1:]


@dataclass(frozen=True)
class NormalizationFactors:
    n_rms: float
    n_energy: float
    batch_size: int


def make_test_probe(size: int = 64, diameter: float = 26.0, kind: str = "airy", *,
                    edge: float = 1.5, defocus: float = 0.02, coma: float = 4e-4) -> Probe:
    """Synthetic probes for tests and demos.

    ``kind="airy"`` is the in-focus image of a circular pupil: a real-valued
    field whose rings alternate in sign (phase 0 or pi). ``diameter`` is the
    diameter of its first dark ring in pixels.

    ``kind="aberrated"`` is a soft-edged disk of the given diameter with a
    quadratic (``defocus``, rad/px^2) plus cubic (``coma``, rad/px^3) phase;
    the cubic term makes the phase non-centrosymmetric.
    """
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size] - c
    if kind == "airy":
        # first zero of the Airy pattern at 1.2197 * size / (2 * pupil_radius)
        pupil_radius = 1.2197 * size / diameter
        f = np.fft.fftfreq(size) * size
        pupil = (np.hypot(f[:, None], f[None, :]) <= pupil_radius).astype(float)
        field = np.real(np.fft.fftshift(np.fft.ifft2(pupil)))
        field = field / np.abs(field).max()
        return Probe(field.astype(np.complex128), "airy-test-probe")
    if kind == "aberrated":
        r = np.hypot(xx, yy)
        amp = 0.5 * (1.0 - np.tanh((r - diameter / 2) / edge))
        phase = defocus * r**2 + coma * (xx**3 - 3 * xx * yy**2 + 0.5 * yy**3)
        return Probe(amp * np.exp(1j * phase), "aberrated-test-probe")
    raise ValueError(f"unknown test probe kind {kind!r}")


def _footprint(center, size, shape):
    """Top-left integer corner and fractional offsets of a patch."""
    cx, cy = float(center[0]), float(center[1])
    x0 = cx - size / 2
    y0 = cy - size / 2
    ix, iy = int(np.floor(x0)), int(np.floor(y0))
    fx, fy = x0 - ix, y0 - iy
    need_x = size + (1 if fx > 0 else 0)
    need_y = size + (1 if fy > 0 else 0)
    if ix < 0 or iy < 0 or ix + need_x > shape[1] or iy + need_y > shape[0]:
        raise OutOfBoundsError((cx, cy), size, shape)
    return iy, ix, fy, fx


def extract_patch(obj, center, size: int) -> np.ndarray:
    """``size x size`` patch centred on ``center = (x, y)`` with bilinear resampling.

    Patch pixel ``(i, j)`` samples the object at row ``y - size/2 + i`` and
    column ``x - size/2 + j``. Real and imaginary parts are interpolated
    separately; integer-aligned centres return an exact copy of the slice.
    """
    obj = np.asarray(obj)
    iy, ix, fy, fx = _footprint(center, size, obj.shape)
    if fx == 0 and fy == 0:
        return obj[iy:iy + size, ix:ix + size].astype(np.complex128, copy=True)
    a = obj[iy:iy + size + 1, ix:ix + size + 1].astype(np.complex128)
    if fx:
        a = (1.0 - fx) * a[:, :-1] + fx * a[:, 1:]
    else:
        a = a[:, :-1]
    if fy:
        a = (1.0 - fy) * a[:-1, :] + fy * a[1:, :]
    else:
        a = a[:-1, :]
    return a


def simulate_pattern(object_patch, probe) -> np.ndarray:
    """Noiseless far-field intensity ``|FT(patch * probe)|**2``, DC centred."""
    p = probe.field if isinstance(probe, Probe) else as_complex_image(probe, "probe")
    y = np.asarray(object_patch)
    if y.shape != p.shape:
        raise ValueError(f"patch shape {y.shape} does not match probe shape {p.shape}")
    return fftshift(np.abs(fft2_forward(y * p)) ** 2)


def _poisson(lam, rng):
    return rng.poisson(lam).astype(np.float64)


def apply_photon_scale(pattern, total_photons: float, seed: RandomSeed | int) -> np.ndarray:
    """Rescale ``pattern`` to sum to ``total_photons`` and Poisson-sample each pixel."""
    pat = as_real_image(pattern, "pattern")
    if np.any(pat < 0):
        raise ValueError("pattern must be non-negative")
    if not total_photons > 0:
        raise ValueError("total_photons must be > 0")
    s = pat.sum()
    if not s > 0:
        raise ValueError("cannot scale a zero-energy pattern")
    return _poisson(pat * (total_photons / s), RandomSeed.coerce(seed).generator())


def _threads(threads):
    if threads is None:
        threads = os.environ.get("PTYCHOFORGE_THREADS", 1)
    return max(1, int(threads))


def simulate_dataset(obj, probe: Probe, plan: ScanPlan, photon_range=(1e4, 1e6),
                     seed: RandomSeed | int = 0, *, noiseless: bool = False,
                     threads: int | None = None) -> DiffractionStack:
    """Diffraction patterns for every scan position.

    One photon target per dataset is drawn log-uniformly from
    ``photon_range``. A single intensity scale, chosen so the mean pattern
    total equals that target, is applied to every noiseless pattern before
    independent Poisson sampling (stream ``("pos", i)`` for position ``i``).
    With ``noiseless=True`` the raw ``|FT|**2`` intensities are returned.
    Output does not depend on ``threads``.
    """
    field = obj.field if hasattr(obj, "field") else np.asarray(obj)
    field = as_complex_image(field, "object")
    seed = RandomSeed.coerce(seed)
    lo, hi = map(float, photon_range)
    if not (0 < lo <= hi):
        raise ValueError(f"photon_range must satisfy 0 < low <= high, got {photon_range}")
    size = probe.size
    for c in plan.positions:
        _footprint(c, size, field.shape)

    def noiseless_chunk(idx):
        return [simulate_pattern(extract_patch(field, plan.positions[i], size), probe)
                for i in idx]

    n = len(plan)
    workers = _threads(threads)
    chunks = np.array_split(np.arange(n), max(1, min(workers * 4, n)))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(noiseless_chunk, chunks))
    else:
        parts = [noiseless_chunk(c) for c in chunks]
    clean = np.stack([p for part in parts for p in part])

    if noiseless:
        return DiffractionStack(clean, plan, None, probe.source_label, 1.0)

    u = derive_stream(seed, "photons", 0).generator().random()
    target = lo if lo == hi else float(np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo))))
    mean_total = clean.sum(axis=(1, 2)).mean()
    if not mean_total > 0:
        raise ValueError("simulated intensities are all zero")
    scale = target / mean_total

    def noisy_chunk(idx):
        return [_poisson(clean[i] * scale, derive_stream(seed, "pos", int(i)).generator())
                for i in idx]

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(noisy_chunk, chunks))
    else:
        parts = [noisy_chunk(c) for c in chunks]
    counts = np.stack([p for part in parts for p in part])
    return DiffractionStack(counts, plan, target, probe.source_label, float(scale))


def rms_norm(stack) -> NormalizationFactors:
    """Per-dataset RMS and mean-intensity normalization factors.

    ``n_rms = sqrt(H W / mean_n sum_ij I_n^2)`` and
    ``n_energy = 1 / mean_n sum_ij I_n``.
    """
    I = np.asarray(stack.patterns if isinstance(stack, DiffractionStack) else stack,
                   dtype=np.float64)
    if I.ndim == 2:
        I = I[None]
    n, h, w = I.shape
    if n < 1:
        raise ValueError("empty stack")
    sq = np.einsum("nij,nij->", I, I) / n
    lin = I.sum() / n
    if not (sq > 0 and lin > 0):
        raise ValueError("cannot normalize an all-zero stack")
    return NormalizationFactors(float(np.sqrt(h * w / sq)), float(1.0 / lin), n)


def normalize_probe(probe: Probe) -> Probe:
    """Scale the probe so the mean of ``|p|**2`` over pixels is one."""
    p = probe.field
    power = np.mean(np.abs(p) ** 2)
    if not power > 0:
        raise ValueError("cannot normalize a zero probe")
    if probe.normalization is ProbeNormalization.RMS and abs(power - 1.0) < 1e-12:
        # already normalized; rescaling again would only add rounding noise
        return probe
    return replace(probe, field=p / np.sqrt(power), normalization=ProbeNormalization.RMS)
