"""Reconstruction quality metrics.

The FRC-AUC score chains four steps:

1. sub-pixel registration of the estimate to the truth (cross-correlation
   peak refined by a locally upsampled DFT) plus global phase alignment,
2. removal of the relative linear phase ramp,
3. a separable raised-cosine edge mask on both images,
4. Fourier ring correlation, integrated over ``[0, 0.5]`` cycles/pixel and
   divided by 0.5.

Shift convention: ``register(ref, mov).shift == (dx, dy)`` means
``mov(x, y) ~ ref(x - dx, y - dy)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_complex_image, as_real_image, fft2_forward, fft2_inverse, fftshift

__all__ = [
    "FrcResult",
    "RadialPSD",
    "Registration",
    "energy_fraction_above",
    "fit_phase_ramp",
    "fourier_shift",
    "frc",
    "frc_auc_pipeline",
    "half_bit_threshold",
    "illuminated_region",
    "radial_psd",
    "register",
    "remove_phase_ramp",
    "soft_edge_mask",
]


@dataclass(frozen=True)
class Registration:
    shift: tuple[float, float]
    ramp: tuple[float, float, float] = (0.0, 0.0, 0.0)
    global_phase: float = 0.0


@dataclass(frozen=True)
class FrcResult:
    frequencies: np.ndarray
    correlation: np.ndarray
    auc: float
    crossing_half_bit: float | None
    ring_counts: np.ndarray
    registration: Registration | None = None

    def to_dict(self) -> dict:
        d = {
            "auc": self.auc,
            "crossing_half_bit": self.crossing_half_bit,
            "frequencies": self.frequencies.tolist(),
            "correlation": self.correlation.tolist(),
            "ring_counts": self.ring_counts.tolist(),
        }
        if self.registration is not None:
            d["registration"] = {"shift": list(self.registration.shift),
                                 "ramp": list(self.registration.ramp),
                                 "global_phase": self.registration.global_phase}
        return d


# --------------------------------------------------------------------------
# registration


def _upsampled_dft(G, up, region, offset):
    """Inverse DFT of ``G`` sampled on a ``region``-sized grid with spacing ``1/up``.

    ``offset = (row0, col0)`` is the real-space coordinate of the first sample.
    """
    H, W = G.shape
    ky = np.fft.fftfreq(H) * H
    kx = np.fft.fftfreq(W) * W
    rows = offset[0] + np.arange(region) / up
    cols = offset[1] + np.arange(region) / up
    Er = np.exp(2j * np.pi * np.outer(rows, ky) / H)
    Ec = np.exp(2j * np.pi * np.outer(kx, cols) / W)
    return Er @ G @ Ec


def fourier_shift(img, shift) -> np.ndarray:
    """Translate ``img`` by ``shift = (dx, dy)`` pixels (periodic)."""
    img = np.asarray(img, dtype=np.complex128)
    H, W = img.shape
    dx, dy = shift
    ky = np.fft.fftfreq(H)[:, None]
    kx = np.fft.fftfreq(W)[None, :]
    ramp = np.exp(-2j * np.pi * (kx * dx + ky * dy))
    return fft2_inverse(fft2_forward(img) * ramp)


def register(reference, moving, upsample: int = 16) -> Registration:
    """Estimate the translation and global phase of ``moving`` relative to ``reference``.

    ``global_phase`` is ``arg(sum(conj(reference) * aligned))`` where
    ``aligned`` is ``moving`` shifted back onto the reference.
    """
    ref = as_complex_image(reference, "reference")
    mov = as_complex_image(moving, "moving")
    if ref.shape != mov.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {mov.shape}")
    if int(upsample) < 1:
        raise ValueError("upsample must be >= 1")
    if not (np.any(ref != 0) and np.any(mov != 0)):
        raise ValueError("cannot register a zero-energy image")
    H, W = ref.shape
    Fr, Fm = fft2_forward(ref), fft2_forward(mov)
    # sum_x conj(ref(x - d)) mov(x) peaks where mov(x) = ref(x - d)
    G = Fm * np.conj(Fr)
    cc = np.abs(fft2_inverse(G))
    r, c = np.unravel_index(int(np.argmax(cc)), cc.shape)
    dy = r - H if r > H // 2 else r
    dx = c - W if c > W // 2 else c
    dy, dx = float(dy), float(dx)
    up = int(upsample)
    if up > 1:
        region = int(np.ceil(1.5 * up))
        centre = np.fix(region / 2.0)
        for _ in range(2):
            offset = (dy - centre / up, dx - centre / up)
            up_cc = np.abs(_upsampled_dft(G, up, region, offset))
            rr, cc_ = np.unravel_index(int(np.argmax(up_cc)), up_cc.shape)
            dy = offset[0] + rr / up
            dx = offset[1] + cc_ / up
    aligned = fourier_shift(mov, (-dx, -dy))
    gp = float(np.angle(np.vdot(ref, aligned)))
    if abs(dx) < 1e-12:
        dx = 0.0
    if abs(dy) < 1e-12:
        dy = 0.0
    return Registration((dx, dy), (0.0, 0.0, 0.0), gp)


# --------------------------------------------------------------------------
# phase ramp


def fit_phase_ramp(img, mask=None) -> tuple[float, float, float]:
    """Least-squares phase plane ``gx*x + gy*y + c`` of a complex image.

    Minimizes ``sum(mask * |img - |img| exp(i plane)|**2)``, which is the same
    as maximizing ``|sum(mask * img * exp(-i (gx x + gy y)))|``. A zero-padded
    FFT finds the peak coarsely and Newton iterations polish it. ``x`` is the
    column index and ``y`` the row index.
    """
    z = as_complex_image(img, "img")
    H, W = z.shape
    w = np.ones((H, W)) if mask is None else np.asarray(mask, dtype=np.float64)
    if w.shape != z.shape:
        raise ValueError("mask shape does not match image")
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("mask must be non-negative with positive sum")
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    support = (w > 0) & (z != 0)
    if support.sum() < 3:
        raise ValueError("mask support too small to fit a plane")
    coords = np.stack([xx[support], yy[support]], axis=1)
    cov = np.cov(coords.T)
    if np.linalg.matrix_rank(cov, tol=1e-9 * max(1.0, np.abs(cov).max())) < 2:
        raise ValueError("mask support is collinear; phase plane is undetermined")

    a = w * z
    wt = w * np.abs(z)
    xm = float((wt * xx).sum() / wt.sum())
    ym = float((wt * yy).sum() / wt.sum())
    xc, yc = xx - xm, yy - ym

    pad = 4
    F = np.fft.fft2(a, s=(pad * H, pad * W))
    r, c = np.unravel_index(int(np.argmax(np.abs(F))), F.shape)
    g = np.array([2 * np.pi * np.fft.fftfreq(pad * W)[c], 2 * np.pi * np.fft.fftfreq(pad * H)[r]])

    def terms(g):
        e = a * np.exp(-1j * (g[0] * xc + g[1] * yc))
        S = e.sum()
        d = np.array([(-1j * xc * e).sum(), (-1j * yc * e).sum()])
        dd = np.array([[(-xc * xc * e).sum(), (-xc * yc * e).sum()],
                       [(-xc * yc * e).sum(), (-yc * yc * e).sum()]])
        return S, d, dd

    S, d, dd = terms(g)
    val = abs(S) ** 2
    for _ in range(100):
        grad = 2 * np.real(np.conj(S) * d)
        hess = 2 * np.real(np.conj(d)[:, None] * d[None, :] + np.conj(S) * dd)
        try:
            step = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        if np.any(np.linalg.eigvalsh(hess) >= 0) or np.dot(step, grad) < 0:
            # not in the concave basin: fall back to a scaled gradient step
            step = grad / (np.abs(hess).max() + 1e-300)
        t = 1.0
        while True:
            S2, d2, dd2 = terms(g + t * step)
            if abs(S2) ** 2 >= val or t < 1e-8:
                break
            t *= 0.5
        g = g + t * step
        S, d, dd = S2, d2, dd2
        val = abs(S) ** 2
        if np.max(np.abs(t * step)) < 1e-15:
            break
    gx, gy = float(g[0]), float(g[1])
    c0 = float(np.angle(S)) - gx * xm - gy * ym
    c0 = float(np.angle(np.exp(1j * c0)))
    return gx, gy, c0


def remove_phase_ramp(img, mask=None, ramp=None) -> np.ndarray:
    """Subtract the fitted (or given) phase plane from ``img``."""
    z = as_complex_image(img, "img")
    gx, gy, c = fit_phase_ramp(z, mask) if ramp is None else ramp
    H, W = z.shape
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    return z * np.exp(-1j * (gx * xx + gy * yy + c))


# --------------------------------------------------------------------------
# masking and FRC


def _taper_1d(n, edge_fraction):
    L = edge_fraction * (n - 1)
    i = np.arange(n, dtype=float)
    d = np.minimum(i, n - 1 - i)
    w = np.ones(n)
    inside = d < L
    w[inside] = 0.5 * (1.0 - np.cos(np.pi * d[inside] / L))
    return w


def soft_edge_mask(height: int, width: int, edge_fraction: float = 0.1) -> np.ndarray:
    """Separable raised-cosine window: 1 inside, tapering to 0 at the borders.

    Each axis tapers over ``edge_fraction * (n - 1)`` samples at both ends.
    """
    if not 0 < edge_fraction < 0.5:
        raise ValueError("edge_fraction must lie in (0, 0.5)")
    return np.outer(_taper_1d(int(height), edge_fraction), _taper_1d(int(width), edge_fraction))


def half_bit_threshold(n_pixels) -> np.ndarray:
    """Half-bit information threshold for rings of ``n_pixels`` samples."""
    s = np.sqrt(np.maximum(np.asarray(n_pixels, dtype=float), 1.0))
    return (0.2071 + 1.9102 / s) / (1.2071 + 0.9102 / s)


def _ring_index(shape, ring_width):
    H, W = shape
    fy = np.fft.fftfreq(H)[:, None]
    fx = np.fft.fftfreq(W)[None, :]
    r = np.sqrt(fx * fx + fy * fy)
    n_rings = int(np.floor(0.5 / ring_width + 1e-9)) + 1
    idx = np.rint(r / ring_width).astype(np.int64)
    return idx, n_rings


def _crossing(freq, curve, threshold):
    """First frequency after DC where ``curve`` drops below ``threshold``."""
    below = np.flatnonzero(curve[1:] < threshold[1:]) + 1
    if below.size == 0:
        return None
    k = int(below[0])
    d0 = curve[k - 1] - threshold[k - 1]
    d1 = curve[k] - threshold[k]
    t = d0 / (d0 - d1) if d0 != d1 else 0.0
    return float(freq[k - 1] + t * (freq[k] - freq[k - 1]))


def frc(a, b, ring_width: float | None = None, auc_mode: str = "nyquist") -> FrcResult:
    """Fourier ring correlation of two equally sized images.

    ``FRC(k) = Re(sum F_a conj(F_b)) / sqrt(sum |F_a|^2 * sum |F_b|^2)`` over
    ring ``k``. A ring where both spectra vanish counts as perfectly
    correlated; one where only one vanishes counts as zero. ``auc`` is the
    trapezoidal area up to 0.5 cycles/pixel divided by 0.5, clipped to
    ``[0, 1]``. ``auc_mode="half"`` integrates only up to the first crossing
    of correlation 0.5 instead (still divided by 0.5).
    """
    A = as_complex_image(a, "a")
    B = as_complex_image(b, "b")
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch {A.shape} vs {B.shape}")
    if auc_mode not in ("nyquist", "half"):
        raise ValueError(f"unknown auc_mode {auc_mode!r}")
    H, W = A.shape
    ring_width = 1.0 / max(H, W) if ring_width is None else float(ring_width)
    idx, n_rings = _ring_index(A.shape, ring_width)
    inside = idx < n_rings
    flat = idx[inside]
    counts = np.bincount(flat, minlength=n_rings)
    if np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"ring {empty} contains no frequency samples; ring_width too fine")
    Fa, Fb = fft2_forward(A)[inside], fft2_forward(B)[inside]
    cross = np.bincount(flat, np.real(Fa * np.conj(Fb)), minlength=n_rings)
    pa = np.bincount(flat, np.abs(Fa) ** 2, minlength=n_rings)
    pb = np.bincount(flat, np.abs(Fb) ** 2, minlength=n_rings)
    den = np.sqrt(pa * pb)
    corr = np.zeros(n_rings)
    ok = den > 0
    corr[ok] = cross[ok] / den[ok]
    corr[(pa == 0) & (pb == 0)] = 1.0
    corr = np.clip(corr, -1.0, 1.0)
    freq = np.arange(n_rings) * ring_width

    if auc_mode == "nyquist":
        area = np.trapezoid(corr, freq)
    else:
        stop = _crossing(freq, corr, np.full(n_rings, 0.5))
        if stop is None:
            area = np.trapezoid(corr, freq)
        else:
            keep = freq < stop
            f = np.append(freq[keep], stop)
            cv = np.append(corr[keep], 0.5)
            area = np.trapezoid(cv, f)
    auc = float(np.clip(area / 0.5, 0.0, 1.0))
    crossing = _crossing(freq, corr, half_bit_threshold(counts))
    return FrcResult(freq, corr, auc, crossing, counts)


def illuminated_region(illumination, threshold: float = 0.1) -> tuple[slice, slice]:
    """Bounding box of pixels whose illumination exceeds ``threshold * max``."""
    ill = as_real_image(illumination, "illumination")
    m = ill > threshold * ill.max()
    if not m.any():
        raise ValueError("illumination map is empty")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    return slice(int(rows[0]), int(rows[-1]) + 1), slice(int(cols[0]), int(cols[-1]) + 1)


def frc_auc_pipeline(truth, estimate, *, upsample: int = 16, edge_fraction: float = 0.1,
                     ring_width: float | None = None, auc_mode: str = "nyquist",
                     passes: int = 2) -> FrcResult:
    """Register, de-ramp and mask ``estimate`` against ``truth``, then FRC.

    Registration and relative ramp removal alternate ``passes`` times since a
    residual ramp slightly biases the correlation peak and vice versa.
    """
    t = as_complex_image(truth, "truth")
    e = as_complex_image(estimate, "estimate")
    if t.shape != e.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {e.shape}")
    H, W = t.shape
    mask = soft_edge_mask(H, W, edge_fraction)
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    # A phase ramp translates the spectrum while a translation leaves spectral
    # magnitudes alone, so the magnitude spectra pin down the ramp first; a
    # strong ramp would otherwise smear the real-space correlation peak.
    spec = register(fftshift(np.abs(fft2_forward(t))), fftshift(np.abs(fft2_forward(e))),
                    upsample)
    g0 = (2 * np.pi * spec.shift[0] / W, 2 * np.pi * spec.shift[1] / H)
    aligned = e * np.exp(-1j * (g0[0] * xx + g0[1] * yy))
    total_shift = np.zeros(2)
    total_ramp = np.array([g0[0], g0[1], 0.0])
    gp = 0.0
    for _ in range(max(1, int(passes))):
        reg = register(t, aligned, upsample)
        total_shift += reg.shift
        aligned = fourier_shift(aligned, (-reg.shift[0], -reg.shift[1]))
        aligned = aligned * np.exp(-1j * reg.global_phase)
        gp += reg.global_phase
        gx, gy, c = fit_phase_ramp(aligned * np.conj(t), mask)
        aligned = aligned * np.exp(-1j * (gx * xx + gy * yy + c))
        total_ramp += (gx, gy, c)
    res = frc(t * mask, aligned * mask, ring_width, auc_mode)
    reg = Registration((float(total_shift[0]), float(total_shift[1])),
                       tuple(float(v) for v in total_ramp),
                       float(np.angle(np.exp(1j * (gp + total_ramp[2])))))
    return FrcResult(res.frequencies, res.correlation, res.auc, res.crossing_half_bit,
                     res.ring_counts, reg)


# --------------------------------------------------------------------------
# power spectra


@dataclass(frozen=True)
class RadialPSD:
    frequency: np.ndarray
    power: np.ndarray
    counts: np.ndarray

    @property
    def mean_power(self) -> np.ndarray:
        return self.power / self.counts


def radial_psd(img, window: str | None = None) -> RadialPSD:
    """Radially integrated ``|FFT|**2`` on integer-radius annuli up to 0.5 cycles/pixel.

    ``window="hann"`` apodizes the image first, which suppresses the
    edge-discontinuity leakage of non-periodic images.
    """
    z = np.asarray(img)
    if z.ndim != 2:
        raise ValueError("radial_psd expects a 2-D image")
    if not np.any(z != 0):
        raise ValueError("radial_psd of a zero image is undefined")
    H, W = z.shape
    if window == "hann":
        z = z * np.outer(np.hanning(H), np.hanning(W))
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    P = np.abs(fftshift(fft2_forward(z))) ** 2
    n = max(H, W)
    fy = (np.arange(H) - H // 2) / H
    fx = (np.arange(W) - W // 2) / W
    r = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    idx = np.rint(r * n).astype(np.int64)
    n_rings = n // 2 + 1
    inside = idx < n_rings
    counts = np.bincount(idx[inside], minlength=n_rings)
    power = np.bincount(idx[inside], P[inside], minlength=n_rings)
    keep = counts > 0
    return RadialPSD(np.arange(n_rings)[keep] / n, power[keep], counts[keep])


def energy_fraction_above(psd: RadialPSD, cutoff: float, include_dc: bool = False) -> float:
    """Fraction of radially integrated power at frequencies strictly above ``cutoff``."""
    f, p = psd.frequency, psd.power
    if not include_dc:
        f, p = f[1:], p[1:]
    total = p.sum()
    if not total > 0:
        raise ValueError("spectrum has no power outside DC")
    return float(p[f > cutoff].sum() / total)
