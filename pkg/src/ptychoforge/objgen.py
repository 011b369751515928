"""Procedural synthetic objects.

Five texture classes are available:

======  =====================================================================
``dl``  dead leaves: occluding disks with power-law radii until full coverage
``pr``  procedural: anti-aliased lines and filled ellipses on an empty canvas
``wn``  white noise, i.i.d. N(0, 1) per pixel
``bwn`` white noise blurred with a Gaussian kernel
``sn``  simplex noise, a few octaves of band-limited gradient noise
======  =====================================================================

A scalar texture becomes a complex object through :func:`to_complex_object`,
which maps the same texture into a phase range of ``[-pi, pi]`` and an
amplitude range of ``[0.7, 1.0]`` so the two are positively correlated.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy import ndimage

from .core import RandomSeed, as_real_image, derive_stream

__all__ = [
    "ObjectClass",
    "ObjectKind",
    "ParameterError",
    "SyntheticObject",
    "generate_object",
    "generate_scalar_texture",
    "to_complex_object",
]

MIN_SIZE = 64


class ParameterError(ValueError):
    """Invalid object-class parameters. ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ObjectKind(str, enum.Enum):
    DEAD_LEAVES = "dl"
    PROCEDURAL = "pr"
    WHITE_NOISE = "wn"
    BLURRED_WHITE_NOISE = "bwn"
    SIMPLEX_NOISE = "sn"


_DEFAULTS: dict[ObjectKind, dict[str, Any]] = {
    ObjectKind.DEAD_LEAVES: {"radius_min": 3.0, "radius_max": None, "exponent": 3.0,
                             "max_shapes": 2_000_000},
    ObjectKind.PROCEDURAL: {"line_width": (1.0, 3.0), "ellipse_axes": (4.0, 40.0),
                            "opacity": (0.3, 1.0), "coverage": 0.6},
    ObjectKind.WHITE_NOISE: {},
    ObjectKind.BLURRED_WHITE_NOISE: {"sigma": 3.0, "truncate": 4.0},
    ObjectKind.SIMPLEX_NOISE: {"octaves": 3, "min_wavelength": 13.0, "persistence": 0.5},
}


def _check_range(params, name, low_bound=0.0, upper=None):
    lo, hi = params[name]
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo <= low_bound or hi < lo:
        raise ParameterError(name, f"expected {low_bound} < low <= high, got ({lo}, {hi})")
    if upper is not None and hi > upper:
        raise ParameterError(name, f"upper end must be <= {upper}, got {hi}")


@dataclass(frozen=True)
class ObjectClass:
    """Texture class plus its parameters; missing parameters take defaults."""

    kind: ObjectKind
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        kind = ObjectKind(self.kind)
        unknown = set(self.params) - set(_DEFAULTS[kind])
        if unknown:
            name = sorted(unknown)[0]
            raise ParameterError(name, f"not a parameter of class {kind.value!r}")
        merged = {**_DEFAULTS[kind], **dict(self.params)}
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "params", merged)
        self.validate()

    def validate(self) -> None:
        p = self.params
        if self.kind is ObjectKind.DEAD_LEAVES:
            if not p["radius_min"] > 0:
                raise ParameterError("radius_min", "must be > 0")
            if p["radius_max"] is not None and p["radius_max"] <= p["radius_min"]:
                raise ParameterError("radius_max", "must exceed radius_min")
            if not p["exponent"] > 1:
                raise ParameterError("exponent", "must be > 1")
            if int(p["max_shapes"]) < 1:
                raise ParameterError("max_shapes", "must be >= 1")
        elif self.kind is ObjectKind.PROCEDURAL:
            _check_range(p, "line_width")
            _check_range(p, "ellipse_axes")
            _check_range(p, "opacity", upper=1.0)
            if not 0 < p["coverage"] < 1:
                raise ParameterError("coverage", "must lie in (0, 1)")
        elif self.kind is ObjectKind.BLURRED_WHITE_NOISE:
            if not p["sigma"] > 0:
                raise ParameterError("sigma", "blur kernel sigma must be > 0")
            if not p["truncate"] > 0:
                raise ParameterError("truncate", "must be > 0")
        elif self.kind is ObjectKind.SIMPLEX_NOISE:
            if int(p["octaves"]) < 1:
                raise ParameterError("octaves", "must be >= 1")
            if not p["min_wavelength"] > 2:
                raise ParameterError("min_wavelength", "must exceed 2 pixels (Nyquist)")
            if not 0 < p["persistence"] <= 1:
                raise ParameterError("persistence", "must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "params": {k: (list(v) if isinstance(v, tuple) else v)
                                                    for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ObjectClass":
        params = {k: (tuple(v) if isinstance(v, list) else v)
                  for k, v in dict(d.get("params", {})).items()}
        return cls(ObjectKind(d["kind"]), params)


@dataclass(frozen=True)
class SyntheticObject:
    """Complex transmission function plus the recipe that produced it."""

    field: np.ndarray
    object_class: ObjectClass
    seed: RandomSeed

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.field)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.field)


# --------------------------------------------------------------------------
# dead leaves


def _power_law_radii(rng, n, r_min, r_max, exponent):
    # inverse CDF of p(r) ~ r**-exponent on [r_min, r_max]
    a = 1.0 - exponent
    u = rng.random(n)
    lo, hi = r_min**a, r_max**a
    return (lo + u * (hi - lo)) ** (1.0 / a)


def _dead_leaves(h, w, p, rng):
    r_min = float(p["radius_min"])
    r_max = float(p["radius_max"] or min(h, w) / 4)
    out = np.full((h, w), np.nan)
    uncovered = h * w
    drawn = 0
    batch = 1024
    while uncovered:
        radii = _power_law_radii(rng, batch, r_min, r_max, p["exponent"])
        # centres may sit outside the canvas so borders see partial disks
        cy = rng.uniform(-r_max, h + r_max, batch)
        cx = rng.uniform(-r_max, w + r_max, batch)
        gray = rng.random(batch)
        for r, y0, x0, g in zip(radii, cy, cx, gray):
            drawn += 1
            if drawn > p["max_shapes"]:
                raise RuntimeError(f"dead leaves did not cover the canvas within "
                                   f"{p['max_shapes']} disks")
            r0, r1 = max(int(np.floor(y0 - r)), 0), min(int(np.ceil(y0 + r)) + 1, h)
            c0, c1 = max(int(np.floor(x0 - r)), 0), min(int(np.ceil(x0 + r)) + 1, w)
            if r0 >= r1 or c0 >= c1:
                continue
            yy = np.arange(r0, r1)[:, None] - y0
            xx = np.arange(c0, c1)[None, :] - x0
            view = out[r0:r1, c0:c1]
            hit = (yy * yy + xx * xx <= r * r) & np.isnan(view)
            n = int(hit.sum())
            if n:
                view[hit] = g
                uncovered -= n
                if not uncovered:
                    break
    return out


# --------------------------------------------------------------------------
# procedural lines and ellipses


def _segment_coverage(h, w, p0, p1, width):
    pad = width / 2 + 1
    r0 = max(int(np.floor(min(p0[0], p1[0]) - pad)), 0)
    r1 = min(int(np.ceil(max(p0[0], p1[0]) + pad)) + 1, h)
    c0 = max(int(np.floor(min(p0[1], p1[1]) - pad)), 0)
    c1 = min(int(np.ceil(max(p0[1], p1[1]) + pad)) + 1, w)
    if r0 >= r1 or c0 >= c1:
        return None
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(float)
    d = p1 - p0
    length2 = float(d @ d)
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(length2, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    return (slice(r0, r1), slice(c0, c1)), np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)


def _ellipse_coverage(h, w, centre, a, b, theta):
    ext = max(a, b) + 1
    r0, r1 = max(int(np.floor(centre[0] - ext)), 0), min(int(np.ceil(centre[0] + ext)) + 1, h)
    c0, c1 = max(int(np.floor(centre[1] - ext)), 0), min(int(np.ceil(centre[1] + ext)) + 1, w)
    if r0 >= r1 or c0 >= c1:
        return None
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(float)
    dy, dx = yy - centre[0], xx - centre[1]
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    grad = np.sqrt((u / a**2) ** 2 + (v / b**2) ** 2) / np.maximum(rho, 1e-12)
    signed = (rho - 1.0) / np.maximum(grad, 1e-12)
    return (slice(r0, r1), slice(c0, c1)), np.clip(0.5 - signed, 0.0, 1.0)


def _procedural(h, w, p, rng):
    canvas = np.zeros((h, w))
    wlo, whi = p["line_width"]
    alo, ahi = p["ellipse_axes"]
    olo, ohi = p["opacity"]
    target = p["coverage"] * h * w
    size = min(h, w)
    shape_idx = 0
    # coverage is re-counted every few shapes; a hard cap guards degenerate params
    while True:
        for _ in range(8):
            if shape_idx % 2 == 0:
                p0 = rng.uniform([0, 0], [h, w])
                length = rng.uniform(0.1 * size, 0.6 * size)
                ang = rng.uniform(0, np.pi)
                p1 = p0 + length * np.array([np.sin(ang), np.cos(ang)])
                cov = _segment_coverage(h, w, p0, p1, rng.uniform(wlo, whi))
            else:
                centre = rng.uniform([0, 0], [h, w])
                a, b = rng.uniform(alo, ahi, 2) / 2
                cov = _ellipse_coverage(h, w, centre, a, b, rng.uniform(0, np.pi))
            opacity = rng.uniform(olo, ohi)
            shape_idx += 1
            if cov is not None:
                sl, c = cov
                canvas[sl] += opacity * c
        if np.count_nonzero(canvas) >= target or shape_idx > 100 * h * w:
            break
    return np.clip(canvas, 0.0, 1.0)


# --------------------------------------------------------------------------
# simplex noise

_F2 = 0.5 * (np.sqrt(3.0) - 1.0)
_G2 = (3.0 - np.sqrt(3.0)) / 6.0
# ~99% of one simplex octave's power lies below 2 cycles per lattice cell
_SIMPLEX_CELLS_PER_EDGE = 2.0


def _simplex2(x, y, perm, grads):
    """2-D simplex noise at arrays of points ``(x, y)``; output roughly in [-1, 1]."""
    s = (x + y) * _F2
    i = np.floor(x + s)
    j = np.floor(y + s)
    t = (i + j) * _G2
    x0 = x - (i - t)
    y0 = y - (j - t)
    i1 = (x0 > y0).astype(float)
    j1 = 1.0 - i1
    corners = (
        (x0, y0, 0.0, 0.0),
        (x0 - i1 + _G2, y0 - j1 + _G2, i1, j1),
        (x0 - 1.0 + 2.0 * _G2, y0 - 1.0 + 2.0 * _G2, 1.0, 1.0),
    )
    ii = i.astype(np.int64) & 255
    jj = j.astype(np.int64) & 255
    total = np.zeros_like(x)
    for cx, cy, di, dj in corners:
        di = np.asarray(di, dtype=np.int64)
        dj = np.asarray(dj, dtype=np.int64)
        g = grads[perm[((ii + di) & 255) + perm[(jj + dj) & 255]]]
        t0 = 0.5 - cx * cx - cy * cy
        total += np.where(t0 > 0, t0**4 * (g[..., 0] * cx + g[..., 1] * cy), 0.0)
    return 70.0 * total


def _simplex_noise(h, w, p, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    out = np.zeros((h, w))
    octaves = int(p["octaves"])
    for k in range(octaves):
        # octave 0 is the coarsest and carries unit amplitude; the finest octave's
        # band edge sits at 1 / min_wavelength
        cell = _SIMPLEX_CELLS_PER_EDGE * p["min_wavelength"] * 2 ** (octaves - 1 - k)
        amp = p["persistence"] ** k
        perm = np.tile(rng.permutation(256), 2)
        ang = rng.uniform(0, 2 * np.pi, 512)
        grads = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        off = rng.uniform(0, 256, 2)
        out += amp * _simplex2(xx / cell + off[0], yy / cell + off[1], perm, grads)
    return out


# --------------------------------------------------------------------------


def generate_scalar_texture(object_class: ObjectClass, height: int, width: int,
                            seed: RandomSeed) -> np.ndarray:
    """Real-valued texture of the requested class, in arbitrary units.

    Dead-leaves textures cover every pixel; procedural textures keep their
    background at exactly zero. Same ``(class, size, seed)`` gives a
    bit-identical result.
    """
    if not isinstance(object_class, ObjectClass):
        object_class = ObjectClass(ObjectKind(object_class))
    height, width = int(height), int(width)
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ParameterError("size", f"height and width must be >= {MIN_SIZE}, "
                                     f"got {height}x{width}")
    rng = derive_stream(RandomSeed.coerce(seed), "texture:" + object_class.kind.value, 0).generator()
    p = object_class.params
    kind = object_class.kind
    if kind is ObjectKind.DEAD_LEAVES:
        return _dead_leaves(height, width, p, rng)
    if kind is ObjectKind.PROCEDURAL:
        return _procedural(height, width, p, rng)
    if kind is ObjectKind.WHITE_NOISE:
        return rng.standard_normal((height, width))
    if kind is ObjectKind.BLURRED_WHITE_NOISE:
        wn = rng.standard_normal((height, width))
        return ndimage.gaussian_filter(wn, p["sigma"], truncate=p["truncate"], mode="reflect")
    return _simplex_noise(height, width, p, rng)


def to_complex_object(texture, amp_range=(0.7, 1.0), seed: RandomSeed | int = 0,
                      object_class: ObjectClass | None = None) -> SyntheticObject:
    """Map a texture to a complex object with correlated amplitude and phase.

    The texture is rescaled affinely so its minimum goes to phase ``-pi`` and
    amplitude ``amp_range[0]`` and its maximum to ``+pi`` and ``amp_range[1]``.
    A constant texture gives phase 0 and the mid-range amplitude.
    """
    low, high = map(float, amp_range)
    if not (0.0 <= low < high <= 1.0):
        raise ValueError(f"amp_range must satisfy 0 <= low < high <= 1, got {amp_range}")
    t = as_real_image(texture, "texture")
    tmin, tmax = t.min(), t.max()
    if tmax > tmin:
        u = (t - tmin) / (tmax - tmin)
        u = np.clip(u, 0.0, 1.0)
        phase = np.pi * (2.0 * u - 1.0)
        amp = low + (high - low) * u
    else:
        phase = np.zeros_like(t)
        amp = np.full_like(t, 0.5 * (low + high))
    obj_cls = object_class or ObjectClass(ObjectKind.WHITE_NOISE)
    return SyntheticObject(amp * np.exp(1j * phase), obj_cls, RandomSeed.coerce(seed))


def generate_object(object_class: ObjectClass, height: int, width: int,
                    seed: RandomSeed | int, amp_range=(0.7, 1.0)) -> SyntheticObject:
    """Texture generation followed by the amplitude/phase mapping."""
    seed = RandomSeed.coerce(seed)
    if not isinstance(object_class, ObjectClass):
        object_class = ObjectClass(ObjectKind(object_class))
    tex = generate_scalar_texture(object_class, height, width, seed)
    return to_complex_object(tex, amp_range, seed, object_class)
