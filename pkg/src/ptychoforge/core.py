"""Fourier transform conventions, image validation and seeded random streams.

Images are plain 2-D numpy arrays (row-major, ``[row, col]`` = ``[y, x]``).
Complex images carry amplitude (unitless) and phase (radians); all physics
runs in double precision.

The transform convention is fixed here and used everywhere else:

* forward: unnormalized DFT, zero frequency at index ``(0, 0)``
* inverse: scaled by ``1 / (H * W)``

so that ``sum(|fft2_forward(x)|**2) == H * W * sum(|x|**2)``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RandomSeed",
    "as_complex_image",
    "as_real_image",
    "derive_stream",
    "fft2_forward",
    "fft2_inverse",
    "fftshift",
    "ifftshift",
]

_U64 = (1 << 64) - 1


def _as_image(values, dtype, name: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have at least one pixel per axis, got {arr.shape}")
    arr = arr.astype(dtype, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_complex_image(values, name: str = "image") -> np.ndarray:
    """Validate ``values`` as a finite 2-D image and return it as complex128."""
    return _as_image(values, np.complex128, name)


def as_real_image(values, name: str = "image") -> np.ndarray:
    """Validate ``values`` as a finite 2-D image and return it as float64."""
    arr = np.asarray(values)
    if np.iscomplexobj(arr):
        raise TypeError(f"{name} must be real-valued")
    return _as_image(arr, np.float64, name)


def fft2_forward(img) -> np.ndarray:
    """Unnormalized 2-D DFT over the last two axes; DC stays at ``[..., 0, 0]``."""
    return np.fft.fft2(np.asarray(img, dtype=np.complex128), axes=(-2, -1))


def fft2_inverse(img) -> np.ndarray:
    """Inverse of :func:`fft2_forward`, carrying the ``1/(H*W)`` factor."""
    return np.fft.ifft2(np.asarray(img, dtype=np.complex128), axes=(-2, -1))


def fftshift(img) -> np.ndarray:
    """Move the zero-frequency sample to pixel ``(H // 2, W // 2)``."""
    return np.fft.fftshift(img, axes=(-2, -1))


def ifftshift(img) -> np.ndarray:
    return np.fft.ifftshift(img, axes=(-2, -1))


@dataclass(frozen=True)
class RandomSeed:
    """A reproducible random stream identifier.

    Two instances with equal ``(seed, stream_index)`` always produce the same
    draws. Instances are values: derive a child with :func:`derive_stream`
    for every independent task instead of sharing one generator.
    """

    seed: int
    stream_index: int = 0

    def __post_init__(self):
        for field in ("seed", "stream_index"):
            v = getattr(self, field)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise TypeError(f"{field} must be an integer, got {type(v).__name__}")
            if not 0 <= int(v) <= _U64:
                raise ValueError(f"{field} must fit in an unsigned 64-bit integer, got {v}")
            object.__setattr__(self, field, int(v))

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        ss = np.random.SeedSequence(entropy=[self.seed & 0xFFFFFFFF, self.seed >> 32],
                                    spawn_key=(self.stream_index & 0xFFFFFFFF,
                                               self.stream_index >> 32))
        return np.random.Generator(np.random.PCG64(ss))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stream_index": self.stream_index}

    @classmethod
    def coerce(cls, value) -> "RandomSeed":
        if isinstance(value, RandomSeed):
            return value
        if isinstance(value, dict):
            return cls(value["seed"], value.get("stream_index", 0))
        return cls(int(value))


def derive_stream(seed: RandomSeed, label: str, index: int) -> RandomSeed:
    """Child stream keyed by ``(label, index)``.

    The child index is a keyed hash of the parent index, the label and the
    integer index, so derivation is order-independent and distinct keys give
    unrelated streams.
    """
    seed = RandomSeed.coerce(seed)
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", seed.stream_index))
    h.update(label.encode("utf-8"))
    h.update(b"\x00")
    h.update(struct.pack("<q", int(index)))
    return RandomSeed(seed.seed, int.from_bytes(h.digest(), "little"))
