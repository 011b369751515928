"""Scan patterns and quadrant-ordered neighbour grouping.

Positions are ``(x, y)`` pairs in object pixel coordinates: ``x`` runs along
columns and ``y`` along rows.

Grouping assigns, for every reference position, one neighbour to each of the
four channels

    0: (x < 0, y > 0)   1: (x > 0, y > 0)
    2: (x < 0, y < 0)   3: (x > 0, y < 0)

with coordinates taken relative to the reference. A coordinate exactly equal
to zero counts as positive.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import RandomSeed, derive_stream

__all__ = [
    "GroupSet",
    "GroupingError",
    "ScanPattern",
    "ScanPlan",
    "check_groups",
    "group_quadrants",
    "make_scan",
    "quadrant_of",
    "regroup",
]

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
ISOTROPY_TOLERANCE = 0.05


class ScanPattern(str, enum.Enum):
    ISOTROPIC = "isotropic"
    RECTANGULAR = "rectangular"
    SPIRAL = "spiral"


class GroupingError(ValueError):
    pass


def _is_isotropic(step_x, step_y):
    return abs(step_x - step_y) / max(step_x, step_y) < ISOTROPY_TOLERANCE


@dataclass(frozen=True)
class ScanPlan:
    """Ordered scan positions, shape ``(N, 2)`` as ``(x, y)`` columns."""

    positions: np.ndarray
    pattern: ScanPattern
    step_x: float
    step_y: float
    jitter_sigma: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 2 or pos.shape[0] < 1:
            raise ValueError(f"positions must have shape (N>=1, 2), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        pattern = ScanPattern(self.pattern)
        if not (self.step_x > 0 and self.step_y > 0):
            raise ValueError("steps must be > 0")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        iso = _is_isotropic(self.step_x, self.step_y)
        if pattern is ScanPattern.ISOTROPIC and not iso:
            raise ValueError(f"isotropic plan needs step_x ~ step_y, got {self.step_x}, {self.step_y}")
        if pattern is ScanPattern.RECTANGULAR and iso:
            raise ValueError("rectangular plan needs clearly different x and y steps")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "pattern", pattern)
        object.__setattr__(self, "step_x", float(self.step_x))
        object.__setattr__(self, "step_y", float(self.step_y))
        object.__setattr__(self, "jitter_sigma", float(self.jitter_sigma))

    def __len__(self):
        return self.positions.shape[0]

    @property
    def x(self) -> np.ndarray:
        return self.positions[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.positions[:, 1]

    @property
    def mean_step(self) -> float:
        return 0.5 * (self.step_x + self.step_y)

    def shifted(self, dx: float, dy: float) -> "ScanPlan":
        return ScanPlan(self.positions + [dx, dy], self.pattern, self.step_x, self.step_y,
                        self.jitter_sigma)


def _as_pair(v):
    if np.isscalar(v):
        return float(v), float(v)
    a, b = v
    return float(a), float(b)


def make_scan(pattern, extent, step_x: float, step_y: float | None = None,
              jitter_sigma: float = 0.0, seed: RandomSeed | int = 0, *,
              origin=(0.0, 0.0), n_points: int | None = None) -> ScanPlan:
    """Build a scan plan.

    Raster patterns fill ``[0, extent_x] x [0, extent_y]`` (shifted by
    ``origin``) row by row, then add i.i.d. Gaussian jitter per axis. The
    spiral is a Fermat spiral centred in the extent whose per-point area
    equals a hexagonal lattice of spacing ``step_x``, which makes the mean
    nearest-neighbour distance close to ``step_x``; ``n_points`` overrides
    the count that fills the inscribed disk.
    """
    pattern = ScanPattern(pattern)
    ex, ey = _as_pair(extent)
    ox, oy = _as_pair(origin)
    step_y = step_x if step_y is None else step_y
    if not (step_x > 0 and step_y > 0):
        raise ValueError("steps must be > 0")
    if not (np.isfinite(ex) and np.isfinite(ey)) or ex < 0 or ey < 0:
        raise ValueError(f"degenerate extent {extent!r}")
    rng = derive_stream(RandomSeed.coerce(seed), "scan", 0).generator()

    if pattern is ScanPattern.SPIRAL:
        c = step_x * np.sqrt(np.sqrt(3.0) / (2.0 * np.pi))
        if n_points is None:
            radius = 0.5 * min(ex, ey)
            n_points = int(np.floor((radius / c) ** 2)) + 1
        if n_points < 1:
            raise ValueError("spiral needs at least one point")
        n = np.arange(n_points)
        r = c * np.sqrt(n)
        theta = n * GOLDEN_ANGLE
        pos = np.stack([ox + 0.5 * ex + r * np.cos(theta),
                        oy + 0.5 * ey + r * np.sin(theta)], axis=1)
    else:
        nx = int(np.floor(ex / step_x + 1e-9)) + 1
        ny = int(np.floor(ey / step_y + 1e-9)) + 1
        xs = ox + step_x * np.arange(nx)
        ys = oy + step_y * np.arange(ny)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        pos = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if jitter_sigma > 0:
        pos = pos + rng.normal(0.0, jitter_sigma, pos.shape)
    return ScanPlan(pos, pattern, step_x, step_y, jitter_sigma)


# --------------------------------------------------------------------------
# grouping


def quadrant_of(dx, dy):
    """Channel index for offsets relative to the reference (zero is positive)."""
    dx = np.asarray(dx)
    dy = np.asarray(dy)
    right = dx >= 0
    up = dy >= 0
    return np.where(up, np.where(right, 1, 0), np.where(right, 3, 2))


@dataclass(frozen=True)
class GroupSet:
    """Quadrant-ordered groups over a scan plan.

    ``channels[g, c]`` is the plan index filling channel ``c`` of group ``g``.
    ``fallback[g, c]`` marks members that were taken from another quadrant
    because theirs had no candidate left; ``degraded`` flags those groups.
    References without a complete group are listed in ``skipped``.
    """

    reference_indices: np.ndarray
    channels: np.ndarray
    fallback: np.ndarray
    skipped: tuple
    d_min: float
    d_max: float
    top_n: int
    rounds: int
    allow_fallback: bool = True
    seed: RandomSeed = field(default_factory=lambda: RandomSeed(0))

    @property
    def degraded(self) -> np.ndarray:
        return self.fallback.any(axis=1)

    def __len__(self):
        return self.reference_indices.shape[0]

    def equals(self, other: "GroupSet") -> bool:
        return (np.array_equal(self.reference_indices, other.reference_indices)
                and np.array_equal(self.channels, other.channels)
                and np.array_equal(self.fallback, other.fallback)
                and tuple(self.skipped) == tuple(other.skipped))


def _candidates(tree, positions, i, d_min, d_max, top_n):
    idx = np.asarray(tree.query_ball_point(positions[i], d_max), dtype=np.int64)
    idx = idx[idx != i]
    if idx.size == 0:
        return idx
    d = np.hypot(*(positions[idx] - positions[i]).T)
    keep = (d >= d_min) & (d <= d_max)
    idx, d = idx[keep], d[keep]
    order = np.lexsort((idx, d))
    return idx[order][:top_n]


def _sample_group(i, cand, quads, rng, allow_fallback):
    """One group for reference ``i``; returns (channels, fallback) or None."""
    channels = np.full(4, -1, dtype=np.int64)
    fb = np.zeros(4, dtype=bool)
    used = set()
    for c in range(4):
        pool = cand[quads == c]
        if pool.size:
            pick = int(pool[rng.integers(pool.size)])
            channels[c] = pick
            used.add(pick)
    empty = np.flatnonzero(channels < 0)
    if empty.size == 4:
        return None
    if empty.size:
        c = int(empty[rng.integers(empty.size)])
        channels[c] = i
        empty = empty[empty != c]
    if empty.size:
        if not allow_fallback:
            return None
        remaining = np.array([k for k in cand if int(k) not in used], dtype=np.int64)
        if remaining.size < empty.size:
            return None
        picks = rng.choice(remaining, size=empty.size, replace=False)
        channels[empty] = picks
        fb[empty] = True
    return channels, fb


def group_quadrants(plan: ScanPlan, d_min: float | None = None, d_max: float | None = None,
                    groups_per_reference: int = 1, top_n: int = 12,
                    seed: RandomSeed | int = 0, *, allow_fallback: bool = True) -> GroupSet:
    """Quadrant-ordered neighbour groups for every scan position.

    Candidates for reference ``r_i`` are its ``top_n`` nearest positions with
    distance in ``[d_min, d_max]`` (range search on a KD-tree). Each quadrant
    contributes one uniformly sampled candidate; ``r_i`` itself may fill one
    empty quadrant. Quadrants still empty afterwards take unused candidates
    from other quadrants (flagged in ``fallback``) when ``allow_fallback`` is
    set; otherwise, or when too few candidates remain, the reference is
    skipped for that round. Defaults for the range are ``[0.3, 1.8]`` times
    the mean step.
    """
    if len(plan) < 2:
        raise GroupingError("grouping needs at least two scan positions")
    d_min = 0.3 * plan.mean_step if d_min is None else float(d_min)
    d_max = 1.8 * plan.mean_step if d_max is None else float(d_max)
    if not 0 <= d_min < d_max:
        raise GroupingError(f"need 0 <= d_min < d_max, got {d_min}, {d_max}")
    if top_n < 4:
        raise GroupingError(f"top_n must be >= 4, got {top_n}")
    if groups_per_reference < 1:
        raise GroupingError("groups_per_reference must be >= 1")
    seed = RandomSeed.coerce(seed)

    pos = plan.positions
    tree = cKDTree(pos)
    refs, chans, fbs, skipped = [], [], [], []
    for i in range(len(plan)):
        cand = _candidates(tree, pos, i, d_min, d_max, top_n)
        off = pos[cand] - pos[i]
        quads = quadrant_of(off[:, 0], off[:, 1]) if cand.size else np.empty(0, dtype=np.int64)
        rng = derive_stream(seed, "group", i).generator()
        for _ in range(groups_per_reference):
            got = _sample_group(i, cand, quads, rng, allow_fallback)
            if got is None:
                skipped.append(i)
                continue
            refs.append(i)
            chans.append(got[0])
            fbs.append(got[1])
    return GroupSet(
        reference_indices=np.asarray(refs, dtype=np.int64),
        channels=np.asarray(chans, dtype=np.int64).reshape(-1, 4),
        fallback=np.asarray(fbs, dtype=bool).reshape(-1, 4),
        skipped=tuple(sorted(set(skipped))),
        d_min=d_min, d_max=d_max, top_n=int(top_n), rounds=int(groups_per_reference),
        allow_fallback=allow_fallback, seed=seed,
    )


def regroup(plan: ScanPlan, existing: GroupSet, seed: RandomSeed | int) -> GroupSet:
    """Resample ``existing`` with a new seed, keeping its constraints."""
    return group_quadrants(plan, existing.d_min, existing.d_max, existing.rounds,
                           existing.top_n, seed, allow_fallback=existing.allow_fallback)


def check_groups(plan: ScanPlan, groups: GroupSet) -> list[str]:
    """Exhaustively re-verify every group; returns human-readable violations."""
    problems = []
    pos = plan.positions
    for g, (ref, row, fb) in enumerate(zip(groups.reference_indices, groups.channels,
                                           groups.fallback)):
        members = [int(m) for m in row]
        if members.count(int(ref)) > 1:
            problems.append(f"group {g}: reference {ref} used more than once")
        others = [m for m in members if m != ref]
        if len(set(others)) != len(others):
            problems.append(f"group {g}: repeated member")
        for c, m in enumerate(members):
            if m == ref:
                continue
            dx, dy = pos[m] - pos[ref]
            d = float(np.hypot(dx, dy))
            if not groups.d_min <= d <= groups.d_max:
                problems.append(f"group {g} channel {c}: distance {d:.4f} outside range")
            if not fb[c] and int(quadrant_of(dx, dy)) != c:
                problems.append(f"group {g} channel {c}: offset ({dx:.3f}, {dy:.3f}) "
                                f"not in quadrant {c}")
    return problems
