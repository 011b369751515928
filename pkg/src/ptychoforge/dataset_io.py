"""Archive container for datasets, probes, objects and reconstructions.

An archive is an uncompressed ZIP file. ``manifest.json`` comes first and
lists every array member with its dtype, shape and CRC-32; array members
follow in a fixed order as raw little-endian bytes (C order). Entry
timestamps are pinned, so writing the same content twice yields identical
bytes.

Dataset member names::

    diffraction      (N, H, W)  f32
    xcoords, ycoords (N,)       f64
    probe            (H, W)     c64
    object_truth     (Y, X)     c128   optional
    group_refs       (G,)       i64    optional
    group_channels   (G, 4)     i64    optional
    group_fallback   (G, 4)     i64    optional
"""

from __future__ import annotations

import io
import json
import zipfile
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .core import RandomSeed
from .forward import DiffractionStack, Probe, ProbeNormalization
from .scan import GroupSet, ScanPattern, ScanPlan

__all__ = [
    "BundleError",
    "ChecksumError",
    "DatasetBundle",
    "DimensionError",
    "FORMAT_VERSION",
    "FormatVersionError",
    "SchemaError",
    "preprocess",
    "preprocess_bundle",
    "read_archive",
    "read_bundle",
    "read_image",
    "read_object",
    "read_probe",
    "read_result",
    "write_archive",
    "write_bundle",
    "write_object",
    "write_probe",
    "write_result",
]

FORMAT_VERSION = "1.0"
MANIFEST = "manifest.json"
_DATE = (1980, 1, 1, 0, 0, 0)
_INDEX_LIMIT = 2**31 - 1

DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "c64": np.dtype("<c8"),
    "c128": np.dtype("<c16"),
    "i64": np.dtype("<i8"),
}
_CODES = {v: k for k, v in DTYPES.items()}


class BundleError(Exception):
    """Base class for archive problems."""


class SchemaError(BundleError):
    pass


class FormatVersionError(BundleError):
    pass


class ChecksumError(BundleError):
    pass


class DimensionError(BundleError):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False).encode("utf-8")


def write_archive(path, kind: str, arrays: dict[str, tuple[str, np.ndarray]],
                  meta: dict[str, Any]) -> None:
    """Write named arrays plus metadata. ``arrays`` maps name -> (dtype code, array)."""
    members = []
    payloads = []
    for name, (code, arr) in arrays.items():
        dt = DTYPES[code]
        a = np.asarray(arr)
        if any(d > _INDEX_LIMIT for d in a.shape):
            raise DimensionError(f"member {name!r} has a dimension beyond the 32-bit index limit")
        a = np.ascontiguousarray(a.astype(dt, copy=False))
        raw = a.tobytes(order="C")
        members.append({"name": name, "dtype": code, "shape": list(a.shape),
                        "crc32": zlib.crc32(raw) & 0xFFFFFFFF, "nbytes": len(raw)})
        payloads.append((name, raw))
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "members": members, "meta": meta}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in [(MANIFEST, _canonical_json(manifest))] + payloads:
            info = zipfile.ZipInfo(name, date_time=_DATE)
            info.external_attr = 0o644 << 16
            info.create_system = 3
            zf.writestr(info, data)
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise BundleError(f"cannot write {path}: {exc}") from exc


def read_archive(path) -> tuple[str, dict[str, np.ndarray], dict[str, Any]]:
    """Read and verify an archive; returns ``(kind, arrays, meta)``."""
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ChecksumError(f"{path}: not a readable archive ({exc})") from exc
    except OSError as exc:
        raise BundleError(f"cannot read {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read(MANIFEST))
        except KeyError as exc:
            raise SchemaError(f"{path}: missing {MANIFEST}") from exc
        except (zipfile.BadZipFile, zlib.error, ValueError, EOFError) as exc:
            raise ChecksumError(f"{path}: corrupt manifest ({exc})") from exc
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise FormatVersionError(f"{path}: unsupported format version {version!r}")
        arrays = {}
        for m in manifest["members"]:
            try:
                raw = zf.read(m["name"])
            except KeyError as exc:
                raise SchemaError(f"{path}: member {m['name']!r} listed but absent") from exc
            except (zipfile.BadZipFile, zlib.error, EOFError) as exc:
                raise ChecksumError(f"{path}: member {m['name']!r} is corrupt ({exc})") from exc
            if zlib.crc32(raw) & 0xFFFFFFFF != m["crc32"] or len(raw) != m.get("nbytes", len(raw)):
                raise ChecksumError(f"{path}: checksum mismatch in member {m['name']!r}")
            dt = DTYPES[m["dtype"]]
            shape = tuple(m["shape"])
            if int(np.prod(shape, dtype=np.int64)) * dt.itemsize != len(raw):
                raise DimensionError(f"{path}: member {m['name']!r} size does not match shape")
            arrays[m["name"]] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    return manifest["kind"], arrays, manifest.get("meta", {})


# --------------------------------------------------------------------------
# dataset bundles


@dataclass(frozen=True)
class DatasetBundle:
    diffraction: DiffractionStack
    probe: Probe
    ground_truth_object: np.ndarray | None = None
    groups: GroupSet | None = None
    manifest: dict[str, Any] = field(default_factory=dict)


def _plan_meta(plan: ScanPlan) -> dict:
    return {"pattern": plan.pattern.value, "step_x": plan.step_x, "step_y": plan.step_y,
            "jitter_sigma": plan.jitter_sigma}


def write_bundle(bundle: DatasetBundle, path) -> None:
    """Write a dataset bundle; the probe is mandatory."""
    if bundle.probe is None:
        raise SchemaError("probe required")
    if bundle.diffraction is None:
        raise SchemaError("diffraction required")
    st = bundle.diffraction
    if st.shape != bundle.probe.field.shape:
        raise DimensionError(f"pattern shape {st.shape} does not match probe "
                             f"{bundle.probe.field.shape}")
    arrays = {
        "diffraction": ("f32", st.patterns),
        "xcoords": ("f64", st.plan.x),
        "ycoords": ("f64", st.plan.y),
        "probe": ("c64", bundle.probe.field),
    }
    if bundle.ground_truth_object is not None:
        arrays["object_truth"] = ("c128", bundle.ground_truth_object)
    meta = dict(bundle.manifest)
    meta.update({
        "crop_size": int(st.shape[0]),
        "photon_target": st.photon_target,
        "intensity_scale": st.intensity_scale,
        "counts": st.counts,
        "instrument": st.probe_label,
        "probe_label": bundle.probe.source_label,
        "probe_normalization": bundle.probe.normalization.value,
        "scan": _plan_meta(st.plan),
    })
    if bundle.groups is not None:
        g = bundle.groups
        arrays["group_refs"] = ("i64", g.reference_indices)
        arrays["group_channels"] = ("i64", g.channels)
        arrays["group_fallback"] = ("i64", g.fallback.astype(np.int64))
        meta["groups"] = {"d_min": g.d_min, "d_max": g.d_max, "top_n": g.top_n,
                          "rounds": g.rounds, "allow_fallback": g.allow_fallback,
                          "skipped": list(g.skipped), "seed": g.seed.to_dict()}
    write_archive(path, "dataset", arrays, meta)


def read_bundle(path) -> DatasetBundle:
    """Read and validate a dataset bundle written by :func:`write_bundle`."""
    kind, arrays, meta = read_archive(path)
    if kind != "dataset":
        raise SchemaError(f"{path}: expected a dataset archive, found {kind!r}")
    for name in ("diffraction", "xcoords", "ycoords", "probe"):
        if name not in arrays:
            raise SchemaError(f"{path}: {name} required")
    d = arrays["diffraction"]
    if d.ndim != 3:
        raise DimensionError(f"{path}: diffraction must be 3-D")
    crop = meta.get("crop_size")
    if crop is not None and d.shape[1:] != (crop, crop):
        raise DimensionError(f"{path}: manifest crop {crop} but patterns are "
                             f"{d.shape[1]}x{d.shape[2]}")
    if arrays["probe"].shape != d.shape[1:]:
        raise DimensionError(f"{path}: probe shape {arrays['probe'].shape} does not match "
                             f"patterns {d.shape[1:]}")
    x, y = arrays["xcoords"], arrays["ycoords"]
    if x.shape != (d.shape[0],) or y.shape != (d.shape[0],):
        raise DimensionError(f"{path}: coordinate count does not match {d.shape[0]} patterns")
    sm = meta.get("scan", {})
    try:
        plan = ScanPlan(np.stack([x, y], axis=1), ScanPattern(sm.get("pattern", "isotropic")),
                        sm.get("step_x", 1.0), sm.get("step_y", 1.0), sm.get("jitter_sigma", 0.0))
        stack = DiffractionStack(d, plan, meta.get("photon_target"), meta.get("instrument", ""),
                                 meta.get("intensity_scale", 1.0), meta.get("counts", "raw"))
        probe = Probe(arrays["probe"], meta.get("probe_label", ""),
                      ProbeNormalization(meta.get("probe_normalization", "raw")))
    except ValueError as exc:
        raise SchemaError(f"{path}: invalid content ({exc})") from exc
    groups = None
    if "group_refs" in arrays:
        gm = meta.get("groups", {})
        ch = arrays["group_channels"]
        refs = arrays["group_refs"]
        if ch.ndim != 2 or ch.shape[1] != 4 or ch.shape[0] != refs.shape[0]:
            raise DimensionError(f"{path}: group arrays are inconsistent")
        if ch.size and (ch.min() < 0 or ch.max() >= d.shape[0]):
            raise DimensionError(f"{path}: group member index out of range")
        fb = arrays.get("group_fallback", np.zeros_like(ch)).astype(bool)
        groups = GroupSet(refs, ch, fb, tuple(gm.get("skipped", ())), gm.get("d_min", 0.0),
                          gm.get("d_max", 0.0), gm.get("top_n", 12), gm.get("rounds", 1),
                          gm.get("allow_fallback", True),
                          RandomSeed.coerce(gm.get("seed", {"seed": 0})))
    return DatasetBundle(stack, probe, arrays.get("object_truth"), groups, meta)


# --------------------------------------------------------------------------
# single objects, probes and reconstruction results


def write_object(path, obj, meta: dict | None = None) -> None:
    """Store a complex object (``SyntheticObject`` or plain array) as c128."""
    field_ = getattr(obj, "field", obj)
    m = dict(meta or {})
    if hasattr(obj, "object_class"):
        m.setdefault("object_class", obj.object_class.to_dict())
        m.setdefault("seed", obj.seed.to_dict())
    write_archive(path, "object", {"object": ("c128", field_)}, m)


def read_object(path) -> tuple[np.ndarray, dict]:
    kind, arrays, meta = read_archive(path)
    if kind != "object" or "object" not in arrays:
        raise SchemaError(f"{path}: expected an object archive, found {kind!r}")
    if arrays["object"].ndim != 2:
        raise DimensionError(f"{path}: object must be 2-D")
    return arrays["object"], meta


def write_probe(path, probe: Probe) -> None:
    write_archive(path, "probe", {"probe": ("c128", probe.field)},
                  {"source_label": probe.source_label,
                   "normalization": probe.normalization.value})


def read_probe(path) -> Probe:
    kind, arrays, meta = read_archive(path)
    if kind == "dataset":
        return read_bundle(path).probe
    if kind != "probe" or "probe" not in arrays:
        raise SchemaError(f"{path}: expected a probe archive, found {kind!r}")
    try:
        return Probe(arrays["probe"], meta.get("source_label", ""),
                     ProbeNormalization(meta.get("normalization", "raw")))
    except ValueError as exc:
        raise DimensionError(f"{path}: {exc}") from exc


def write_result(path, result, meta: dict | None = None) -> None:
    write_archive(path, "recon", {
        "object_estimate": ("c128", result.object_estimate),
        "probe_estimate": ("c128", result.probe_estimate),
        "error_history": ("f64", result.error_history),
        "illuminated_mask": ("f64", result.illuminated_mask),
    }, dict(meta or {}))


def read_result(path):
    from .recon import ReconResult

    kind, arrays, meta = read_archive(path)
    if kind != "recon":
        raise SchemaError(f"{path}: expected a reconstruction archive, found {kind!r}")
    try:
        res = ReconResult(arrays["object_estimate"], arrays["probe_estimate"],
                          arrays["error_history"], arrays["illuminated_mask"])
    except KeyError as exc:
        raise SchemaError(f"{path}: member {exc} required") from exc
    if res.illuminated_mask.shape != res.object_estimate.shape:
        raise DimensionError(f"{path}: illumination map does not match the object")
    return res, meta


def read_image(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Complex image from any archive kind, plus its illumination map if known.

    Objects give their field, reconstructions their object estimate and
    datasets their ground-truth object.
    """
    kind, arrays, _ = read_archive(path)
    if kind == "object":
        return arrays["object"], None
    if kind == "recon":
        return arrays["object_estimate"], arrays.get("illuminated_mask")
    if kind == "dataset":
        if "object_truth" not in arrays:
            raise SchemaError(f"{path}: dataset has no object_truth member")
        return arrays["object_truth"], None
    if kind == "probe":
        return arrays["probe"], None
    raise SchemaError(f"{path}: no image in archive of kind {kind!r}")


# --------------------------------------------------------------------------
# preprocessing


def preprocess(stack: DiffractionStack, saturation_threshold: float, crop: int
               ) -> tuple[DiffractionStack, np.ndarray]:
    """Flush saturated pixels and crop every pattern around its centre.

    Pixels ``>= saturation_threshold`` become 0. The crop keeps ``crop``
    pixels centred on ``(H // 2, W // 2)``, so the DC pixel of an fftshifted
    pattern stays central. Returns the new stack and the per-pattern count of
    flushed pixels.
    """
    if not saturation_threshold > 0:
        raise ValueError("saturation_threshold must be > 0")
    crop = int(crop)
    H, W = stack.shape
    if crop < 1 or crop > H or crop > W:
        raise ValueError(f"crop {crop} larger than input {H}x{W}")
    p = np.array(stack.patterns, copy=True)
    hot = p >= saturation_threshold
    flushed = hot.sum(axis=(1, 2)).astype(np.int64)
    p[hot] = 0
    r0 = H // 2 - crop // 2
    c0 = W // 2 - crop // 2
    p = p[:, r0:r0 + crop, c0:c0 + crop]
    out = DiffractionStack(p, stack.plan, stack.photon_target, stack.probe_label,
                           stack.intensity_scale, stack.counts)
    return out, flushed


def preprocess_bundle(bundle: DatasetBundle, saturation_threshold: float, crop: int
                      ) -> tuple[DatasetBundle, np.ndarray]:
    """:func:`preprocess` applied to a whole bundle.

    Cropping the far field by ``crop / H`` enlarges the real-space pixel by
    ``H / crop``, so the probe is cropped in Fourier space and scan positions
    are rescaled to the new pixel grid. The ground-truth object lives on the
    old grid and is dropped when the crop changes the size.
    """
    stack, flushed = preprocess(bundle.diffraction, saturation_threshold, crop)
    H = bundle.diffraction.shape[0]
    if crop == H:
        return replace(bundle, diffraction=stack), flushed
    k = crop / H
    spec = np.fft.fftshift(np.fft.fft2(bundle.probe.field))
    r0 = H // 2 - crop // 2
    spec = spec[r0:r0 + crop, r0:r0 + crop]
    probe = replace(bundle.probe, field=np.fft.ifft2(np.fft.ifftshift(spec)))
    p = stack.plan
    plan = ScanPlan(p.positions * k, p.pattern, p.step_x * k, p.step_y * k, p.jitter_sigma * k)
    stack = replace(stack, plan=plan)
    manifest = dict(bundle.manifest)
    manifest["pixel_scale"] = manifest.get("pixel_scale", 1.0) * H / crop
    return DatasetBundle(stack, probe, None, bundle.groups, manifest), flushed
