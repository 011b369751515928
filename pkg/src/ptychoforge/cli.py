"""Command-line interface and the declarative batch pipeline.

Exit codes: 0 success, 2 validation failure, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .core import RandomSeed, derive_stream
from .dataset_io import (BundleError, DatasetBundle, preprocess_bundle, read_archive,
                         read_bundle, read_image, read_object, read_probe, read_result,
                         write_bundle, write_object, write_probe, write_result)
from .forward import Probe, _threads, make_test_probe, simulate_dataset
from .metrics import energy_fraction_above, frc_auc_pipeline, illuminated_region, radial_psd
from .objgen import ObjectClass, ObjectKind, ParameterError, generate_object
from .recon import ReconConfig, reconstruct
from .scan import check_groups, group_quadrants, make_scan

__all__ = [
    "BenchResult",
    "PipelineSpec",
    "SpecError",
    "StageError",
    "bench_recon",
    "main",
    "run_pipeline",
]

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
EXT = ".ptz"


class SpecError(ValueError):
    """The pipeline spec or a command-line argument is invalid."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# small parsers


def parse_size(text: str) -> tuple[int, int]:
    """``"HxW"`` or ``"N"`` -> ``(H, W)``."""
    parts = str(text).lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError as exc:
        raise SpecError(f"bad size {text!r}, expected HxW") from exc
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise SpecError(f"bad size {text!r}, expected HxW")
    return vals[0], vals[1]


def parse_range(text: str) -> tuple[float, float]:
    """``"LO:HI"`` or a single value -> ``(lo, hi)``."""
    parts = str(text).split(":")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise SpecError(f"bad range {text!r}, expected LO:HI") from exc
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or vals[0] > vals[1]:
        raise SpecError(f"bad range {text!r}, expected LO:HI with LO <= HI")
    return vals[0], vals[1]


def _pair(v):
    if isinstance(v, str):
        parts = v.lower().split("x")
        return (float(parts[0]),) * 2 if len(parts) == 1 else (float(parts[0]), float(parts[1]))
    if np.isscalar(v):
        return float(v), float(v)
    return float(v[0]), float(v[1])


def parse_plan(text: str) -> dict:
    """Scan description from a JSON file or ``pattern:key=value,...``.

    Keys: ``step`` (or ``step_x``/``step_y``), ``extent`` and ``origin`` as
    ``X`` or ``XxY``, ``jitter``, ``n_points``. Example:
    ``isotropic:step=8,extent=232,origin=34``.
    """
    if Path(text).is_file():
        try:
            return json.loads(Path(text).read_text())
        except ValueError as exc:
            raise SpecError(f"plan file {text}: {exc}") from exc
    pattern, _, rest = text.partition(":")
    out: dict[str, Any] = {"pattern": pattern}
    for item in filter(None, rest.split(",")):
        key, eq, val = item.partition("=")
        if not eq:
            raise SpecError(f"bad plan item {item!r}, expected key=value")
        key = {"step": "step_x", "jitter": "jitter_sigma"}.get(key.strip(), key.strip())
        out[key] = val.strip()
    if "step_x" in out and "step_y" not in out:
        out["step_y"] = out["step_x"]
    return out


# --------------------------------------------------------------------------
# pipeline spec


def _section(d, name, required=False) -> dict:
    v = d.get(name)
    if v is None:
        if required:
            raise SpecError(f"spec: section {name!r} required")
        return {}
    if not isinstance(v, dict):
        raise SpecError(f"spec: section {name!r} must be an object")
    return v


@dataclass(frozen=True)
class PipelineSpec:
    """Declarative run description.

    ``probe`` is either ``{"file": PATH}`` or ``{"synthetic": {...}}`` with
    :func:`make_test_probe` keyword arguments. ``grouping`` and ``recon`` are
    optional stages (``None`` skips them).
    """

    seed: int
    object_class: ObjectClass
    object_size: tuple[int, int]
    amp_range: tuple[float, float]
    probe: dict
    scan: dict
    photon_range: tuple[float, float]
    noiseless: bool
    grouping: dict | None
    recon: dict | None
    metrics: dict
    threads: int | None = None
    base_dir: str = "."
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineSpec":
        if not isinstance(d, dict):
            raise SpecError("spec must be a JSON object")
        if "spec" in d and "seeds" in d:
            d = d["spec"]  # a run report replays its own spec
        try:
            seed = RandomSeed(int(d.get("seed", 0))).seed
        except (TypeError, ValueError) as exc:
            raise SpecError(f"spec: bad seed ({exc})") from exc
        o = _section(d, "object", required=True)
        try:
            oc = ObjectClass.from_dict({"kind": o.get("class", o.get("kind", "dl")),
                                        "params": o.get("params", {})})
        except (ValueError, KeyError) as exc:
            raise SpecError(f"spec.object: {exc}") from exc
        size = parse_size(o.get("size", "300x300")) if isinstance(o.get("size", ""), str) \
            else tuple(int(v) for v in o["size"])
        amp = tuple(float(v) for v in o.get("amp_range", (0.7, 1.0)))
        probe = _section(d, "probe", required=True)
        if ("file" in probe) == ("synthetic" in probe):
            raise SpecError("spec.probe: give exactly one of 'file' or 'synthetic'")
        scan = dict(_section(d, "scan", required=True))
        ph = _section(d, "photons")
        prange = tuple(float(v) for v in ph.get("range", (1e4, 1e6)))
        grouping = d.get("grouping")
        recon = d.get("recon")
        metrics = dict(_section(d, "metrics"))
        threads = d.get("threads")
        spec = cls(seed, oc, (int(size[0]), int(size[1])), (amp[0], amp[1]), dict(probe), scan,
                   (prange[0], prange[1]), bool(ph.get("noiseless", False)),
                   dict(grouping) if grouping is not None else None,
                   dict(recon) if recon is not None else None, metrics,
                   None if threads is None else int(threads), str(base_dir))
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "PipelineSpec":
        p = Path(path)
        try:
            d = json.loads(p.read_text())
        except OSError as exc:
            raise SpecError(f"cannot read spec {path}: {exc}") from exc
        except ValueError as exc:
            raise SpecError(f"spec {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d, p.parent)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "object": {"class": self.object_class.kind.value,
                       "params": self.object_class.to_dict()["params"],
                       "size": list(self.object_size), "amp_range": list(self.amp_range)},
            "probe": ({"file": str(self.probe_path().resolve())} if "file" in self.probe
                      else self.probe),
            "scan": self.scan,
            "photons": {"range": list(self.photon_range), "noiseless": self.noiseless},
            "grouping": self.grouping,
            "recon": self.recon,
            "metrics": self.metrics,
        }

    def probe_path(self) -> Path:
        p = Path(self.probe["file"])
        return p if p.is_absolute() else Path(self.base_dir) / p

    def seeds(self) -> dict[str, RandomSeed]:
        g = RandomSeed(self.seed)
        return {name: derive_stream(g, name, 0)
                for name in ("object", "scan", "simulate", "group", "recon")}

    def load_probe(self) -> Probe:
        if "file" in self.probe:
            return read_probe(self.probe_path())
        return make_test_probe(**self.probe["synthetic"])

    def build_plan(self, seed):
        s = self.scan
        try:
            step_x = float(s["step_x"] if "step_x" in s else s["step"])
            step_y = float(s.get("step_y", step_x))
            n_points = s.get("n_points")
            return make_scan(s.get("pattern", "isotropic"), _pair(s["extent"]), step_x, step_y,
                             float(s.get("jitter_sigma", s.get("jitter", 0.0))), seed,
                             origin=_pair(s.get("origin", 0.0)),
                             n_points=None if n_points is None else int(n_points))
        except KeyError as exc:
            raise SpecError(f"spec.scan: {exc} required") from exc

    def recon_config(self, seed, object_shape) -> ReconConfig:
        r = self.recon or {}
        return ReconConfig(iterations=int(r.get("iterations", 300)),
                           alpha=float(r.get("alpha", 0.9)), beta=float(r.get("beta", 0.9)),
                           update_probe=bool(r.get("update_probe", False)), seed=seed,
                           object_shape=object_shape)

    def validate(self) -> None:
        """Resolve every stage input without computing anything."""
        try:
            self.object_class.validate()
            if not 0 <= self.amp_range[0] < self.amp_range[1] <= 1:
                raise SpecError(f"spec.object.amp_range invalid: {self.amp_range}")
            if not 0 < self.photon_range[0] <= self.photon_range[1]:
                raise SpecError(f"spec.photons.range invalid: {self.photon_range}")
            if "file" in self.probe and not self.probe_path().is_file():
                raise SpecError(f"spec.probe: file {self.probe_path()} not found")
            probe = self.load_probe()
            plan = self.build_plan(self.seeds()["scan"])
            H, W = self.object_size
            half = probe.size / 2
            lo = plan.positions - half
            if (lo < 0).any() or (lo[:, 0] + probe.size + 1 > W).any() \
                    or (lo[:, 1] + probe.size + 1 > H).any():
                raise SpecError(f"spec.scan: positions leave the {H}x{W} object "
                                f"for a {probe.size}px probe")
            if self.grouping is not None:
                g = self.grouping
                if "d_min" in g and "d_max" in g and not 0 <= g["d_min"] < g["d_max"]:
                    raise SpecError("spec.grouping: need 0 <= d_min < d_max")
                if int(g.get("rounds", 1)) < 1 or int(g.get("top_n", 12)) < 4:
                    raise SpecError("spec.grouping: rounds >= 1 and top_n >= 4 required")
            if self.recon is not None:
                self.recon_config(0, None)
            if self.threads is not None and self.threads < 1:
                raise SpecError("spec.threads must be >= 1")
            bad = set(self.metrics) - {"frc", "psd", "illumination_threshold", "psd_part"}
            if bad:
                raise SpecError(f"spec.metrics: unknown keys {sorted(bad)}")
        except SpecError:
            raise
        except (ValueError, TypeError, KeyError, BundleError) as exc:
            raise SpecError(f"spec: {exc}") from exc


# --------------------------------------------------------------------------
# pipeline


def _image_part(z: np.ndarray, part: str) -> np.ndarray:
    if part == "phase":
        return np.angle(z)
    if part == "amplitude":
        return np.abs(z)
    if part == "complex":
        return z
    raise SpecError(f"unknown image part {part!r}")


def _write_psd_csv(path, psd) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frequency", "power", "counts"])
        for f, p, c in zip(psd.frequency, psd.power, psd.counts):
            w.writerow([repr(float(f)), repr(float(p)), int(c)])


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def run_pipeline(spec: PipelineSpec, out_dir, *, threads: int | None = None) -> dict:
    """Run every stage of ``spec`` and write its artifacts into ``out_dir``.

    Artifacts: ``object``, ``probe``, ``dataset`` (simulated bundle with the
    ground truth and, if configured, groups), ``recon``, ``frc.json``,
    ``psd.csv`` and ``report.json``. Everything except the report (which
    carries timings) is a pure function of the spec. Returns the report.
    """
    spec.validate()
    threads = threads if threads is not None else spec.threads
    seeds = spec.seeds()
    out = Path(out_dir)
    timings: dict[str, float] = {}
    metrics: dict[str, Any] = {}
    artifacts: dict[str, str] = {}

    def stage(name):
        return _Stage(name, timings)

    out.mkdir(parents=True, exist_ok=True)
    with stage("object"):
        H, W = spec.object_size
        obj = generate_object(spec.object_class, H, W, seeds["object"], spec.amp_range)
        write_object(out / ("object" + EXT), obj)
        artifacts["object"] = "object" + EXT
    with stage("probe"):
        probe = spec.load_probe()
        # round through the stored precision so the archived probe is the one simulated with
        probe = Probe(probe.field.astype(np.complex64).astype(np.complex128),
                      probe.source_label, probe.normalization)
        write_probe(out / ("probe" + EXT), probe)
        artifacts["probe"] = "probe" + EXT
    with stage("scan"):
        plan = spec.build_plan(seeds["scan"])
    with stage("simulate"):
        stack = simulate_dataset(obj, probe, plan, spec.photon_range, seeds["simulate"],
                                 noiseless=spec.noiseless, threads=threads)
    groups = None
    if spec.grouping is not None:
        with stage("group"):
            g = spec.grouping
            groups = group_quadrants(plan, g.get("d_min"), g.get("d_max"),
                                     int(g.get("rounds", 1)), int(g.get("top_n", 12)),
                                     seeds["group"],
                                     allow_fallback=bool(g.get("allow_fallback", True)))
            metrics["groups"] = len(groups)
            metrics["groups_skipped"] = len(groups.skipped)
    with stage("write-dataset"):
        write_bundle(DatasetBundle(stack, probe, obj.field, groups,
                                   {"object_class": spec.object_class.to_dict()}),
                     out / ("dataset" + EXT))
        artifacts["dataset"] = "dataset" + EXT
    result = None
    if spec.recon is not None:
        with stage("reconstruct"):
            bundle = read_bundle(out / ("dataset" + EXT))
            cfg = spec.recon_config(seeds["recon"], spec.object_size)
            result = reconstruct(bundle.diffraction, bundle.probe, cfg)
            write_result(out / ("recon" + EXT), result, {"config": spec.recon})
            artifacts["recon"] = "recon" + EXT
            h = result.error_history
            metrics["error_first"] = float(h[0])
            metrics["error_last"] = float(h[-1])
    if result is not None and spec.metrics.get("frc", True):
        with stage("frc"):
            sl = illuminated_region(result.illuminated_mask,
                                    float(spec.metrics.get("illumination_threshold", 0.1)))
            fr = frc_auc_pipeline(obj.field[sl], result.object_estimate[sl])
            d = fr.to_dict()
            d["region"] = [sl[0].start, sl[0].stop, sl[1].start, sl[1].stop]
            _write_json(out / "frc.json", d)
            artifacts["frc"] = "frc.json"
            metrics["frc_auc"] = fr.auc
            metrics["frc_crossing_half_bit"] = fr.crossing_half_bit
    if spec.metrics.get("psd", False):
        with stage("psd"):
            part = spec.metrics.get("psd_part", "phase")
            src = result.object_estimate if result is not None else obj.field
            psd = radial_psd(_image_part(src, part))
            _write_psd_csv(out / "psd.csv", psd)
            artifacts["psd"] = "psd.csv"
            metrics["psd_energy_above_1_13"] = energy_fraction_above(psd, 1 / 13)
    report = {
        "spec": spec.to_dict(),
        "seeds": {k: v.to_dict() for k, v in seeds.items()},
        "timings_s": timings,
        "metrics": metrics,
        "artifacts": artifacts,
        "threads": _threads(threads),
    }
    _write_json(out / "report.json", report)
    return report


class _Stage:
    def __init__(self, name, timings):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, et, exc, tb):
        self.timings[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


# --------------------------------------------------------------------------
# benchmark


@dataclass(frozen=True)
class BenchResult:
    name: str
    images: int
    iterations: int
    totals: tuple[float, ...]

    @property
    def total_mean(self) -> float:
        return float(np.mean(self.totals))

    @property
    def total_std(self) -> float:
        return float(np.std(self.totals))

    def rows(self) -> list[dict]:
        per = np.asarray(self.totals) / self.iterations
        return [{"name": self.name, "images": self.images, "iterations": self.iterations,
                 "repeats": len(self.totals), "total_s_mean": self.total_mean,
                 "total_s_std": self.total_std, "s_per_iter_mean": float(per.mean()),
                 "s_per_iter_std": float(per.std())}]


BENCH_COLUMNS = ["name", "images", "iterations", "repeats", "total_s_mean", "total_s_std",
                 "s_per_iter_mean", "s_per_iter_std"]


def bench_recon(dataset, iterations: int, repeats: int = 5, name: str | None = None,
                seed: int = 0) -> BenchResult:
    """Wall-clock the ePIE oracle ``repeats`` times on one dataset."""
    if int(iterations) < 1:
        raise SpecError("iterations must be >= 1")
    if int(repeats) < 1:
        raise SpecError("repeats must be >= 1")
    if isinstance(dataset, (str, os.PathLike)):
        name = name or Path(dataset).stem
        dataset = read_bundle(dataset)
    shape = None if dataset.ground_truth_object is None else dataset.ground_truth_object.shape
    cfg = ReconConfig(iterations=int(iterations), seed=seed, object_shape=shape)
    totals = []
    for _ in range(int(repeats)):
        t0 = time.perf_counter()
        reconstruct(dataset.diffraction, dataset.probe, cfg)
        totals.append(time.perf_counter() - t0)
    return BenchResult(name or "dataset", len(dataset.diffraction), int(iterations),
                       tuple(totals))


# --------------------------------------------------------------------------
# subcommands


def _cmd_gen_object(a):
    h, w = parse_size(a.size)
    obj = generate_object(ObjectClass(ObjectKind(a.object_class)), h, w, a.seed,
                          parse_range(a.amp_range))
    write_object(a.out, obj)
    print(f"wrote {a.out}: {a.object_class} object {h}x{w}")


def _cmd_make_probe(a):
    probe = make_test_probe(a.size, a.diameter, a.kind)
    write_probe(a.out, probe)
    print(f"wrote {a.out}: {a.kind} probe {a.size}x{a.size}")


def _cmd_simulate(a):
    field_, meta = read_object(a.object)
    probe = read_probe(a.probe)
    probe = Probe(probe.field.astype(np.complex64).astype(np.complex128), probe.source_label,
                  probe.normalization)
    p = parse_plan(a.plan)
    try:
        step_x = float(p["step_x"])
        plan = make_scan(p.get("pattern", "isotropic"), _pair(p.get("extent", 0)), step_x,
                         float(p.get("step_y", step_x)), float(p.get("jitter_sigma", 0)),
                         derive_stream(RandomSeed(a.seed), "scan", 0),
                         origin=_pair(p.get("origin", 0)),
                         n_points=int(p["n_points"]) if p.get("n_points") else None)
    except KeyError as exc:
        raise SpecError(f"plan: {exc} required") from exc
    stack = simulate_dataset(field_, probe, plan, parse_range(a.photons),
                             derive_stream(RandomSeed(a.seed), "simulate", 0),
                             noiseless=a.noiseless, threads=a.threads)
    write_bundle(DatasetBundle(stack, probe, field_, None, {"object_meta": meta}), a.out)
    print(f"wrote {a.out}: {len(stack)} patterns {stack.shape[0]}x{stack.shape[1]}")


def _cmd_group(a):
    b = read_bundle(a.inp)
    g = group_quadrants(b.diffraction.plan, a.dmin, a.dmax, a.rounds, a.top_n, a.seed,
                        allow_fallback=not a.no_fallback)
    write_bundle(DatasetBundle(b.diffraction, b.probe, b.ground_truth_object, g, b.manifest),
                 a.out)
    print(f"wrote {a.out}: {len(g)} groups, {len(g.skipped)} references skipped, "
          f"{int(g.fallback.any(axis=1).sum())} with fallback members")


def _cmd_preprocess(a):
    b = read_bundle(a.inp)
    nb, flushed = preprocess_bundle(b, a.sat, a.crop)
    write_bundle(nb, a.out)
    print(f"wrote {a.out}: crop {a.crop}, flushed {int(flushed.sum())} pixels "
          f"(max {int(flushed.max()) if flushed.size else 0} per pattern)")


def _cmd_reconstruct(a):
    b = read_bundle(a.inp)
    if a.object_shape:
        shape = parse_size(a.object_shape)
    elif b.ground_truth_object is not None:
        shape = b.ground_truth_object.shape
    else:
        shape = None
    cfg = ReconConfig(iterations=a.iters, alpha=a.alpha, beta=a.beta,
                      update_probe=not a.fix_probe, seed=a.seed, object_shape=shape)
    res = reconstruct(b.diffraction, b.probe, cfg)
    write_result(a.out, res, {"config": {"iterations": a.iters, "alpha": a.alpha,
                                         "beta": a.beta, "update_probe": not a.fix_probe,
                                         "seed": a.seed}})
    h = res.error_history
    print(f"wrote {a.out}: error {h[0]:.4g} -> {h[-1]:.4g} after {len(h)} iterations")


def _cmd_frc(a):
    truth, _ = read_image(a.truth)
    est, illum = read_image(a.est)
    if truth.shape != est.shape:
        raise SpecError(f"truth {truth.shape} and estimate {est.shape} differ in shape")
    region = None
    if illum is not None and not a.full:
        region = illuminated_region(illum, a.threshold)
        truth, est = truth[region], est[region]
    res = frc_auc_pipeline(truth, est, auc_mode=a.auc_mode)
    d = res.to_dict()
    if region is not None:
        d["region"] = [region[0].start, region[0].stop, region[1].start, region[1].stop]
    _write_json(a.out, d)
    print(f"wrote {a.out}: auc {res.auc:.4f}")


def _cmd_psd(a):
    img, _ = read_image(a.inp)
    psd = radial_psd(_image_part(img, a.part), window=a.window)
    _write_psd_csv(a.out, psd)
    print(f"wrote {a.out}: {len(psd.frequency)} rings, "
          f"{100 * energy_fraction_above(psd, 1 / 13):.2f}% of power above 1/13 cycles/px")


def _inspect_checks(path) -> list[tuple[str, bool, str]]:
    kind, arrays, meta = read_archive(path)
    checks = [("checksums", True, f"{len(arrays)} members verified")]
    if kind == "dataset":
        try:
            b = read_bundle(path)
            checks.append(("schema", True, f"{len(b.diffraction)} patterns"))
        except BundleError as exc:
            checks.append(("schema", False, str(exc)))
            return checks
        d = b.diffraction.patterns
        checks.append(("non-negative finite patterns", True, ""))
        if b.diffraction.counts == "raw" and b.diffraction.photon_target is not None:
            ok = bool(np.all(d == np.round(d)))
            checks.append(("integer photon counts", ok, ""))
        if b.groups is not None:
            bad = check_groups(b.diffraction.plan, b.groups)
            checks.append(("group constraints", not bad, "; ".join(bad[:5])))
    elif kind == "recon":
        try:
            read_result(path)
            checks.append(("schema", True, ""))
        except BundleError as exc:
            checks.append(("schema", False, str(exc)))
    elif kind in ("object", "probe"):
        z = arrays.get(kind)
        ok = z is not None and z.ndim == 2 and bool(np.all(np.isfinite(z)))
        checks.append(("finite 2-D field", ok, ""))
    return checks


def _cmd_inspect(a):
    kind, arrays, meta = read_archive(a.file)
    with __import__("zipfile").ZipFile(a.file) as zf:
        print(zf.read("manifest.json").decode())
    failed = False
    for name, ok, note in _inspect_checks(a.file):
        failed |= not ok
        print(f"[{'PASS' if ok else 'FAIL'}] {name}{': ' + note if note else ''}")
    return EXIT_VALIDATION if failed else EXIT_OK


def _cmd_run(a):
    spec = PipelineSpec.load(a.spec)
    overrides = {}
    if a.seed is not None:
        overrides["seed"] = a.seed
    if a.iters is not None:
        overrides["recon"] = dict(spec.recon or {}, iterations=a.iters)
    if overrides:
        d = spec.to_dict()
        d.update(overrides)
        spec = PipelineSpec.from_dict(d, spec.base_dir)
    out = a.out or Path(a.spec).with_suffix("")
    report = run_pipeline(spec, out, threads=a.threads)
    print(json.dumps(report["metrics"], sort_keys=True))


def _cmd_bench(a):
    res = bench_recon(a.inp, a.iters, a.repeats)
    rows = res.rows()
    fh = open(a.out, "w", newline="") if a.out else sys.stdout
    try:
        w = csv.DictWriter(fh, BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if a.out:
            fh.close()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ptychoforge",
                                 description="Synthetic ptychography data, ePIE and FRC.")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker cap (default: $PTYCHOFORGE_THREADS or 1)")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker cap (default: $PTYCHOFORGE_THREADS or 1)")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("gen-object", help="generate a synthetic complex object")
    p.add_argument("--class", dest="object_class", required=True,
                   choices=[k.value for k in ObjectKind])
    p.add_argument("--size", required=True, help="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--amp-range", default="0.7:1.0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_object)

    p = add("make-probe", help="write a synthetic test probe")
    p.add_argument("--kind", default="airy", choices=["airy", "aberrated"])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--diameter", type=float, default=26.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_probe)

    p = add("simulate", help="simulate a diffraction dataset")
    p.add_argument("--object", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--plan", required=True,
                   help="JSON file or pattern:key=value,... e.g. isotropic:step=8,extent=232")
    p.add_argument("--photons", default="1e4:1e6", help="LO:HI")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = add("group", help="attach quadrant groups to a dataset")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--dmin", type=float, default=None)
    p.add_argument("--dmax", type=float, default=None)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--top-n", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-fallback", action="store_true",
                   help="skip references whose quadrants cannot all be filled")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_group)

    p = add("preprocess", help="flush saturated pixels and crop patterns")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--sat", type=float, required=True)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_preprocess)

    p = add("reconstruct", help="run the ePIE oracle")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--fix-probe", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--object-shape", default=None, help="HxW (default: ground truth shape)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reconstruct)

    p = add("frc", help="FRC-AUC of an estimate against ground truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--auc-mode", default="nyquist", choices=["nyquist", "half"])
    p.add_argument("--threshold", type=float, default=0.1,
                   help="illumination fraction defining the evaluated region")
    p.add_argument("--full", action="store_true", help="evaluate the whole field")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_frc)

    p = add("psd", help="radial power spectral density as CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--part", default="phase", choices=["phase", "amplitude", "complex"])
    p.add_argument("--window", default=None, choices=["hann"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_psd)

    p = add("inspect", help="print an archive manifest and check invariants")
    p.add_argument("file")
    p.set_defaults(func=_cmd_inspect)

    p = add("run", help="run a JSON pipeline spec (or replay a run report)")
    p.add_argument("spec")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.set_defaults(func=_cmd_run)

    p = add("bench", help="time the ePIE oracle on a dataset")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None, help="CSV file (default: stdout)")
    p.set_defaults(func=_cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    if a.threads is not None and a.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        code = a.func(a)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.cause
        validation = isinstance(cause, (SpecError, BundleError, ParameterError))
        return EXIT_VALIDATION if validation else EXIT_RUNTIME
    except (SpecError, BundleError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - the CLI reports every runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else int(code)


if __name__ == "__main__":
    sys.exit(main())
