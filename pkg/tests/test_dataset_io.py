import json
import zipfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptychoforge.core import RandomSeed
from ptychoforge.dataset_io import (BundleError, ChecksumError, DatasetBundle, DimensionError,
                                    FormatVersionError, SchemaError, preprocess,
                                    preprocess_bundle, read_bundle, read_image,
                                    read_object, read_probe, read_result, write_archive,
                                    write_bundle, write_object, write_probe, write_result)
from ptychoforge.forward import DiffractionStack, Probe, make_test_probe, simulate_dataset
from ptychoforge.objgen import ObjectClass, generate_object
from ptychoforge.recon import ReconResult
from ptychoforge.scan import ScanPlan, group_quadrants, make_scan


def random_bundle(seed, n=None, size=None, truth=True, groups=True):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(5, 40))
    size = size or int(rng.choice([8, 16, 32]))
    pos = rng.uniform(0, 100, (n, 2))
    plan = ScanPlan(pos, "isotropic", 5.0, 5.0, 0.3)
    pats = rng.poisson(rng.uniform(0.5, 40), (n, size, size)).astype(np.float32)
    target = None if rng.random() < 0.3 else float(rng.uniform(1e3, 1e7))
    stack = DiffractionStack(pats, plan, target, "synthetic", float(rng.uniform(0.1, 3)), "raw")
    probe = Probe(rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size)),
                  f"p{seed}")
    obj = None
    if truth:
        obj = rng.standard_normal((40, 50)) + 1j * rng.standard_normal((40, 50))
    g = group_quadrants(plan, 1.0, 40.0, seed=seed) if groups else None
    return DatasetBundle(stack, probe, obj, g, {"seed_lineage": {"global": seed}})


def assert_bundles_equal(a, b):
    assert a.diffraction.patterns.tobytes() == b.diffraction.patterns.astype(np.float32).tobytes()
    assert a.diffraction.plan.positions.tobytes() == b.diffraction.plan.positions.tobytes()
    assert a.probe.field.astype(np.complex64).tobytes() == b.probe.field.astype(np.complex64).tobytes()
    if a.ground_truth_object is None:
        assert b.ground_truth_object is None
    else:
        assert a.ground_truth_object.tobytes() == b.ground_truth_object.tobytes()
    if a.groups is None:
        assert b.groups is None
    else:
        assert a.groups.equals(b.groups)
    assert b.diffraction.photon_target == a.diffraction.photon_target
    assert b.diffraction.intensity_scale == a.diffraction.intensity_scale


@pytest.mark.parametrize("seed", range(50))
def test_random_bundles_round_trip_bit_exact(seed, tmp_path):
    rng = np.random.default_rng(1000 + seed)
    b = random_bundle(seed, truth=bool(rng.integers(2)), groups=bool(rng.integers(2)))
    path = tmp_path / "b.ptz"
    write_bundle(b, path)
    back = read_bundle(path)
    assert_bundles_equal(b, back)
    assert back.manifest["seed_lineage"] == {"global": seed}


def test_large_stack_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pats = rng.poisson(3.0, (7000, 64, 64)).astype(np.float32)
    plan = ScanPlan(rng.uniform(0, 500, (7000, 2)), "spiral", 8.0, 8.0)
    b = DatasetBundle(DiffractionStack(pats, plan), make_test_probe(64, 26))
    write_bundle(b, tmp_path / "big.ptz")
    back = read_bundle(tmp_path / "big.ptz")
    assert np.array_equal(back.diffraction.patterns, pats)
    assert back.diffraction.plan.positions.tobytes() == plan.positions.tobytes()


def test_positions_keep_full_double_precision(tmp_path):
    b = random_bundle(3)
    pos = b.diffraction.plan.positions.copy()
    pos[0] = (np.pi, np.nextafter(1.0, 2.0))
    plan = ScanPlan(pos, "isotropic", 5.0, 5.0)
    b = DatasetBundle(DiffractionStack(b.diffraction.patterns, plan), b.probe)
    write_bundle(b, tmp_path / "p.ptz")
    got = read_bundle(tmp_path / "p.ptz").diffraction.plan.positions
    assert got[0, 0] == np.pi and got[0, 1] == np.nextafter(1.0, 2.0)


def test_writing_twice_gives_identical_bytes(tmp_path):
    b = random_bundle(7)
    write_bundle(b, tmp_path / "a.ptz")
    write_bundle(b, tmp_path / "b.ptz")
    assert (tmp_path / "a.ptz").read_bytes() == (tmp_path / "b.ptz").read_bytes()


def test_layout_manifest_first_and_stored(tmp_path):
    write_bundle(random_bundle(1), tmp_path / "a.ptz")
    with zipfile.ZipFile(tmp_path / "a.ptz") as zf:
        infos = zf.infolist()
        assert infos[0].filename == "manifest.json"
        assert all(i.compress_type == zipfile.ZIP_STORED for i in infos)
        names = [i.filename for i in infos]
        assert names[1:5] == ["diffraction", "xcoords", "ycoords", "probe"]
        man = json.loads(zf.read("manifest.json"))
    assert man["format_version"] == "1.0"
    assert {m["name"]: m["dtype"] for m in man["members"]}["diffraction"] == "f32"


def test_missing_probe_is_a_schema_error(tmp_path):
    b = random_bundle(2)
    with pytest.raises(SchemaError, match="probe required"):
        write_bundle(DatasetBundle(b.diffraction, None), tmp_path / "x.ptz")
    assert not (tmp_path / "x.ptz").exists()


@pytest.mark.parametrize("keep", [10, 100, 0.5, 0.9])
def test_truncated_file_raises_checksum_error(tmp_path, keep):
    write_bundle(random_bundle(4), tmp_path / "a.ptz")
    raw = (tmp_path / "a.ptz").read_bytes()
    cut = int(keep * len(raw)) if isinstance(keep, float) else keep
    (tmp_path / "t.ptz").write_bytes(raw[:cut])
    with pytest.raises(ChecksumError):
        read_bundle(tmp_path / "t.ptz")


def test_flipped_byte_in_payload_is_caught(tmp_path):
    write_bundle(random_bundle(4), tmp_path / "a.ptz")
    raw = bytearray((tmp_path / "a.ptz").read_bytes())
    with zipfile.ZipFile(tmp_path / "a.ptz") as zf:
        info = zf.getinfo("diffraction")
    # local header is 30 bytes plus the name
    offset = info.header_offset + 30 + len("diffraction") + 5
    raw[offset] ^= 0xFF
    (tmp_path / "c.ptz").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_bundle(tmp_path / "c.ptz")


def _rewrite_manifest(src, dst, edit):
    with zipfile.ZipFile(src) as zf:
        items = [(i, zf.read(i.filename)) for i in zf.infolist()]
    with zipfile.ZipFile(dst, "w") as out:
        for info, data in items:
            if info.filename == "manifest.json":
                man = json.loads(data)
                edit(man)
                data = json.dumps(man).encode()
            out.writestr(info, data)


def test_crop_mismatch_is_a_dimension_error(tmp_path):
    write_bundle(random_bundle(5, size=16), tmp_path / "a.ptz")
    _rewrite_manifest(tmp_path / "a.ptz", tmp_path / "m.ptz",
                      lambda m: m["meta"].update(crop_size=64))
    with pytest.raises(DimensionError):
        read_bundle(tmp_path / "m.ptz")


def test_version_mismatch(tmp_path):
    write_bundle(random_bundle(5), tmp_path / "a.ptz")
    _rewrite_manifest(tmp_path / "a.ptz", tmp_path / "v.ptz",
                      lambda m: m.update(format_version="9.9"))
    with pytest.raises(FormatVersionError):
        read_bundle(tmp_path / "v.ptz")


def test_error_classes_are_distinct():
    classes = {ChecksumError, DimensionError, FormatVersionError, SchemaError}
    assert len(classes) == 4 and all(issubclass(c, BundleError) for c in classes)


def test_unwritable_path(tmp_path):
    with pytest.raises(BundleError):
        write_bundle(random_bundle(1), tmp_path / "missing-dir" / "a.ptz")


def test_oversize_dimension_rejected(tmp_path):
    huge = np.lib.stride_tricks.as_strided(np.zeros(1), shape=(2**31,), strides=(0,))
    with pytest.raises(DimensionError):
        write_archive(tmp_path / "h.ptz", "object", {"x": ("f64", huge)}, {})


def test_null_photon_target_allowed(tmp_path):
    b = random_bundle(11)
    b = DatasetBundle(DiffractionStack(b.diffraction.patterns, b.diffraction.plan, None),
                      b.probe)
    write_bundle(b, tmp_path / "n.ptz")
    assert read_bundle(tmp_path / "n.ptz").diffraction.photon_target is None


def test_object_probe_and_result_round_trips(tmp_path):
    o = generate_object(ObjectClass("pr"), 64, 64, 2)
    write_object(tmp_path / "o.ptz", o)
    field, meta = read_object(tmp_path / "o.ptz")
    assert field.tobytes() == o.field.tobytes()
    assert meta["object_class"]["kind"] == "pr"

    p = make_test_probe(32, 13, "aberrated")
    write_probe(tmp_path / "p.ptz", p)
    assert read_probe(tmp_path / "p.ptz").field.tobytes() == p.field.tobytes()

    rng = np.random.default_rng(0)
    res = ReconResult(o.field, p.field, rng.random(7), rng.random((64, 64)))
    write_result(tmp_path / "r.ptz", res, {"iterations": 7})
    back, meta = read_result(tmp_path / "r.ptz")
    for name in ("object_estimate", "probe_estimate", "error_history", "illuminated_mask"):
        assert getattr(back, name).tobytes() == getattr(res, name).tobytes()
    assert meta == {"iterations": 7}
    img, illum = read_image(tmp_path / "r.ptz")
    assert img.tobytes() == o.field.tobytes() and illum is not None
    with pytest.raises(SchemaError):
        read_object(tmp_path / "p.ptz")


def test_round_trip_preserves_seed_in_groups(tmp_path):
    b = random_bundle(9, groups=True)
    write_bundle(b, tmp_path / "g.ptz")
    assert read_bundle(tmp_path / "g.ptz").groups.seed == RandomSeed.coerce(9)


# -- preprocess ---------------------------------------------------------------

def _stack(patterns):
    n = patterns.shape[0]
    return DiffractionStack(patterns, ScanPlan(np.zeros((n, 2)), "isotropic", 1.0, 1.0))


def test_below_threshold_only_crops():
    rng = np.random.default_rng(0)
    p = rng.uniform(0, 10, (3, 128, 128))
    out, flushed = preprocess(_stack(p), 100.0, 64)
    np.testing.assert_array_equal(out.patterns, p[:, 32:96, 32:96])
    assert flushed.tolist() == [0, 0, 0]


def test_threshold_is_inclusive():
    p = np.ones((1, 8, 8))
    p[0, 4, 4] = 50.0
    p[0, 2, 2] = 49.999
    out, flushed = preprocess(_stack(p), 50.0, 8)
    assert out.patterns[0, 4, 4] == 0 and out.patterns[0, 2, 2] == 49.999
    assert flushed.tolist() == [1]


def test_centred_impulse_stays_centred():
    p = np.zeros((1, 128, 128))
    p[0, 64, 64] = 1
    out, _ = preprocess(_stack(p), 10.0, 64)
    assert np.argwhere(out.patterns[0]).tolist() == [[32, 32]]


def test_crop_too_large_and_bad_threshold():
    s = _stack(np.ones((1, 32, 32)))
    with pytest.raises(ValueError):
        preprocess(s, 1.0, 64)
    with pytest.raises(ValueError):
        preprocess(s, 0.0, 16)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.0, 30.0), st.sampled_from([8, 16, 24, 32]))
def test_flush_counts_match_bruteforce_and_idempotent(seed, thr, crop):
    rng = np.random.default_rng(seed)
    p = rng.poisson(8.0, (4, 32, 32)).astype(float)
    out, flushed = preprocess(_stack(p), thr, crop)
    for k in range(4):
        count = 0
        for i in range(32):
            for j in range(32):
                if p[k, i, j] >= thr:
                    count += 1
        assert flushed[k] == count
    again, flushed2 = preprocess(out, thr, crop)
    np.testing.assert_array_equal(again.patterns, out.patterns)
    assert flushed2.sum() == 0


def test_preprocess_bundle_rescales_geometry():
    o = generate_object(ObjectClass("dl"), 128, 128, 1)
    probe = make_test_probe(64, 26)
    plan = make_scan("isotropic", (32, 32), 8, origin=(48, 48))
    stack = simulate_dataset(o, probe, plan, noiseless=True)
    b = DatasetBundle(stack, probe, o.field)
    same, _ = preprocess_bundle(b, 1e30, 64)
    assert same.ground_truth_object is not None
    half, _ = preprocess_bundle(b, 1e30, 32)
    assert half.diffraction.shape == (32, 32) and half.probe.field.shape == (32, 32)
    np.testing.assert_allclose(half.diffraction.plan.positions, plan.positions / 2)
    assert half.ground_truth_object is None
