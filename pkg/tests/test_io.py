import json

import numpy as np
import pytest

from pyramidreg.autodiff import ParamStore
from pyramidreg.grid import Grid3D, LabelMap, LandmarkSet
from pyramidreg.harness import io
from pyramidreg.net import init_params


def files_equal(a, b):
    return a.read_bytes() == b.read_bytes()


def test_bundle_roundtrip_bitwise(tmp_path, rng):
    g = Grid3D(rng.standard_normal((2, 3, 4, 5)).astype(np.float32), spacing=(1.5, 1, 2))
    h1 = io.save_bundle(tmp_path / "a", g)
    b = io.load_bundle(h1)
    assert np.array_equal(b.data, g.data) and b.spacing == g.spacing
    h2 = io.save_bundle(tmp_path / "b", b.grid())
    assert files_equal(h1.with_suffix(".raw"), h2.with_suffix(".raw"))
    ha, hb = json.loads(h1.read_text()), json.loads(h2.read_text())
    ha.pop("raw"), hb.pop("raw")
    assert ha == hb


def test_bundle_header_fields(tmp_path):
    h = io.save_bundle(tmp_path / "v.json", Grid3D(np.zeros((1, 2, 2, 2), np.float32)))
    hdr = json.loads(h.read_text())
    assert hdr["dtype"] == "f32le" and hdr["channels"] == 1 and hdr["dims"] == [2, 2, 2]
    assert hdr["byte_length"] == 32 == h.with_suffix(".raw").stat().st_size


def test_bundle_raw_is_little_endian_float32(tmp_path):
    h = io.save_bundle(tmp_path / "v", Grid3D(np.array([1.0, -2.5]).reshape(1, 1, 1, 2)))
    assert np.array_equal(np.fromfile(h.with_suffix(".raw"), "<f4"), [1.0, -2.5])


def test_bundle_size_mismatch_rejected(tmp_path):
    h = io.save_bundle(tmp_path / "v", Grid3D(np.zeros((1, 2, 2, 2))))
    raw = h.with_suffix(".raw")
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(ValueError):
        io.load_bundle(h)


def test_bundle_bad_dtype_tag(tmp_path):
    h = io.save_bundle(tmp_path / "v", Grid3D(np.zeros((1, 2, 2, 2))))
    hdr = json.loads(h.read_text())
    hdr["dtype"] = "f64be"
    h.write_text(json.dumps(hdr))
    with pytest.raises(ValueError):
        io.load_bundle(h)


def test_label_bundle_with_landmarks(tmp_path):
    lm = LabelMap(np.array([[[0, 1], [2, 0]]]), labels=(1, 2, 3), spacing=(2, 2, 2))
    pts = LandmarkSet([[0, 0.5, 1]], spacing=(2, 2, 2))
    io.save_landmarks(tmp_path / "pts.json", pts)
    h = io.save_bundle(tmp_path / "labels", lm, landmarks="pts.json")
    b = io.load_bundle(h)
    back = b.labelmap()
    assert np.array_equal(back.data, lm.data) and back.labels == (0, 1, 2, 3)
    assert np.array_equal(b.landmarks().points, pts.points)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    p = init_params(seed=2)
    extra = {"adam.m/x": np.arange(3, dtype=np.float32)}
    m1 = io.save_checkpoint(tmp_path / "c1", p, extra, {"epoch": 3})
    ck = io.load_checkpoint(m1)
    assert ck.params.paths() == p.paths() and ck.meta == {"epoch": 3}
    assert all(np.array_equal(ck.params[k].value, p[k].value) for k in p.paths())
    m2 = io.save_checkpoint(tmp_path / "c2", ck.params, ck.extra, ck.meta)
    assert files_equal(m1.with_suffix(".bin"), m2.with_suffix(".bin"))
    a, b = json.loads(m1.read_text()), json.loads(m2.read_text())
    a.pop("blob"), b.pop("blob")
    assert a == b


def test_checkpoint_manifest_layout(tmp_path):
    p = ParamStore()
    p.add("a", np.ones((2, 3), np.float32))
    p.add("b", np.zeros(4, np.float32))
    man = json.loads(io.save_checkpoint(tmp_path / "c", p).read_text())
    assert man["count"] == 10
    assert [(e["path"], e["shape"], e["offset"]) for e in man["entries"]] == [("a", [2, 3], 0), ("b", [4], 6)]


def test_checkpoint_truncated_blob(tmp_path):
    p = ParamStore()
    p.add("a", np.ones(4, np.float32))
    m = io.save_checkpoint(tmp_path / "c", p)
    blob = m.with_suffix(".bin")
    blob.write_bytes(blob.read_bytes()[:8])
    with pytest.raises(ValueError):
        io.load_checkpoint(m)
