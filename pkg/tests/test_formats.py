import struct

import numpy as np
import pytest

from gfocc.core import GaussianSet, GridSpec, SemanticGrid
from gfocc.formats import (
    FormatError, decode_gocc, decode_gvox, dump_json, encode_gocc, encode_gvox,
    gaussians_from_json, gaussians_to_json, read_gaussians, read_gvox, write_gaussians,
    write_gvox,
)
from gfocc.splatting import labels_from

SPEC = GridSpec((-1.5, 2.0, -0.5), 0.25, (3, 4, 2))


def random_set(rng, P=5, C=4, D=3):
    q = rng.normal(size=(P, 4))
    return GaussianSet(rng.normal(size=(P, 3)), rng.uniform(0.1, 2, (P, 3)),
                       q / np.linalg.norm(q, axis=1, keepdims=True), rng.uniform(size=P),
                       rng.normal(size=(P, C)), rng.normal(size=(P, D)))


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


class TestGvox:
    def test_labels_round_trip_and_layout(self, rng):
        labels = rng.integers(0, 17, SPEC.dims)
        buf = encode_gvox(SemanticGrid(SPEC, labels=labels))
        assert buf[:4] == b"GVOX" and struct.unpack_from("<I", buf, 4)[0] == 1
        body = np.frombuffer(buf[-2 * labels.size:], "<u2")
        # x varies fastest
        assert body[1] == labels[1, 0, 0] and body[3] == labels[0, 1, 0]
        back = decode_gvox(buf)
        np.testing.assert_array_equal(back.labels, labels)
        assert back.spec == SPEC
        assert encode_gvox(back, kind=0) == buf

    def test_occupancy_and_semantic_round_trip(self, rng, tmp_path):
        occ = rng.uniform(size=SPEC.dims)
        cp = rng.dirichlet(np.ones(5), size=SPEC.dims)
        for kind, grid in ((1, SemanticGrid(SPEC, occupancy=occ)),
                           (2, SemanticGrid(SPEC, occupancy=occ, class_probs=cp))):
            write_gvox(tmp_path / "g.gvox", grid, kind=kind)
            back = read_gvox(tmp_path / "g.gvox")
            np.testing.assert_array_equal(back.occupancy, f32(occ))
            if kind == 2:
                np.testing.assert_array_equal(back.class_probs, f32(cp))
                np.testing.assert_array_equal(back.labels, labels_from(f32(occ), f32(cp), 0.5))
            else:
                np.testing.assert_array_equal(back.labels, f32(occ) >= 0.5)
            first = (tmp_path / "g.gvox").read_bytes()
            write_gvox(tmp_path / "h.gvox", back, kind=kind)
            assert (tmp_path / "h.gvox").read_bytes() == first

    def test_rejects_bad_input(self, rng):
        buf = encode_gvox(SemanticGrid(SPEC, labels=np.zeros(SPEC.dims, dtype=int)))
        with pytest.raises(FormatError, match="magic"):
            decode_gvox(b"XVOX" + buf[4:])
        with pytest.raises(FormatError, match="version"):
            decode_gvox(buf[:4] + struct.pack("<I", 9) + buf[8:])
        with pytest.raises(FormatError):
            decode_gvox(buf[:-2])
        with pytest.raises(FormatError):
            decode_gvox(buf[:10])
        with pytest.raises(FormatError):
            encode_gvox(SemanticGrid(SPEC, labels=np.zeros(SPEC.dims, dtype=int)), kind=1)


class TestGaussianFiles:
    def test_gocc_round_trip(self, rng, tmp_path):
        gs = random_set(rng)
        buf = encode_gocc(gs)
        back = decode_gocc(buf)
        for k in ("means", "scales", "opacities", "logits", "queries"):
            np.testing.assert_array_equal(getattr(back, k), f32(getattr(gs, k)))
        assert encode_gocc(back) == buf
        write_gaussians(tmp_path / "a.gocc", gs)
        assert (tmp_path / "a.gocc").read_bytes() == buf
        with pytest.raises(FormatError):
            decode_gocc(buf[:-4])
        with pytest.raises(FormatError):
            decode_gocc(b"GOCX" + buf[4:])

    def test_json_round_trip_is_exact(self, rng, tmp_path):
        gs = random_set(rng)
        back = gaussians_from_json(gaussians_to_json(gs))
        for k in ("means", "scales", "rotations", "opacities", "logits", "queries"):
            np.testing.assert_array_equal(getattr(back, k), getattr(gs, k))
        write_gaussians(tmp_path / "a.json", gs)
        write_gaussians(tmp_path / "b.json", read_gaussians(tmp_path / "a.json"))
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_json_validation(self, rng):
        doc = gaussians_to_json(random_set(rng))
        with pytest.raises(FormatError):
            gaussians_from_json({**doc, "version": 2})
        with pytest.raises(FormatError):
            gaussians_from_json({**doc, "queries": doc["queries"][:-1]})

    def test_canonical_json(self):
        assert dump_json({"b": 1, "a": [1.5]}) == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
