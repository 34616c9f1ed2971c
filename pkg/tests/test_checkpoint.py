import struct
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resvit.checkpoint import (Checkpoint, config_fingerprint, fnv1a_64, read_checkpoint,
                               write_checkpoint)
from resvit.errors import DataError
from resvit.generator import ModelConfig


class TestFnv:
    @pytest.mark.parametrize("data,expected", [(b"", 0xCBF29CE484222325),
                                               (b"a", 0xAF63DC4C8601EC8C),
                                               (b"foobar", 0x85944171F73967E8)])
    def test_vectors(self, data, expected):
        assert fnv1a_64(data) == expected

    def test_fingerprint_tracks_architecture(self):
        assert config_fingerprint(ModelConfig()) == config_fingerprint(ModelConfig())
        assert config_fingerprint(ModelConfig()) != config_fingerprint(ModelConfig(art_blocks=8))


def _sample(rng):
    return Checkpoint(OrderedDict([("gen.w", rng.standard_normal((2, 3, 3, 3)).astype(np.float32)),
                                   ("gen.b", np.arange(3, dtype=np.float32)),
                                   ("opt.t.x", np.array([7.0], np.float32))]),
                      phase=2, fingerprint=0xDEADBEEF12345678)


class TestRoundTrip:
    def test_roundtrip(self, tmp_path, rng):
        ck = _sample(rng)
        write_checkpoint(tmp_path / "a.rvck", ck)
        back = read_checkpoint(tmp_path / "a.rvck")
        assert back.names() == ck.names()
        assert (back.phase, back.fingerprint) == (2, ck.fingerprint)
        for name in ck.names():
            np.testing.assert_array_equal(back.tensors[name], ck.tensors[name])

    def test_layout(self, tmp_path):
        ck = Checkpoint(OrderedDict([("x", np.array([1.5], np.float32))]), 1, 5)
        write_checkpoint(tmp_path / "b.rvck", ck)
        raw = (tmp_path / "b.rvck").read_bytes()
        expected = (b"RVCK" + struct.pack("<II", 1, 1) + struct.pack("<H", 1) + b"x"
                    + struct.pack("<BBI", 0, 1, 1) + struct.pack("<f", 1.5)
                    + struct.pack("<IQ", 1, 5))
        assert raw == expected

    def test_subset(self, rng):
        assert set(_sample(rng).subset("gen.")) == {"gen.w", "gen.b"}

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.tuples(st.text(min_size=1, max_size=12),
                              st.lists(st.integers(1, 4), min_size=0, max_size=3)),
                    max_size=5, unique_by=lambda t: t[0]))
    def test_arbitrary_inventories(self, tmp_path_factory, items):
        rng = np.random.default_rng(0)
        tensors = OrderedDict((n, rng.standard_normal(shape).astype(np.float32))
                              for n, shape in items)
        path = tmp_path_factory.mktemp("h") / "c.rvck"
        write_checkpoint(path, Checkpoint(tensors, 1, 42))
        back = read_checkpoint(path)
        assert back.names() == list(tensors)
        for n in tensors:
            np.testing.assert_array_equal(back.tensors[n], tensors[n])


class TestCorruption:
    @pytest.fixture
    def blob(self, tmp_path, rng):
        path = tmp_path / "c.rvck"
        write_checkpoint(path, _sample(rng))
        return path

    def test_bad_magic(self, blob):
        blob.write_bytes(b"XXXX" + blob.read_bytes()[4:])
        with pytest.raises(DataError, match="magic"):
            read_checkpoint(blob)

    @pytest.mark.parametrize("cut", [6, 20, 60, -5])
    def test_truncated(self, blob, cut):
        blob.write_bytes(blob.read_bytes()[:cut])
        with pytest.raises(DataError):
            read_checkpoint(blob)

    def test_trailing_bytes(self, blob):
        blob.write_bytes(blob.read_bytes() + b"\0")
        with pytest.raises(DataError, match="trailing"):
            read_checkpoint(blob)

    def test_missing(self, tmp_path):
        with pytest.raises(DataError):
            read_checkpoint(tmp_path / "none.rvck")
