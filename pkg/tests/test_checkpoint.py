import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from skeleton_ood.checkpoint import dumps, load_checkpoint, loads, save_checkpoint
from skeleton_ood.errors import ConsistencyError, ParseError

from helpers import tiny_checkpoint


def test_round_trip_preserves_predictions(rng, tmp_path):
    ckpt = tiny_checkpoint(rng)
    path = tmp_path / "m.skod"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    x = rng.normal(size=(2, 3, 6, 11, 1))
    assert_array_equal(back.model.predict(x)[0], ckpt.model.predict(x)[0])
    assert back.detector == ckpt.detector and back.extra == ckpt.extra
    assert dumps(back) == path.read_bytes()


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["p", "b", "s", "off"]), st.booleans(), st.integers(1, 3))
def test_round_trip_bytes(seed, ash, fusion, extra):
    ckpt = tiny_checkpoint(np.random.default_rng(seed), ash=ash, fusion=fusion, extra=extra)
    buf = dumps(ckpt)
    assert dumps(loads(buf)) == buf


def test_uncalibrated_detector_round_trips(rng):
    ckpt = tiny_checkpoint(rng)
    ckpt.detector = None
    assert loads(dumps(ckpt)).detector is None


def test_corrupt_files(rng, tmp_path):
    buf = dumps(tiny_checkpoint(rng))
    with pytest.raises(ParseError, match="magic"):
        loads(b"SKDS" + buf[4:])
    with pytest.raises(ParseError, match="version"):
        loads(buf[:4] + struct.pack("<I", 9) + buf[8:])
    with pytest.raises(ParseError, match="truncated"):
        loads(buf[:-3])
    with pytest.raises(ParseError, match="unexpected"):
        loads(buf + b"\0")
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "missing.skod")


def test_architecture_mismatch(rng):
    small = dumps(tiny_checkpoint(rng, k=3))
    other = dumps(tiny_checkpoint(rng, k=4))
    # Header from one model with parameters from another.
    head_len = struct.unpack("<I", small[8:12])[0]
    other_len = struct.unpack("<I", other[8:12])[0]
    mixed = small[: 12 + head_len] + other[12 + other_len :]
    with pytest.raises(ConsistencyError):
        loads(mixed)
