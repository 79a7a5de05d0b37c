import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crcnn.checkpoint import MAGIC, Checkpoint, CheckpointError, model_checkpoint, restore
from crcnn.layers import SGD
from crcnn.model import ConstrainedRCNN, ModelConfig

from test_model import TINY


@pytest.fixture
def model():
    return ConstrainedRCNN(ModelConfig(**TINY))


def test_round_trip_is_bit_exact(model, tmp_path):
    rng = np.random.default_rng(0)
    for p in model.parameters():
        p.data = rng.standard_normal(p.data.shape).astype(np.float32)
    opt = SGD(model.parameters())
    for v in opt.velocity:
        v += 0.5
    ck = model_checkpoint(model, step=17, optimizer=opt, meta={"note": "x"})
    ck.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt", model.config.digest())
    assert back.step == 17 and back.meta == {"note": "x"}
    other = ConstrainedRCNN(ModelConfig(**TINY))
    opt2 = SGD(other.parameters())
    restore(other, back, opt2)
    for (na, a), (nb, b) in zip(model.named_parameters(), other.named_parameters()):
        assert na == nb and a.data.tobytes() == b.data.tobytes() and a.data.dtype == b.data.dtype
    for va, vb in zip(opt.velocity, opt2.velocity):
        assert va.tobytes() == vb.tobytes()
    assert back.to_bytes() == ck.to_bytes()


def test_manifest_follows_canonical_order(model):
    blob = model_checkpoint(model).to_bytes()
    assert blob[:4] == MAGIC and blob[4] == 1
    names = list(Checkpoint.from_bytes(blob).tensors)
    assert names == [n for n, _ in model.named_parameters()]


@settings(max_examples=30, deadline=None)
@given(cut=st.integers(min_value=0, max_value=10 ** 9))
def test_truncation_rejected_with_offset(cut):
    m = ConstrainedRCNN(ModelConfig(**TINY))
    blob = model_checkpoint(m).to_bytes()
    n = cut % len(blob)
    with pytest.raises(CheckpointError, match="offset"):
        Checkpoint.from_bytes(blob[:n])


def test_corruptions(model, tmp_path):
    blob = model_checkpoint(model).to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(blob[:4] + bytes([9]) + blob[5:])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(blob + b"\0")
    (hlen,) = struct.unpack("<I", blob[37:41])
    bad = bytearray(blob)
    bad[41] = ord("#")
    with pytest.raises(CheckpointError, match="malformed"):
        Checkpoint.from_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="cannot read"):
        Checkpoint.load(tmp_path / "missing.ckpt")


def test_digest_mismatch_refused_unless_forced(model):
    ck = model_checkpoint(model)
    other = ConstrainedRCNN(ModelConfig(**{**TINY, "skip_structure": False}))
    with pytest.raises(CheckpointError, match="digest"):
        Checkpoint.from_bytes(ck.to_bytes(), other.config.digest())
    with pytest.raises(CheckpointError, match="different model config"):
        restore(other, ck)
    restore(other, Checkpoint.from_bytes(ck.to_bytes(), other.config.digest(), force=True), force=True)
    assert other.stem.weight.data.tobytes() == model.stem.weight.data.tobytes()


def test_shape_mismatch_is_named(model):
    ck = model_checkpoint(model)
    bigger = ConstrainedRCNN(ModelConfig(**{**TINY, "stem_width": 6}))
    with pytest.raises(CheckpointError, match="stem.weight"):
        restore(bigger, ck, force=True)


def test_f64_parameters_survive(model):
    m64 = model.astype(np.float64)
    back = Checkpoint.from_bytes(model_checkpoint(m64).to_bytes())
    assert all(a.dtype == np.float64 for a in back.tensors.values())
