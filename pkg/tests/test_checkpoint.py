import struct

import numpy as np
import pytest
import torch

from ddgcn.checkpoint import MAGIC, decode, encode, load_checkpoint, save_checkpoint
from ddgcn.exceptions import DimensionError, ParseError
from ddgcn.model import DDGCN, ModelConfig
from ddgcn.selftest import TOY_CONFIG
from ddgcn.training import Adam

D = torch.float64


def _model(seed=0):
    model = DDGCN(ModelConfig(**{**TOY_CONFIG.to_dict(), "seed": seed}))
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.01 * torch.randn(p.shape, generator=torch.Generator().manual_seed(seed), dtype=D))
    return model


def test_encode_decode_round_trip():
    recs = {"a": np.arange(6.0).reshape(2, 3), "scalar": np.array(np.pi), "empty": np.zeros((0, 4))}
    version, doc, back = decode(encode({"k": [1, "x"]}, recs))
    assert version == 1 and doc == {"k": [1, "x"]}
    for name, arr in recs.items():
        assert back[name].shape == arr.shape and np.array_equal(back[name], arr)


def test_layout_is_little_endian():
    blob = encode({}, {"w": np.array([1.5])})
    assert blob.startswith(MAGIC)
    assert struct.unpack_from("<I", blob, len(MAGIC))[0] == 1
    assert struct.unpack("<d", blob[-8:])[0] == 1.5


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XX" + b[2:], "magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b[:len(MAGIC)] + struct.pack("<I", 9) + b[len(MAGIC) + 4:], "version"),
])
def test_corrupt_blobs_are_rejected(mutate, message):
    blob = encode({"a": 1}, {"w": np.ones((2, 2))})
    with pytest.raises(ParseError, match=message):
        decode(mutate(blob))


def test_model_round_trip_is_bitwise(tmp_path):
    model = _model(3)
    model.train()
    x = torch.randn(2, 2, 4, 3, generator=torch.Generator().manual_seed(1), dtype=D)
    model(x)  # move the running statistics
    opt = Adam()
    params = dict(model.named_parameters())
    opt.step(params, {k: torch.ones_like(v) for k, v in params.items()}, 0.0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, opt, epoch=5)
    back, opt_back, doc = load_checkpoint(path)
    assert doc["epoch"] == 5 and back.cfg == model.cfg
    for (n, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), n
    assert opt_back.step_count == opt.step_count
    for k in opt.m:
        assert torch.equal(opt.m[k], opt_back.m[k]) and torch.equal(opt.v[k], opt_back.v[k])
    model.eval(), back.eval()
    assert torch.equal(model(x), back(x))


def test_shape_mismatch_is_reported(tmp_path):
    model = _model()
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, model)
    _, doc, recs = decode(path.read_bytes())
    name = next(iter(recs))
    recs[name] = np.zeros(recs[name].shape + (1,))
    path.write_bytes(encode(doc, recs))
    with pytest.raises(DimensionError, match=name):
        load_checkpoint(path)
