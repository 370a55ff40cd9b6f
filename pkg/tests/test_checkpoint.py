import struct
import zlib

import numpy as np
import pytest

from gazerep.checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from gazerep.model import Autoencoder, ModelConfig
from gazerep.train import AdamState, TrainConfig, fit
from test_train import small_windows


def trained(epochs=1):
    model = Autoencoder(ModelConfig.position().reduced(4), seed=5)
    adam = AdamState()
    fit(model, small_windows(8, 64), TrainConfig(batch_size=4, epochs=epochs), adam)
    return model, adam


def test_round_trip_is_bit_identical(tmp_path):
    model, adam = trained()
    path = save_checkpoint(tmp_path / "m.ckpt", model, adam, epoch=1, extra={"note": "x"})
    ck = load_checkpoint(path)
    assert ck.model.config == model.config and ck.epoch == 1 and ck.extra == {"note": "x"}
    a, b = model.state_dict(), ck.model.state_dict()
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k
    assert ck.adam.t == adam.t
    for k in adam.m:
        assert np.array_equal(ck.adam.m[k], adam.m[k]) and np.array_equal(ck.adam.v[k], adam.v[k])
    assert dumps(ck.model, ck.adam, 1, {"note": "x"}) == path.read_bytes()


def test_header_layout():
    model, adam = trained()
    data = dumps(model, adam)
    assert data[:4] == b"GZAE"
    assert struct.unpack("<I", data[4:8])[0] == 1


@pytest.mark.parametrize("where", [10, 200, -100, -2])
def test_flipped_byte_is_rejected(where):
    data = bytearray(dumps(*trained()))
    data[where] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        loads(bytes(data))


def test_bad_magic_and_version():
    data = dumps(*trained())
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"XXXX" + data[4:])
    body = bytearray(data[:-4])
    body[4:8] = struct.pack("<I", 99)
    forged = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with pytest.raises(CheckpointError, match="version"):
        loads(forged)
    with pytest.raises(CheckpointError):
        loads(data[:10])


def test_resume_reproduces_uninterrupted_run(tmp_path):
    windows = small_windows(16, 64)
    cfg = TrainConfig(batch_size=4, epochs=4, seed=2)
    full = fit(Autoencoder(ModelConfig.velocity().reduced(4), seed=1), windows, cfg)

    model, adam = Autoencoder(ModelConfig.velocity().reduced(4), seed=1), AdamState()
    first = fit(model, windows, TrainConfig(batch_size=4, epochs=2, seed=2), adam)
    save_checkpoint(tmp_path / "half.ckpt", model, adam, epoch=2)
    ck = load_checkpoint(tmp_path / "half.ckpt")
    rest = fit(ck.model, windows, cfg, ck.adam, start_epoch=ck.epoch)
    assert first + rest == full
