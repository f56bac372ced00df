import struct

import numpy as np
import pytest

from routelab.checkpoint import decode_checkpoint, encode_checkpoint, file_sha256, load_checkpoint, save_checkpoint
from routelab.errors import CorruptCheckpointError
from routelab.model import ModelConfig, forward, init_params
from routelab.numerics import RngState


@pytest.fixture
def params():
    return init_params(ModelConfig(width=16, expert_hidden=16, shared_experts=1), RngState(0))


def test_round_trip_bit_exact(params, tmp_path):
    path = tmp_path / "m.ckpt"
    sha = save_checkpoint(params, path)
    assert sha == file_sha256(path)
    loaded, cfg = load_checkpoint(path)
    assert cfg == params.config
    for name, value in params.items():
        assert loaded[name].tobytes() == value.tobytes()
    toks = [1, 5, 7, 3]
    assert np.array_equal(forward(loaded, toks)[0], forward(params, toks)[0])


def test_encoding_is_deterministic(params):
    assert encode_checkpoint(params) == encode_checkpoint(init_params(params.config, RngState(0)))


def test_header_layout(params):
    blob = encode_checkpoint(params)
    assert blob[:8] == b"RTLBCKPT"
    assert struct.unpack("<I", blob[8:12])[0] == 1


@pytest.mark.parametrize("cut", [5, 40, -3])
def test_truncation_is_rejected(params, cut):
    blob = encode_checkpoint(params)
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(blob[:cut])


def test_bad_magic_version_and_trailing(params):
    blob = encode_checkpoint(params)
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(blob[:8] + struct.pack("<I", 2) + blob[12:])
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(blob + b"\0")


def test_shape_mismatch_is_rejected(params):
    blob = bytearray(encode_checkpoint(params))
    name = b"tok_emb"
    i = blob.index(name) + len(name)
    rank = struct.unpack("<I", blob[i:i + 4])[0]
    assert rank == 2
    blob[i + 4:i + 8] = struct.pack("<I", 39)
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(bytes(blob))


def test_failed_load_leaves_no_file(params, tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(encode_checkpoint(params)[:100])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)
