import struct

import numpy as np
import pytest
import yaml

from models import RunConfig
from task import gradcheck_instance
from utils.checkpoint import MAGIC, VERSION, load_checkpoint, save_checkpoint
from utils.errors import CheckpointError


def test_save_and_load(tmp_path) -> None:
    params, _, _ = gradcheck_instance(0)
    config = RunConfig().with_overrides({"train.lr": 0.05, "paths.output_dir": str(tmp_path)})
    path = save_checkpoint(tmp_path / "model.ckpt", params, config)

    loaded = load_checkpoint(path)
    assert loaded.config == config
    assert loaded.params.relations == params.relations
    assert loaded.params.dims == params.dims
    for name, tensor in params.tensors().items():
        np.testing.assert_array_equal(loaded.params.tensors()[name], tensor)


def test_layout(tmp_path) -> None:
    params, _, _ = gradcheck_instance(1)
    path = save_checkpoint(tmp_path / "model.ckpt", params)
    data = path.read_bytes()
    magic, version, header_len = struct.unpack_from("<8sIQ", data)
    assert (magic, version) == (MAGIC, VERSION)

    header = yaml.safe_load(data[20 : 20 + header_len])
    assert header["relations"] == ["r0", "r1"]
    assert [t["name"] for t in header["tensors"]] == list(params.tensors())
    assert header["config"] is None

    first = np.frombuffer(data, dtype="<f8", count=params.W_R[0].size, offset=20 + header_len)
    np.testing.assert_array_equal(first, params.W_R[0].ravel())
    assert load_checkpoint(path).config is None


def test_same_params_same_bytes(tmp_path) -> None:
    params, _, _ = gradcheck_instance(2)
    a = save_checkpoint(tmp_path / "a.ckpt", params, RunConfig())
    b = save_checkpoint(tmp_path / "b.ckpt", params, RunConfig())
    assert a.read_bytes() == b.read_bytes()


def test_rejects_bad_files(tmp_path) -> None:
    params, _, _ = gradcheck_instance(3)
    good = save_checkpoint(tmp_path / "model.ckpt", params).read_bytes()
    bad = tmp_path / "bad.ckpt"

    for data, reason in [
        (b"FRAG", "too short"),
        (b"NOTACKPT" + good[8:], "bad magic"),
        (good[:8] + struct.pack("<I", VERSION + 1) + good[12:], "unsupported checkpoint version"),
        (good[:-8], "truncated tensor"),
        (good + b"\0" * 8, "trailing bytes"),
    ]:
        bad.write_bytes(data)
        with pytest.raises(CheckpointError, match=reason):
            load_checkpoint(bad)
