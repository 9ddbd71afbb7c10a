import json

import pytest
import torch

from vlmir.checkpoint import (
    CheckpointError,
    CorruptCheckpointError,
    MissingTensorError,
    load_checkpoint,
    load_into,
    save_checkpoint,
)


def _params(seed=0):
    g = torch.Generator().manual_seed(seed)
    return {
        "a.weight": torch.randn(4, 3, generator=g),
        "a.bias": torch.randn(4, generator=g),
        "scalar": torch.randn((), generator=g),
        "empty": torch.zeros(0, 5),
    }


def test_round_trip_is_bit_exact(tmp_path):
    params = _params()
    meta = {"step": 7, "seed": 3, "config": {"x": [1, 2]}}
    save_checkpoint(params, tmp_path / "ck", meta)
    loaded, got_meta = load_checkpoint(tmp_path / "ck")
    assert got_meta == meta
    assert set(loaded) == set(params)
    for k, v in params.items():
        assert loaded[k].dtype == torch.float32 and torch.equal(loaded[k], v)


def test_layout_is_manifest_plus_blob(tmp_path):
    save_checkpoint(_params(), tmp_path / "ck")
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["manifest.json", "weights.bin"]
    entries = json.loads((tmp_path / "ck" / "manifest.json").read_text())["tensors"]
    assert all(e["dtype"] == "<f4" for e in entries.values())


def test_truncated_blob_is_corrupt(tmp_path):
    ck = save_checkpoint(_params(), tmp_path / "ck")
    blob = ck / "weights.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(ck)


def _edit_manifest(ck, fn):
    path = ck / "manifest.json"
    data = json.loads(path.read_text())
    fn(data["tensors"])
    path.write_text(json.dumps(data))


def test_overlapping_offsets_are_corrupt(tmp_path):
    ck = save_checkpoint(_params(), tmp_path / "ck")
    _edit_manifest(ck, lambda t: t["a.bias"].update(offset=t["a.weight"]["offset"]))
    with pytest.raises(CorruptCheckpointError, match="overlap"):
        load_checkpoint(ck)


def test_shape_byte_mismatch_is_corrupt(tmp_path):
    ck = save_checkpoint(_params(), tmp_path / "ck")
    _edit_manifest(ck, lambda t: t["a.weight"].update(shape=[5, 3]))
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(ck)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_load_into_rejects_unknown_and_missing_names(tmp_path):
    torch.manual_seed(0)
    lin = torch.nn.Linear(3, 4)
    tensors = {"weight": lin.weight.detach(), "bias": lin.bias.detach(), "extra": torch.ones(1)}
    with pytest.raises(MissingTensorError, match="extra"):
        load_into(lin, tensors)
    with pytest.raises(MissingTensorError, match="bias"):
        load_into(lin, {"weight": lin.weight.detach()})
    with pytest.raises(MissingTensorError):
        load_into(lin, {"weight": torch.zeros(3, 4), "bias": torch.zeros(4)})


def test_load_into_restores_module(tmp_path):
    torch.manual_seed(0)
    src, dst = torch.nn.Linear(3, 4), torch.nn.Linear(3, 4)
    save_checkpoint(dict(src.state_dict()), tmp_path / "ck")
    load_into(dst, load_checkpoint(tmp_path / "ck")[0])
    for k, v in src.state_dict().items():
        assert torch.equal(dst.state_dict()[k], v)
