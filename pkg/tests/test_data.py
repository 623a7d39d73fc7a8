import numpy as np
import pytest

from mpcno.checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, save_checkpoint
from mpcno.data import (
    DataFormatError,
    SampleSet,
    export_text,
    file_sha256,
    generator_hash,
    import_text,
    load_sampleset,
    sampleset_bytes,
    save_sampleset,
)
from mpcno.operator import ModelConfig, flatten, init_model
from mpcno.panel2d import kernel_integral_dataset


@pytest.fixture(scope="module")
def small_ds():
    return kernel_integral_dataset("ModifiedDoubleLayer2D", 3, 48, seed=2, n_max=56)


def _same(a, b):
    for name in ("points", "normals", "weights", "curvature", "mask", "curve_id", "panel_start", "panel_end", "a", "u"):
        x, y = getattr(a, name), getattr(b, name)
        assert x.dtype.kind == y.dtype.kind and np.array_equal(x, y), name
    assert a.meta == b.meta


def test_binary_roundtrip_is_bitwise(small_ds, tmp_path):
    path = tmp_path / "ds.bin"
    save_sampleset(small_ds, path)
    back = load_sampleset(path)
    _same(small_ds, back)
    assert sampleset_bytes(back) == path.read_bytes()


def test_text_roundtrip_is_bitwise(small_ds, tmp_path):
    path = tmp_path / "ds.json"
    export_text(small_ds, path)
    _same(small_ds, import_text(path))


def test_generation_is_reproducible(tmp_path):
    for name in ("a.bin", "b.bin"):
        save_sampleset(kernel_integral_dataset("SingleLayer2D", 2, 32, seed=9), tmp_path / name)
    assert file_sha256(tmp_path / "a.bin") == file_sha256(tmp_path / "b.bin")


def test_generator_hash_tracks_meta():
    assert generator_hash({"a": 1, "b": 2}) == generator_hash({"b": 2, "a": 1})
    assert generator_hash({"a": 1}) != generator_hash({"a": 2})


@pytest.mark.parametrize("damage", ["magic", "blob", "header", "version"])
def test_corrupt_files_are_rejected(small_ds, tmp_path, damage):
    raw = bytearray(sampleset_bytes(small_ds))
    if damage == "magic":
        raw[0:4] = b"XXXX"
    elif damage == "blob":
        raw[-3] ^= 0xFF
    elif damage == "header":
        raw[17] = ord("!")
    else:
        raw = bytes(raw).replace(b'"version": 1', b'"version": 7')
    path = tmp_path / "bad.bin"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataFormatError):
        load_sampleset(path)


def test_missing_file_is_oserror(tmp_path):
    with pytest.raises(OSError):
        load_sampleset(tmp_path / "nope.bin")


def test_sampleset_validates_shapes(small_ds):
    with pytest.raises(ValueError):
        SampleSet(**{**_fields(small_ds), "a": small_ds.a[:, :10]})
    bad_w = small_ds.weights.copy()
    bad_w[~small_ds.mask] = 1.0
    with pytest.raises(ValueError):
        SampleSet(**{**_fields(small_ds), "weights": bad_w})


def _fields(ds):
    names = ("points", "normals", "weights", "curvature", "mask", "curve_id", "panel_start", "panel_end", "a", "u")
    return {k: getattr(ds, k) for k in names}


def test_subset_and_cloud(small_ds):
    sub = small_ds.subset([2, 0])
    assert len(sub) == 2 and np.array_equal(sub.u[0], small_ds.u[2])
    c = small_ds.cloud(1)
    assert c.n == small_ds.n_max and c.n_active == 48


def test_checkpoint_roundtrip(tmp_path):
    mp = init_model(ModelConfig(d_a=1, d_u=2, d_f=4, n_layers=2, p=3), seed=5)
    opt = {"m": np.arange(3.0), "v": np.ones(3), "step": 7, "epoch": 2, "loss_history": [0.5, 0.25]}
    digest = save_checkpoint(tmp_path / "m.ckpt", mp, optimizer=opt, extra={"note": "x"})
    back, opt2, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(flatten(back), flatten(mp))
    assert opt2["step"] == 7 and opt2["loss_history"] == [0.5, 0.25] and np.array_equal(opt2["m"], opt["m"])
    assert extra == {"note": "x"}
    assert checkpoint_bytes(back, opt2, extra) == (tmp_path / "m.ckpt").read_bytes()
    assert len(digest) == 64


def test_checkpoint_corruption(tmp_path):
    mp = init_model(ModelConfig(d_f=4, n_layers=1, p=2), seed=0)
    raw = bytearray(checkpoint_bytes(mp))
    raw[-1] ^= 1
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
