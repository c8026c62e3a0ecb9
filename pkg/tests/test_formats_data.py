import hashlib
import struct

import numpy as np
import pytest

from pgla.data import load_idx_dataset, random_probe_dataset, synthetic_dataset, write_idx
from pgla.diffusion import NoisePredictor, TrainConfig, make_schedule
from pgla.errors import FormatError, InputError, MissingArtifactError
from pgla.formats import Checkpoint, GradientFile, load_predictor, save_predictor
from pgla.layout import GradientVector, LayerLayout
from pgla.rng import Rng

LAYOUT = LayerLayout.from_shapes([("layer0.weight", (4, 3)), ("layer0.bias", (3,))])


def _file(n=2, role="clean"):
    values = Rng(0).normal(n * 15).reshape(n, 15).astype(np.float32)
    values[0, 0] = np.float32(1e-45)  # subnormal survives
    return GradientFile(LAYOUT, role, values, hashlib.sha256(b"x").digest(), 123)


def test_gradient_file_roundtrip_is_bit_exact(tmp_path):
    gf = _file()
    gf.save(tmp_path / "g.pgrd")
    back = GradientFile.load(tmp_path / "g.pgrd")
    assert back.values.tobytes() == gf.values.tobytes()
    assert back.layout == gf.layout and back.role == "clean"
    assert back.digest == gf.digest and back.seed == 123
    assert back.to_bytes() == gf.to_bytes()


def test_gradient_file_header_layout():
    raw = _file(1).to_bytes()
    assert raw[:4] == b"PGRD"
    assert struct.unpack_from("<HI", raw, 4) == (1, 2)
    (name_len,) = struct.unpack_from("<H", raw, 10)
    assert raw[12:12 + name_len] == b"layer0.weight"


@pytest.mark.parametrize("cut", [3, 11, 40, -1])
def test_truncated_gradient_file_reports_offset(cut):
    raw = _file().to_bytes()
    with pytest.raises(FormatError, match="byte offset"):
        GradientFile.from_bytes(raw[:cut])


def test_bad_magic_and_role():
    raw = bytearray(_file().to_bytes())
    with pytest.raises(FormatError):
        GradientFile.from_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(FormatError):
        GradientFile(LAYOUT, "nope", np.zeros((1, 15)))


def test_missing_artifact(tmp_path):
    with pytest.raises(MissingArtifactError):
        GradientFile.load(tmp_path / "absent.pgrd")


def test_from_vectors_requires_matching_role():
    a = GradientVector(np.zeros(15), LAYOUT, "clean")
    b = GradientVector(np.zeros(15), LAYOUT, "recovered")
    with pytest.raises(FormatError):
        GradientFile.from_vectors([a, b])


def test_checkpoint_roundtrip_reloads_identical_predictor(tmp_path):
    sched = make_schedule(50, 1e-4, 0.05)
    p = NoisePredictor.create(4, sched, TrainConfig(width=16, blocks=2, time_dim=8), True, 9)
    save_predictor(p, tmp_path / "p.pgdm", bytes(32), 4)
    q, ckpt = load_predictor(tmp_path / "p.pgdm")
    assert ckpt.T == 50 and ckpt.beta_end == 0.05 and ckpt.conditional and ckpt.seed == 4
    assert np.array_equal(q.parameters_flat(), p.parameters_flat())
    x = Rng(0).normal(16)
    assert np.array_equal(q(x, 7, x), p(x, 7, x))
    assert (tmp_path / "p.pgdm").read_bytes()[:4] == b"PGDM"
    with pytest.raises(FormatError):
        Checkpoint.from_bytes((tmp_path / "p.pgdm").read_bytes()[:-2])


def test_idx_roundtrip(tmp_path):
    imgs = (np.arange(10 * 28 * 28) % 256).astype(np.uint8).reshape(10, 28, 28)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, np.arange(10) % 10)
    data = load_idx_dataset(tmp_path / "i", tmp_path / "l")
    assert data.images.shape == (10, 784) and data.images.max() <= 1 and data.images.min() >= 0
    assert data.shape == (1, 28, 28)
    assert len(load_idx_dataset(tmp_path / "i", tmp_path / "l", limit=4)) == 4


def test_idx_errors(tmp_path):
    imgs = np.zeros((3, 2, 2), dtype=np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, [0, 1])
    with pytest.raises(InputError):
        load_idx_dataset(tmp_path / "i", tmp_path / "l")
    (tmp_path / "bad").write_bytes(b"\x00\x00\x08\x01" + bytes(8))
    with pytest.raises(FormatError, match="magic"):
        load_idx_dataset(tmp_path / "bad", tmp_path / "l")
    write_idx(tmp_path / "i", tmp_path / "l", imgs, [0, 1, 2])
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="offset"):
        load_idx_dataset(tmp_path / "i", tmp_path / "l")
    write_idx(tmp_path / "i", tmp_path / "l", imgs, [0, 1, 12])
    with pytest.raises(InputError):
        load_idx_dataset(tmp_path / "i", tmp_path / "l", classes=10)


def test_synthetic_dataset_is_seeded_and_shaped():
    a = synthetic_dataset(20, (1, 8, 8), seed=3)
    b = synthetic_dataset(20, (1, 8, 8), seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert a.images.shape == (20, 64) and a.images.min() >= 0 and a.images.max() <= 1
    assert not np.array_equal(a.images, synthetic_dataset(20, (1, 8, 8), seed=4).images)


def test_random_probe_dataset():
    d = random_probe_dataset(50, (1, 4, 4), 10, Rng(0))
    assert d.source == "uniform" and len(d) == 50 and d.labels.max() < 10
