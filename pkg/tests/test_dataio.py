import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tassn import dataio, synth


def test_array_round_trip(tmp_path, rng):
    a = rng.standard_normal((3, 4, 5))
    dataio.write_array(tmp_path / "a.f32", "thing", a)
    name, b = dataio.read_array(tmp_path / "a.f32")
    assert name == "thing"
    assert_allclose(b, a.astype(np.float32), rtol=0, atol=0)


def test_array_truncated(tmp_path):
    dataio.write_array(tmp_path / "a.f32", "x", np.ones(4))
    raw = (tmp_path / "a.f32").read_bytes()
    (tmp_path / "a.f32").write_bytes(raw[:-2])
    with pytest.raises(ValueError):
        dataio.read_array(tmp_path / "a.f32")


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 9, 3), dtype=np.uint8)
    dataio.write_ppm(tmp_path / "i.ppm", img)
    assert_array_equal(dataio.read_ppm(tmp_path / "i.ppm"), img)


def test_clip_round_trip(tmp_path, clip):
    dataio.save_clip(tmp_path / "c", clip)
    back = dataio.load_clip(tmp_path / "c")
    assert_array_equal(back.frames, clip.frames)
    assert_array_equal(back.silhouettes, clip.silhouettes)
    assert_allclose(back.flow_fwd, clip.flow_fwd, atol=1e-5)
    assert_allclose(back.keypoints2d, clip.keypoints2d, atol=1e-4)
    assert back.camera.as_dict() == clip.camera.as_dict()
    assert back.seed == clip.seed


def test_dataset_round_trip(tmp_path, template):
    ds = synth.generate_dataset(template, 3, 2, seed=5)
    dataio.save_dataset(tmp_path, ds)
    seed, entries = dataio.read_manifest(tmp_path)
    assert seed == 5
    assert [s for _, s in entries] == ["train"] * 3 + ["val"] * 2
    back = dataio.load_dataset(tmp_path)
    assert back.train_idx == ds.train_idx and back.val_idx == ds.val_idx
    for a, b in zip(back.clips, ds.clips):
        assert_array_equal(a.frames, b.frames)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        dataio.read_manifest(tmp_path)


def test_bad_split(tmp_path):
    (tmp_path / dataio.MANIFEST).write_text("# seed 0\nclip_0000 test\n")
    with pytest.raises(ValueError):
        dataio.read_manifest(tmp_path)
