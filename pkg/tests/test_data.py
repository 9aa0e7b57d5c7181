import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from estan.data import (
    ManifestRecord,
    kfold_split,
    load_arrays,
    load_sample,
    read_gray_png,
    read_manifest,
    resize_bilinear,
    resize_nearest,
    synth_generate,
    write_gray_png,
    write_manifest,
)
from estan.errors import FormatError, ValidationError
from estan.metrics import tumor_longest_axis
from estan.tensor import SeededRng


def test_manifest_round_trip(tmp_path):
    recs = [ManifestRecord(f"r{i}", tmp_path / "img" / f"{i}.png", tmp_path / "msk" / f"{i}.png", 100 + i, 90) for i in range(3)]
    write_manifest(recs, tmp_path / "m.csv")
    back = read_manifest(tmp_path / "m.csv")
    assert back == recs
    assert "img/0.png" in (tmp_path / "m.csv").read_text()


def test_manifest_errors(tmp_path):
    (tmp_path / "dup.csv").write_text("image_id,image_path,mask_path\na,x.png,y.png\na,z.png,w.png\n")
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "dup.csv")
    (tmp_path / "cols.csv").write_text("image_id,image_path\na,x.png\n")
    with pytest.raises(FormatError) as exc:
        read_manifest(tmp_path / "cols.csv")
    assert exc.value.field == "mask_path"
    with pytest.raises(OSError, match="nope.csv"):
        read_manifest(tmp_path / "nope.csv")


def test_png_round_trip_and_mode_check(tmp_path):
    arr = (np.arange(64).reshape(8, 8) * 4).astype(np.uint8)
    write_gray_png(arr, tmp_path / "a.png")
    assert np.array_equal(read_gray_png(tmp_path / "a.png"), arr)
    from PIL import Image

    Image.new("RGB", (4, 4)).save(tmp_path / "rgb.png")
    with pytest.raises(FormatError):
        read_gray_png(tmp_path / "rgb.png")
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(OSError, match="junk.png"):
        read_gray_png(tmp_path / "junk.png")


def test_resize_identity_and_constant():
    img = SeededRng(1).uniform((7, 5))
    assert np.array_equal(resize_bilinear(img, 7, 5), img)
    assert np.allclose(resize_bilinear(np.full((9, 13), 0.3), 4, 20), 0.3)
    assert np.array_equal(resize_nearest(img, 7, 5), img)


def test_resize_bilinear_half_pixel_upscale():
    row = np.array([[0.0, 1.0]])
    # 2 -> 4 with pixel centres: samples at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
    assert np.allclose(resize_bilinear(row, 1, 4), [[0.0, 0.25, 0.75, 1.0]])


def test_resize_bilinear_downscale_by_two_averages():
    img = SeededRng(2).uniform((8, 8))
    expect = img.reshape(4, 2, 4, 2).mean(axis=(1, 3))
    assert np.allclose(resize_bilinear(img, 4, 4), expect, atol=1e-12)


def test_resize_nearest_keeps_binary_and_picks_centres():
    checker = (np.indices((8, 8)).sum(axis=0) % 2).astype(np.uint8)
    down = resize_nearest(checker, 4, 4)
    # source index floor((i + 0.5) * 2) = 2i + 1 on both axes
    assert np.array_equal(down, checker[1::2, 1::2])
    up = resize_nearest(np.array([[0, 1], [1, 0]], np.uint8), 4, 4)
    assert np.array_equal(up, np.kron([[0, 1], [1, 0]], np.ones((2, 2), np.uint8)))
    assert set(np.unique(resize_nearest(checker, 5, 11))) <= {0, 1}


def test_kfold_sizes():
    s = kfold_split(10, 5, seed=3)
    assert [len(f) for f in s.folds] == [2] * 5
    s = kfold_split(11, 5, seed=3)
    assert [len(f) for f in s.folds] == [3, 2, 2, 2, 2]
    with pytest.raises(ValidationError):
        kfold_split(3, 5)
    with pytest.raises(ValidationError):
        kfold_split(10, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(5, 200), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_kfold_partition(n, k, seed):
    if n < k:
        return
    s = kfold_split(n, k, seed)
    allidx = np.concatenate(s.folds)
    assert sorted(allidx.tolist()) == list(range(n))
    sizes = [len(f) for f in s.folds]
    assert max(sizes) - min(sizes) <= 1
    for i in range(k):
        assert sorted(np.concatenate([s.test_indices(i), s.train_indices(i)]).tolist()) == list(range(n))
    assert all(np.array_equal(a, b) for a, b in zip(s.folds, kfold_split(n, k, seed).folds))


def test_synth_is_deterministic_and_well_formed(tmp_path):
    recs_a = synth_generate(4, 64, 11, tmp_path / "a", min_axis=20)
    synth_generate(4, 64, 11, tmp_path / "b", min_axis=20)
    for r in recs_a:
        rel_img = r.image_path.relative_to(tmp_path / "a")
        rel_msk = r.mask_path.relative_to(tmp_path / "a")
        assert r.image_path.read_bytes() == (tmp_path / "b" / rel_img).read_bytes()
        assert r.mask_path.read_bytes() == (tmp_path / "b" / rel_msk).read_bytes()
    images, masks, samples = load_arrays(read_manifest(tmp_path / "a" / "manifest.csv"), 64)
    assert images.shape == masks.shape == (4, 1, 64, 64)
    assert images.dtype == np.float32 and 0 <= images.min() and images.max() <= 1
    for img, s in zip(images, samples):
        m = s.mask.astype(bool)
        assert m.any()
        assert tumor_longest_axis(s.original_mask) >= 20
        assert img[0][m].mean() < img[0][~m].mean()


def test_synth_rejects_bad_size(tmp_path):
    with pytest.raises(ValidationError):
        synth_generate(1, 60, 0, tmp_path)


def test_load_sample_resizes_and_checks(tmp_path):
    img = np.full((30, 40), 128, np.uint8)
    mask = np.zeros((30, 40), np.uint8)
    mask[10:20, 10:30] = 255
    write_gray_png(img, tmp_path / "i.png")
    write_gray_png(mask, tmp_path / "m.png")
    s = load_sample(ManifestRecord("x", tmp_path / "i.png", tmp_path / "m.png"), 16)
    assert s.image.shape == (1, 1, 16, 16) and s.mask.shape == (16, 16)
    assert np.allclose(s.image, 128 / 255)
    assert s.original_mask.shape == (30, 40) and s.original_mask.max() == 1
    write_gray_png(mask[:20], tmp_path / "m2.png")
    with pytest.raises(FormatError):
        load_sample(ManifestRecord("y", tmp_path / "i.png", tmp_path / "m2.png"), 16)
    with pytest.raises(OSError):
        load_sample(ManifestRecord("z", tmp_path / "missing.png", tmp_path / "m.png"), 16)
