"""Synthetic scene generator: ranges, area bounds, contrast, determinism."""

import numpy as np
import pytest

from moveseg import synthdata as sd


def test_background_range_and_shape():
    rng = np.random.default_rng(0)
    for kind in sd.BACKGROUND_KINDS:
        bg = sd.gen_background(rng, kind, size=64)
        assert bg.shape == (3, 64, 64)
        assert bg.dtype == np.float32
        assert bg.min() >= 0.1 - 1e-6 and bg.max() <= 0.9 + 1e-6


def test_background_unknown_kind():
    with pytest.raises(ValueError):
        sd.gen_background(np.random.default_rng(0), "plasma")


def test_background_is_low_frequency():
    # adjacent-pixel differences stay small for every kind
    rng = np.random.default_rng(1)
    for kind in sd.BACKGROUND_KINDS:
        bg = sd.gen_background(rng, kind, size=64)
        dy = np.abs(np.diff(bg, axis=1)).max()
        dx = np.abs(np.diff(bg, axis=2)).max()
        assert max(dy, dx) < 0.15, kind


@pytest.mark.parametrize("shape", sd.SHAPES)
def test_foreground_area_and_margin(shape):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        mask, fill = sd.gen_foreground(rng, 64, shape)
        frac = mask.mean()
        assert 0.08 <= frac <= 0.35
        ys, xs = np.nonzero(mask)
        assert ys.min() >= 2 and ys.max() <= 61
        assert xs.min() >= 2 and xs.max() <= 61
        assert fill.shape == (3, 64, 64)
        assert fill.min() >= 0 and fill.max() <= 1


def test_foreground_connected():
    # single shape => one connected component (8-connectivity flood fill)
    from collections import deque
    rng = np.random.default_rng(7)
    mask, _ = sd.gen_foreground(rng, 64)
    ys, xs = np.nonzero(mask)
    seen = np.zeros_like(mask, bool)
    q = deque([(ys[0], xs[0])])
    seen[ys[0], xs[0]] = True
    while q:
        y, x = q.popleft()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                ny, nx = y + dy, x + dx
                if 0 <= ny < 64 and 0 <= nx < 64 and mask[ny, nx] \
                        and not seen[ny, nx]:
                    seen[ny, nx] = True
                    q.append((ny, nx))
    assert seen.sum() == mask.sum()


def test_scene_contrast():
    # foreground luminance differs from surrounding background
    for i in range(20):
        s = sd.generate_sample(5, i)
        lum = s.image.mean(axis=0)
        fg = lum[s.gt_mask == 1].mean()
        bg = lum[s.gt_mask == 0].mean()
        assert abs(fg - bg) > 0.05 or \
            np.abs(lum[s.gt_mask == 1] - bg).mean() > 0.1


def test_compose_partition():
    rng = np.random.default_rng(3)
    bg = sd.gen_background(rng, "gradient")
    mask, fill = sd.gen_foreground(rng)
    s = sd.compose_scene(bg, mask, fill, sd.SceneSpec("gradient", "ellipse", 0))
    m = mask.astype(bool)
    assert np.array_equal(s.image[:, m], fill[:, m])
    assert np.array_equal(s.image[:, ~m], bg[:, ~m])


def test_sample_determinism_and_independence():
    a = sd.generate_sample(11, 3)
    b = sd.generate_sample(11, 3)
    c = sd.generate_sample(11, 4)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.gt_mask, b.gt_mask)
    assert not np.array_equal(a.image, c.image)


def test_dataset_roundtrip(tmp_path):
    man = sd.gen_dataset(6, seed=42, out_dir=tmp_path / "d")
    assert man.count == 6
    images, masks = sd.load_dataset(tmp_path / "d")
    assert images.shape == (6, 3, 64, 64)
    assert masks.shape == (6, 64, 64)
    assert set(np.unique(masks)) <= {0, 1}
    # PNG quantization error bounded by half a step
    ref = sd.generate_sample(42, 0)
    assert np.abs(images[0] - ref.image).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(masks[0], ref.gt_mask)


def test_dataset_bitwise_regeneration(tmp_path):
    sd.gen_dataset(5, seed=9, out_dir=tmp_path / "a")
    sd.gen_dataset(5, seed=9, out_dir=tmp_path / "b")
    assert sd.dataset_checksum(tmp_path / "a") == \
        sd.dataset_checksum(tmp_path / "b")
    sd.gen_dataset(5, seed=10, out_dir=tmp_path / "c")
    assert sd.dataset_checksum(tmp_path / "a") != \
        sd.dataset_checksum(tmp_path / "c")


def test_dataset_variety():
    kinds = set()
    shapes = set()
    for i in range(30):
        s = sd.generate_sample(0, i)
        kinds.add(s.spec.background)
        shapes.add(s.spec.shape)
    assert kinds == set(sd.BACKGROUND_KINDS)
    assert shapes == set(sd.SHAPES)


def test_manifest_version_check(tmp_path):
    sd.gen_dataset(2, seed=1, out_dir=tmp_path)
    text = (tmp_path / "manifest.json").read_text()
    bad = text.replace('"version": 1', '"version": 99')
    (tmp_path / "manifest.json").write_text(bad)
    with pytest.raises(ValueError):
        sd.load_manifest(tmp_path)


def test_gen_dataset_rejects_bad_count(tmp_path):
    with pytest.raises(ValueError):
        sd.gen_dataset(0, seed=0, out_dir=tmp_path)


def test_mask_threshold_on_load(tmp_path):
    # values below/above 128 map to 0/1
    from PIL import Image
    arr = np.array([[0, 127], [128, 255]], np.uint8)
    p = tmp_path / "m.png"
    Image.fromarray(arr, "L").save(p)
    assert sd.load_mask_png(p).tolist() == [[0, 0], [1, 1]]
