from collections import Counter

import numpy as np
import pytest

from unicl.quantizers import encode_text, image_to_patches, train_bpe
from unicl.synthdata import (
    BACKGROUND,
    COLORS,
    PoolError,
    build_dataset,
    build_pools,
    caption_alphabet,
    default_class_table,
    directory_digest,
    generate_scene,
    load_dataset,
    mask_image,
    regenerate_from_manifest,
    sample_in_context,
    save_dataset,
    scene_rng,
)

NAMES = default_class_table()


def _same_scene(a, b):
    assert np.array_equal(a.image, b.image)
    assert len(a.objects) == len(b.objects)
    for o, p in zip(a.objects, b.objects):
        assert o.class_index == p.class_index and o.bbox == p.bbox
        assert np.array_equal(o.mask, p.mask)
    assert a.captions == b.captions


def test_class_table_size():
    assert len(NAMES) >= 12
    assert len(set(NAMES)) == len(NAMES)


def test_scene_is_deterministic():
    _same_scene(generate_scene(scene_rng(5, 9), NAMES), generate_scene(scene_rng(5, 9), NAMES))


def test_scene_invariants_exhaustive():
    for i in range(500):
        s = generate_scene(scene_rng(0, i), NAMES)
        assert 1 <= len(s.objects) <= 4
        colors = [NAMES[o.class_index].split()[0] for o in s.objects]
        assert len(set(colors)) == len(colors)
        for o, (cls, box, cap) in zip(s.objects, s.captions):
            assert o.mask.any()
            ys, xs = np.nonzero(o.mask)
            h, w = o.mask.shape
            assert box.x1 * w <= xs.min() and xs.max() + 1 <= box.x2 * w
            assert box.y1 * h <= ys.min() and ys.max() + 1 <= box.y2 * h
            assert cls == o.class_index and NAMES[cls] in cap
            assert np.all(s.image[o.mask] == COLORS[colors[s.objects.index(o)]])
        covered = np.any([o.mask for o in s.objects], axis=0)
        assert np.all(s.image[~covered] == BACKGROUND)


def test_object_sizes_span_small_to_large():
    areas = [o.mask.sum() for i in range(300) for o in generate_scene(scene_rng(1, i), NAMES).objects]
    assert min(areas) < (32 / 8) ** 2
    assert max(areas) > (32 / 3) ** 2


def test_class_histogram_near_uniform():
    counts = Counter(o.class_index for i in range(10_000) for o in generate_scene(scene_rng(2, i), NAMES).objects)
    total = sum(counts.values())
    uniform = total / len(NAMES)
    assert len(counts) == len(NAMES)
    assert all(uniform / 2 <= c <= 2 * uniform for c in counts.values())


def test_patches_are_codebook_exact():
    """All images and masks together use a small set of distinct patches."""
    ds = build_dataset(0, 300, 0)
    seen = set()
    for s in ds.scenes:
        seen.update(map(bytes, image_to_patches(s.image, 4)))
        for o in s.objects:
            seen.update(map(bytes, image_to_patches(mask_image(o.mask), 4)))
    assert len(seen) <= 1 + 2 * len(COLORS) + 3


def test_bad_size_rejected():
    with pytest.raises(ValueError):
        generate_scene(scene_rng(0, 0), NAMES, size=(30, 32))


def test_captions_round_trip_through_bpe():
    ds = build_dataset(4, 200, 50)
    t = train_bpe(ds.caption_corpus(), 30, caption_alphabet())
    for s in ds.scenes:
        for _c, _b, cap in s.captions:
            assert t.decode(encode_text(t, cap)) == cap


def test_splits_are_disjoint():
    ds = build_dataset(0, 30, 10)
    assert not set(ds.train_ids) & set(ds.val_ids)
    assert len(ds.scenes) == 40


# ---------------------------------------------------------------------------
# pools


def test_pools_resolve_and_cover_split():
    ds = build_dataset(0, 50, 10)
    pools = build_pools(ds.scenes, ds.train_ids)
    present = {o.class_index for sid in ds.train_ids for o in ds.scenes[sid].objects}
    assert set(pools) == present
    for cls, refs in pools.items():
        for sid, j in refs:
            assert sid in ds.train_ids and ds.scenes[sid].objects[j].class_index == cls


def test_sample_in_context_basics(rng):
    pool = {3: [(0, 0), (1, 0), (2, 1)]}
    assert sample_in_context(pool, 3, 0, rng) == []
    assert sorted(sample_in_context(pool, 3, 3, rng)) == pool[3]
    got = sample_in_context(pool, 3, 2, rng, exclude=1)
    assert sorted(got) == [(0, 0), (2, 1)]
    with pytest.raises(PoolError, match="class 3.*deficit 1"):
        sample_in_context(pool, 3, 3, rng, exclude=0)
    with pytest.raises(PoolError, match="class 7"):
        sample_in_context(pool, 7, 1, rng)


def test_sample_in_context_uniform(rng):
    pool = {0: [(i, 0) for i in range(5)]}
    counts = Counter(sample_in_context(pool, 0, 1, rng)[0] for _ in range(10_000))
    for ref in pool[0]:
        assert abs(counts[ref] / 10_000 - 0.2) <= 0.02


# ---------------------------------------------------------------------------
# disk layout


def test_save_load_and_regenerate(tmp_path):
    ds = build_dataset(11, 12, 4)
    save_dataset(ds, tmp_path / "a")
    back = load_dataset(tmp_path / "a")
    assert (back.seed, back.size, back.num_train, back.num_val, back.class_names) == (11, (32, 32), 12, 4, NAMES)
    for a, b in zip(ds.scenes, back.scenes):
        _same_scene(a, b)
    again = regenerate_from_manifest(tmp_path / "a")
    save_dataset(again, tmp_path / "b")
    assert directory_digest(tmp_path / "a") == directory_digest(tmp_path / "b")
