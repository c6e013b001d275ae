from __future__ import annotations

import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_instance, make_query
from fos.core import AttributeVector, Rectangle
from fos.dataset import (
    AnnotatedComposite,
    Corpus,
    ExcludedSample,
    ExclusionRules,
    JitterConfig,
    NO_JITTER,
    SyntheticConfig,
    TripletSampler,
    augment_foreground,
    augment_rectangle,
    augment_zoom,
    color_jitter,
    corpus_from_annotations,
    dataset_checksum,
    decompose,
    expand_pairs,
    from_uint8,
    generate_synthetic_corpus,
    group_patterns,
    load_annotation_manifest,
    mask_bbox,
    mean_fill_inpaint,
    paste_on_white_square,
    read_manifest,
    resample_window,
    resize_image,
    sample_triplet,
    save_png,
    synthetic_attributes,
    synthetic_pattern,
    to_uint8,
    write_manifest,
)


def _composite(h=40, w=60, box=(10, 5, 30, 35), attrs=AttributeVector("front", "full-body")):
    rng = np.random.default_rng(1)
    image = rng.uniform(size=(h, w, 3)).astype(np.float32)
    mask = np.zeros((h, w), dtype=bool)
    x0, y0, x1, y1 = box
    mask[y0:y1, x0:x1] = True
    return AnnotatedComposite(image, mask, "person", attrs)


# -- decomposition


def test_decompose_rect_and_background():
    comp = _composite()
    q, fg = decompose(comp, rules=ExclusionRules(min_side=4))
    assert q.rect.as_tuple() == pytest.approx((20 / 60, 20 / 40, 20 / 60, 30 / 40))
    mask = comp.mask
    np.testing.assert_array_equal(q.background[~mask], comp.image[~mask])
    fill = comp.image[~mask].mean(axis=0)
    np.testing.assert_allclose(q.background[mask], np.broadcast_to(fill, q.background[mask].shape), atol=1e-6)
    assert q.source_id == fg.id
    assert fg.pattern_id == comp.attributes.key()


def test_decompose_foreground_on_white_square():
    comp = _composite()
    _, fg = decompose(comp, rules=ExclusionRules(min_side=4), margin=0.1)
    longest = 30
    pad = 3
    assert fg.image.shape == (longest + 2 * pad, longest + 2 * pad, 3)
    # outside the pasted object the canvas is pure white
    white = np.all(fg.image == 1.0, axis=2)
    assert white.sum() == fg.image.shape[0] ** 2 - 20 * 30


def test_decompose_exclusion_rules():
    with pytest.raises(ExcludedSample):
        decompose(_composite(box=(10, 5, 12, 35)), rules=ExclusionRules(min_side=4))
    with pytest.raises(ExcludedSample):
        decompose(_composite(box=(10, 5, 15, 10)), rules=ExclusionRules(min_area_fraction=0.05, min_side=1))


def test_mask_helpers():
    mask = np.zeros((5, 6), dtype=bool)
    mask[1:3, 2:5] = True
    assert mask_bbox(mask) == (2, 1, 5, 3)
    with pytest.raises(ValueError):
        mask_bbox(np.zeros((3, 3), dtype=bool))
    with pytest.raises(ValueError):
        mean_fill_inpaint(np.ones((3, 3, 3)), np.ones((3, 3), dtype=bool))
    img = paste_on_white_square(np.zeros((5, 6, 3)), mask, margin=0.0)
    assert img.shape == (5, 5, 3)


def test_annotation_ingestion(tmp_path):
    items = []
    for n in range(4):
        comp = _composite(box=(10, 5, 30, 35) if n else (10, 5, 11, 6))
        save_png(comp.image, tmp_path / f"img{n}.png")
        save_png(np.repeat(comp.mask[..., None], 3, axis=2).astype(np.float32), tmp_path / f"mask{n}.png")
        items.append({"image": f"img{n}.png", "mask": f"mask{n}.png",
                      "attributes": comp.attributes.to_dict()})
    (tmp_path / "ann.json").write_text(json.dumps({"category": "person", "items": items}))
    loaded = load_annotation_manifest(tmp_path / "ann.json")
    assert len(loaded) == 4
    corpus, excluded = corpus_from_annotations(loaded, rules=ExclusionRules(min_side=4))
    assert excluded == 1
    assert len(corpus.instances) == 3
    for q in corpus.queries:
        assert corpus.compatibility[q.id] == [corpus.instance(q.source_id).pattern_id]


# -- patterns and triplets


def test_group_patterns():
    insts = [make_instance("a"), make_instance("b"), make_instance("c", orientation="left")]
    pats = group_patterns(insts)
    assert [p.member_ids for p in pats] == [("a", "b"), ("c",)]
    # every instance belongs to exactly one pattern
    assert sorted(m for p in pats for m in p.member_ids) == ["a", "b", "c"]


def test_expand_pairs_and_corpus_pairs(small_corpus):
    pairs = expand_pairs(small_corpus.pairs(), small_corpus.patterns())
    members = small_corpus.members()
    expected = sum(len(members[p]) for ps in small_corpus.compatibility.values() for p in ps)
    assert len(pairs) == expected


def test_triplet_sampler_distribution():
    comp = {"q": ["A", "B"]}
    members = {"A": ["a1"], "B": ["b1", "b2", "b3"], "C": ["c1"], "D": ["d1", "d2", "d3"]}
    sampler = TripletSampler(comp, members)
    rng = np.random.default_rng(0)
    draws = [sampler.sample(rng, "q") for _ in range(8000)]
    pos = Counter(p for _, p, _ in draws)
    neg = Counter(n for _, _, n in draws)
    # positive: pattern uniform, then member uniform
    assert pos["a1"] / 8000 == pytest.approx(0.5, abs=0.03)
    assert pos["b2"] / 8000 == pytest.approx(1 / 6, abs=0.03)
    # negative: instance-uniform over incompatible patterns
    for n in ("c1", "d1", "d2", "d3"):
        assert neg[n] / 8000 == pytest.approx(0.25, abs=0.03)
    assert set(neg) <= {"c1", "d1", "d2", "d3"}


def test_triplet_sampler_errors():
    with pytest.raises(ValueError):
        TripletSampler({"q": ["Z"]}, {"A": ["a"]})
    with pytest.raises(ValueError):
        TripletSampler({"q": ["A"]}, {"A": ["a"]})


def test_sample_triplet_respects_compatibility(small_corpus):
    for seed in range(20):
        t = sample_triplet(small_corpus, seed)
        compatible = small_corpus.compatibility[t.anchor.id]
        assert t.positive.pattern_id in compatible
        assert t.negative.pattern_id not in compatible
        assert t.anchor.split == t.positive.split == t.negative.split == "train"


# -- augmentation


@settings(max_examples=60)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.02, 0.6), st.floats(0.02, 0.6),
       st.integers(0, 10_000))
def test_augment_rectangle_contains_original(cx, cy, w, h, seed):
    r = Rectangle(cx, cy, w, h)
    grown = augment_rectangle(r, np.random.default_rng(seed))
    a, b = r.corners(), grown.corners()
    eps = 1e-9
    assert b[0] <= a[0] + eps and b[1] <= a[1] + eps and b[2] >= a[2] - eps and b[3] >= a[3] - eps
    assert 0 - eps <= b[0] and b[2] <= 1 + eps and 0 - eps <= b[1] and b[3] <= 1 + eps
    assert augment_rectangle(r, np.random.default_rng(seed), max_growth=0.0) == r


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 0.8), st.floats(0.2, 0.8), st.floats(0.05, 0.3), st.floats(0.05, 0.3), st.integers(0, 999))
def test_zoom_keeps_rect_in_view(cx, cy, w, h, seed):
    q = make_query("q", w=32, h=24, rect=(cx, cy, w, h))
    z = augment_zoom(q, np.random.default_rng(seed), max_zoom=2.0)
    x0, y0, x1, y1 = z.rect.corners()
    assert -1e-9 <= x0 and x1 <= 1 + 1e-9 and -1e-9 <= y0 and y1 <= 1 + 1e-9
    assert z.background.shape == q.background.shape
    assert z.rect.w >= q.rect.w - 1e-9 and z.rect.h >= q.rect.h - 1e-9


def test_resample_window_identity_and_crop():
    img = np.random.default_rng(0).uniform(size=(8, 8, 3)).astype(np.float32)
    np.testing.assert_allclose(resample_window(img, 0, 0, 1, 1), img, atol=1e-5)
    half = resample_window(img, 0.5, 0.5, 0.5, 0.5)
    assert half.shape == img.shape


def test_resize_identity():
    img = np.random.default_rng(0).uniform(size=(6, 6, 3)).astype(np.float32)
    np.testing.assert_array_equal(resize_image(img, 6), img)
    assert resize_image(img, 12, 9).shape == (12, 9, 3)


def test_color_jitter_keep_white_and_range():
    img = np.ones((10, 10, 3), dtype=np.float32)
    img[3:7, 3:7] = [0.8, 0.2, 0.1]
    rng = np.random.default_rng(3)
    out = color_jitter(img, rng, JitterConfig(), keep_white=True)
    white = np.all(img == 1.0, axis=2)
    np.testing.assert_array_equal(out[white], img[white])
    assert out.min() >= 0.0 and out.max() <= 1.0
    np.testing.assert_allclose(color_jitter(img, rng, NO_JITTER), img, atol=1e-5)


def test_augment_foreground_shape_and_label():
    fg = make_instance("a", size=20, value=0.4)
    out = augment_foreground(fg, np.random.default_rng(0), size=32)
    assert out.image.shape == (32, 32, 3)
    assert out.pattern_id == fg.pattern_id


@settings(max_examples=25)
@given(st.integers(0, 255))
def test_uint8_round_trip(v):
    arr = np.full((2, 2, 3), v, dtype=np.uint8)
    np.testing.assert_array_equal(to_uint8(from_uint8(arr)), arr)


# -- synthetic corpus and manifest


def test_synthetic_corpus_structure():
    cfg = SyntheticConfig()
    c = generate_synthetic_corpus(cfg, seed=0)
    assert len(c.instances) == 240 and len(c.patterns()) == 8
    assert all(len(p.member_ids) == 30 for p in c.patterns())
    assert Counter(i.split for i in c.instances) == {"train": 192, "test": 48}
    index_of = {synthetic_attributes(c.schema, *synthetic_pattern(p, 4)).key(): p for p in range(8)}
    for q in c.queries:
        comp = c.compatibility[q.id]
        assert c.instance(q.source_id).pattern_id in comp
        assert 0 < len(comp) < 8
        # the rect's pixel aspect agrees with every compatible pattern's aspect class
        tall = q.rect.h * cfg.height > q.rect.w * cfg.width
        for key in comp:
            shape, _ = synthetic_pattern(index_of[key], 4)
            assert tall == (shape % 2 == 0)


def test_synthetic_corpus_deterministic():
    a = generate_synthetic_corpus(SyntheticConfig(patterns=3, per_pattern=3), seed=4)
    b = generate_synthetic_corpus(SyntheticConfig(patterns=3, per_pattern=3), seed=4)
    for x, y in zip(a.instances, b.instances):
        np.testing.assert_array_equal(x.image, y.image)
    assert a.compatibility == b.compatibility


def test_synthetic_config_rejects_infeasible():
    with pytest.raises(ValueError):
        generate_synthetic_corpus(SyntheticConfig(patterns=1), seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_corpus(SyntheticConfig(n_shapes=1), seed=0)


def test_manifest_round_trip(tmp_path, small_corpus):
    write_manifest(small_corpus, tmp_path / "a")
    back = read_manifest(tmp_path / "a" / "manifest.json")
    write_manifest(back, tmp_path / "b")
    assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b")
    for x, y in zip(small_corpus.instances, back.instances):
        np.testing.assert_array_equal(x.image, y.image)
        assert (x.id, x.pattern_id, x.split) == (y.id, y.pattern_id, y.split)
    assert back.compatibility == small_corpus.compatibility


def test_corpus_validation():
    inst = make_instance("a")
    with pytest.raises(ValueError):
        Corpus(None, [inst, make_instance("a")], [], {})
    with pytest.raises(ValueError):
        Corpus(None, [inst], [make_query("q")], {"q": ["nope"]})
