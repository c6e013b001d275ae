from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_instance, ref_center, ref_softmax
from fos.checkpoint import CorruptCheckpoint
from fos.fg_encoder import (
    FgEncoder,
    FgTrainConfig,
    auto_label,
    center_loss,
    classify_patterns,
    embed_foregrounds,
    intra_pattern_variance,
    load_fg_encoder,
    offline_views,
    pattern_accuracy,
    rank_classes,
    save_fg_encoder,
    softmax_loss,
    total_fg_loss,
    train_foreground_encoder,
    update_centers,
)

TINY = FgTrainConfig(epochs=1, aug_multiplicity=2, image_size=16, embed_dim=8)


@pytest.fixture(scope="module")
def tiny_model(small_corpus):
    return train_foreground_encoder(small_corpus, TINY, seed=0)


def update_centers_loop(centers, x, labels, alpha):
    """Per-class loop version of the center step."""
    out = centers.copy()
    for j in range(len(centers)):
        sel = labels == j
        if sel.any():
            out[j] = centers[j] - alpha * (centers[j] - x[sel]).sum(axis=0) / (1 + sel.sum())
    return out


@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients_match_finite_differences(seed):
    errs = check_instance(np.random.default_rng(seed))
    for name in ("softmax", "center", "total", "triplet"):
        assert errs[name] < 1e-3, name
        assert errs[name + "_value"] < 1e-10, name


def test_center_loss_is_summed_not_averaged():
    x = torch.ones(4, 2, dtype=torch.float64)
    c = torch.zeros(1, 2, dtype=torch.float64)
    assert center_loss(x, torch.zeros(4, dtype=torch.long), c).item() == pytest.approx(4.0)


def test_total_loss_composition():
    rng = np.random.default_rng(1)
    logits, x, centers = rng.normal(size=(3, 4)), rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    labels = np.array([0, 3, 1])
    total, ls, lc = total_fg_loss(torch.tensor(logits), torch.tensor(x), torch.tensor(labels), torch.tensor(centers), 0.5)
    assert ls.item() == pytest.approx(ref_softmax(logits, labels), abs=1e-12)
    assert lc.item() == pytest.approx(ref_center(x, labels, centers), abs=1e-12)
    assert total.item() == pytest.approx(ls.item() + 0.5 * lc.item(), abs=1e-12)


def test_loss_input_validation():
    with pytest.raises(ValueError):
        softmax_loss(torch.tensor([[float("nan"), 0.0]]), torch.tensor([0]))
    with pytest.raises(ValueError):
        softmax_loss(torch.zeros(1, 2), torch.tensor([2]))
    with pytest.raises(ValueError):
        center_loss(torch.zeros(1, 3), torch.tensor([0]), torch.zeros(1, 2))


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_update_centers_matches_loop(seed, alpha):
    rng = np.random.default_rng(seed)
    c, b, d = 4, int(rng.integers(1, 9)), 3
    centers, x = rng.normal(size=(c, d)), rng.normal(size=(b, d))
    labels = rng.integers(0, c, size=b)
    got = update_centers(torch.tensor(centers), torch.tensor(x), torch.tensor(labels), alpha).numpy()
    np.testing.assert_allclose(got, update_centers_loop(centers, x, labels, alpha), atol=1e-12)
    absent = [j for j in range(c) if j not in set(labels.tolist())]
    np.testing.assert_array_equal(got[absent], centers[absent])


def test_update_centers_rejects_bad_alpha():
    with pytest.raises(ValueError):
        update_centers(torch.zeros(1, 2), torch.zeros(1, 2), torch.tensor([0]), 0.0)


def test_rank_classes_tie_by_id():
    assert rank_classes(np.array([1.0, 2.0, 2.0]), ["c", "b", "a"]) == ["a", "b", "c"]


def test_embeddings_unit_norm_and_deterministic(tiny_model, small_corpus):
    imgs = [i.image for i in small_corpus.instances[:5]]
    e1 = embed_foregrounds(tiny_model.model, imgs)
    e2 = embed_foregrounds(tiny_model.model, imgs)
    np.testing.assert_array_equal(e1, e2)
    np.testing.assert_allclose(np.linalg.norm(e1, axis=1), 1.0, atol=1e-6)
    assert e1.shape == (5, 8)


def test_training_history_and_classification(tiny_model, small_corpus):
    assert [set(r) for r in tiny_model.history] == [
        {"epoch", "softmax_loss", "center_loss", "total_loss", "val_top1"}]
    preds = classify_patterns(tiny_model.model, [small_corpus.instances[0].image], 2)
    assert len(preds[0]) == 2 and set(preds[0]) <= set(tiny_model.model.class_ids)
    assert 0.0 <= pattern_accuracy(tiny_model.model, small_corpus.instances, 1) <= 1.0
    with pytest.raises(ValueError):
        classify_patterns(tiny_model.model, [small_corpus.instances[0].image], 99)


def test_auto_label(tiny_model, small_corpus):
    unlabelled = [type(i)(i.id, i.image, None, None, i.split) for i in small_corpus.instances[:3]]
    labelled = auto_label(tiny_model.model, unlabelled)
    assert all(i.pattern_id in tiny_model.model.class_ids for i in labelled)
    kept = auto_label(tiny_model.model, unlabelled, min_confidence=1.01)
    assert all(i.pattern_id is None for i in kept)


def test_offline_views_shape(small_corpus):
    v = offline_views(small_corpus.instances[:3], 2, 16, 0.2, np.random.default_rng(0))
    assert tuple(v.shape) == (3, 2, 3, 16, 16)


def test_intra_pattern_variance_oracle():
    e = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0], [2.0, 2.0]])
    # pattern a: mean (.5,.5), squared distances .5 and .5; pattern b: 0
    assert intra_pattern_variance(e, ["a", "a", "b", "b"]) == pytest.approx(0.25)


def test_checkpoint_round_trip_and_corruption(tiny_model, small_corpus, tmp_path):
    path = save_fg_encoder(tiny_model.model, tmp_path / "t.ckpt", schema_hash="s")
    model, payload = load_fg_encoder(path)
    assert model.checksum() == tiny_model.model.checksum()
    assert model.class_ids == tiny_model.model.class_ids
    imgs = [i.image for i in small_corpus.instances[:3]]
    np.testing.assert_array_equal(embed_foregrounds(model, imgs), embed_foregrounds(tiny_model.model, imgs))
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 0xFF
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpoint):
        load_fg_encoder(bad)
    bad.write_bytes(b"nonsense")
    with pytest.raises(CorruptCheckpoint):
        load_fg_encoder(bad)


def test_encoder_classifier_shapes():
    m = FgEncoder(["a", "b", "c"], TINY)
    x, logits = m(torch.zeros(2, 3, 16, 16))
    assert x.shape == (2, 8) and logits.shape == (2, 3)
    assert m.centers.shape == (3, 8) and torch.all(m.centers == 0)


def test_config_validation():
    with pytest.raises(ValueError):
        FgTrainConfig(center_lr=1.5).validate()
    with pytest.raises(ValueError):
        FgTrainConfig(center_weight=-1).validate()
    cfg = FgTrainConfig(epochs=3)
    assert FgTrainConfig.from_dict(cfg.to_dict()) == cfg
