"""Evaluation instruments: two-sample test, attribute judge, export helpers."""

import math

import numpy as np
import pytest
import torch
from PIL import Image

from percgan import (
    ConfigError,
    DataError,
    EvalConfig,
    SmallConvClassifier,
    attribute_logloss,
    c2st,
    export_metrics,
    read_metrics,
    save_montage,
    synth_toy_domains,
    train_attribute_classifier,
)
from percgan.evalkit import (
    export_classifier_trunk,
    load_attribute_classifier,
    save_attribute_classifier,
)
from percgan.refnet import (
    MAX_POOL,
    NEUTRAL_MEAN,
    ArchDescriptor,
    apply_surgery,
    default_boundaries,
    extract_features,
    load_reference_weights,
    partition,
)

LN2 = math.log(2.0)


@pytest.fixture(scope="module")
def tint(tmp_path_factory):
    root = tmp_path_factory.mktemp("tint")
    dx, dy = synth_toy_domains("tint", 600, 16, seed=0, root=root)
    xs = torch.stack([dx.image(i) for i in range(600)])
    ys = torch.stack([dy.image(i) for i in range(600)])
    return dx, dy, xs, ys


# ------------------------------------------------------------ two-sample test


def test_c2st_identical_distributions_score_near_ln2(tint):
    _, _, xs, _ = tint
    res = c2st(xs[:300], xs[300:600])
    assert abs(res.log_loss - LN2) <= 0.05
    assert 0.40 <= res.accuracy <= 0.60
    assert res.train_size == 300 and res.test_size == 300


def test_c2st_is_roughly_symmetric(tint):
    _, _, xs, _ = tint
    fwd = c2st(xs[:300], xs[300:600])
    rev = c2st(xs[300:600], xs[:300])
    assert abs(fwd.log_loss - rev.log_loss) <= 0.05


def test_c2st_detects_obvious_fakes(tint):
    _, _, xs, _ = tint
    noise = torch.rand(300, 3, 16, 16) * 2 - 1
    res = c2st(xs[:300], noise)
    assert res.log_loss <= 0.05
    assert res.accuracy >= 0.95


def test_c2st_detects_the_other_domain(tint):
    _, _, xs, ys = tint
    res = c2st(xs[:300], ys[:300])
    assert res.log_loss <= LN2 - 0.1


def test_c2st_deterministic_for_equal_seeds(tint):
    _, _, xs, ys = tint
    a = c2st(xs[:300], ys[:300])
    b = c2st(xs[:300], ys[:300])
    assert a.log_loss == b.log_loss and a.accuracy == b.accuracy


def test_c2st_rejects_small_sides(tint):
    _, _, xs, _ = tint
    with pytest.raises(DataError, match="at least 200"):
        c2st(xs[:100], xs[100:200])


def test_c2st_truncates_to_smaller_side(tint):
    _, _, xs, ys = tint
    res = c2st(xs[:500], ys[:250])
    assert res.train_size == 250 and res.test_size == 250  # 125/side each


def test_eval_config_hash_tracks_fields():
    assert EvalConfig().config_hash() == EvalConfig().config_hash()
    assert EvalConfig().config_hash() != EvalConfig(epochs=11).config_hash()


# ------------------------------------------------------------ attribute judge


def test_untrained_classifier_is_exactly_uniform():
    model = SmallConvClassifier(classes=2)
    score = attribute_logloss(model, torch.rand(8, 3, 16, 16) * 2 - 1, target=0)
    assert abs(score.mean_nll - LN2) <= 1e-6
    assert score.count == 8


def test_attribute_classifier_learns_and_judges(tint):
    dx, dy, xs, ys = tint
    model, stats = train_attribute_classifier(dx, dy)
    assert stats["holdout_accuracy"] >= 0.95
    assert stats["holdout_nll_class0"] <= 0.3
    assert stats["holdout_nll_class1"] <= 0.3
    # images of the wrong class must score much worse than their own
    own = attribute_logloss(model, ys[:100], target=1).mean_nll
    wrong = attribute_logloss(model, ys[:100], target=0).mean_nll
    assert own < 0.3
    assert wrong >= LN2


def test_attribute_classifier_is_frozen_after_training(tint):
    dx, dy, _, _ = tint
    model, _ = train_attribute_classifier(dx, dy)
    assert all(not p.requires_grad for p in model.parameters())


def test_attribute_logloss_rejects_unknown_class():
    model = SmallConvClassifier(classes=2)
    with pytest.raises(ConfigError, match="class id"):
        attribute_logloss(model, torch.rand(4, 3, 16, 16), target=2)


def test_attribute_classifier_save_load_roundtrip(tmp_path, tint):
    dx, dy, xs, _ = tint
    model, _ = train_attribute_classifier(dx, dy)
    path = save_attribute_classifier(model, tmp_path / "judge.pt")
    loaded = load_attribute_classifier(path)
    with torch.no_grad():
        assert torch.equal(model(xs[:4]), loaded(xs[:4]))


def test_load_attribute_classifier_bad_file(tmp_path):
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(DataError, match="cannot load"):
        load_attribute_classifier(tmp_path / "junk.pt")


# ------------------------------------------------------------ trunk export


def test_classifier_trunk_export_roundtrip(tmp_path, tint):
    dx, dy, xs, _ = tint
    model, _ = train_attribute_classifier(dx, dy)
    container, arch_path = export_classifier_trunk(model, tmp_path / "trunk.npz")

    desc = ArchDescriptor.from_json(arch_path)
    assert [s.kind for s in desc.layers].count(MAX_POOL) == 2  # as trained
    net = load_reference_weights(container, desc)
    assert not net.surgically_modified
    assert torch.equal(net.input_mean.flatten(), torch.tensor(NEUTRAL_MEAN))

    # the exported trunk computes exactly the classifier's conv features
    part = partition(net, default_boundaries(desc, 3))
    pyr = extract_features(net, part, xs[:4])
    with torch.no_grad():
        want = model.features[:-2](xs[:4])  # stop before global pool
    assert torch.allclose(pyr.features[-1], want, atol=1e-6)

    surgered = apply_surgery(net)  # the usual load-time modification applies
    assert surgered.surgically_modified


# ------------------------------------------------------------ records and files


def test_metrics_roundtrip(tmp_path, tint):
    _, _, xs, ys = tint
    res = c2st(xs[:300], ys[:300])
    records = [res.record("c2st_translated_vs_real")]
    path = export_metrics(records, tmp_path / "metrics.jsonl")
    back = read_metrics(path)
    assert len(back) == 1
    assert back[0].name == "c2st_translated_vs_real"
    assert back[0].value == pytest.approx(res.log_loss)
    assert back[0].details["accuracy"] == pytest.approx(res.accuracy)


def test_metrics_roundtrip_empty(tmp_path):
    path = export_metrics([], tmp_path / "empty.jsonl")
    assert read_metrics(path) == []


def test_montage_layout(tmp_path):
    pairs = [(torch.rand(3, 16, 16) * 2 - 1, torch.rand(3, 16, 16) * 2 - 1)
             for _ in range(5)]
    path = save_montage(pairs, tmp_path / "grid.png")
    with Image.open(path) as img:
        assert img.size == (5 * 16, 2 * 16)  # one column per pair, source on top
