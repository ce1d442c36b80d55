from dataclasses import replace

import numpy as np
import pytest

from pldpirl import ops
from pldpirl.encoder import EncoderConfig
from pldpirl.losses import LossConfig
from pldpirl.tensor import backward, parameter
from pldpirl.trainer import (
    EarlyStopping,
    NonFiniteGradientError,
    TrainingError,
    evaluate_classifier,
    finetune,
    finetune_defaults,
    load_classifier,
    lr_at,
    predict_proba,
    pretext_defaults,
    pretext_train,
    sgd_step,
    supervised_baseline_train,
)

TINY = EncoderConfig(channels=(4, 8), input_size=24, embed_dim=16, stem_kernel=4, stem_stride=4)


def color_coded(n_per_class=12, seed=0):
    """Images whose dominant channel is the class: trivially separable."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(3):
        for _ in range(n_per_class):
            img = rng.uniform(0.0, 0.3, size=(3, 24, 24))
            img[c] += 0.6
            xs.append(img)
            ys.append(c)
    return np.stack(xs), np.array(ys)


def test_sgd_step_examples():
    p = parameter([1.0])
    sgd_step([p], [np.array([2.0])], 0.1)
    assert p.data.tolist() == [0.8]
    sgd_step([p], [np.array([5.0])], 0.0)
    assert p.data.tolist() == [0.8]


def test_sgd_descends_a_quadratic_bowl():
    p = parameter([3.0, -2.0])

    def loss():
        return ops.sum(ops.mul(p, p))

    before = loss().item()
    backward(loss())
    sgd_step([p], None, 0.1)
    assert loss().item() < before


def test_sgd_aborts_on_non_finite_gradient_before_updating():
    a, b = parameter([1.0], "a"), parameter([1.0], "bad")
    with pytest.raises(NonFiniteGradientError, match="bad"):
        sgd_step([a, b], [np.array([1.0]), np.array([np.nan])], 0.1)
    assert a.data.tolist() == [1.0]
    with pytest.raises(TrainingError):
        sgd_step([a], [np.ones(2)], 0.1)


def test_lr_schedule():
    cfg = finetune_defaults()
    assert lr_at(cfg, 0) == lr_at(cfg, 29) == 1e-4
    assert lr_at(cfg, 30) == pytest.approx(9e-5, rel=1e-15)
    assert lr_at(cfg, 65) == pytest.approx(1e-4 * 0.81, rel=1e-15)


def test_early_stopping_rule():
    delta = 2.0 ** -20  # dyadic so the threshold case is exact
    stop = EarlyStopping(delta, 20)
    assert not stop.update(1.0)
    # an improvement of exactly min_delta does not reset the counter
    fired = [stop.update(1.0 - delta) for _ in range(20)]
    assert fired[-1] and not any(fired[:-1])

    stop = EarlyStopping(1e-6, 3)
    seq = [1.0, 0.5, 0.5, 0.4999995, 0.49]
    assert [stop.update(v) for v in seq] == [False, False, False, False, False]
    assert stop.best == 0.49
    assert [stop.update(0.49) for _ in range(3)] == [False, False, True]


def test_early_stop_fires_on_flat_loss():
    x, y = color_coded(4)
    cfg = finetune_defaults(encoder=TINY, lr=0.0, max_epochs=100)
    result = finetune(cfg, None, x, y)
    # epoch 0 sets the best, then 20 epochs without improvement
    assert result.history.stop_reason == "early-stop"
    assert len(result.history.records) == 21


def test_history_lr_follows_schedule():
    x, y = color_coded(3)
    cfg = finetune_defaults(encoder=TINY, lr=1e-3, max_epochs=7, lr_decay_every=2, lr_decay_factor=0.5)
    hist = finetune(cfg, None, x, y).history
    assert hist.stop_reason == "max-epochs"
    for r in hist.records:
        assert r.lr == cfg.lr * 0.5 ** (r.epoch // 2)


def test_frozen_head_separates_toy_embeddings():
    x, y = color_coded(10)
    cfg = finetune_defaults(encoder=TINY, lr=0.5, max_epochs=300, stop_patience=0, freeze_backbone=True)
    result = finetune(cfg, None, x, y)
    pred = predict_proba(result.classifier, x).argmax(axis=1)
    assert np.mean(pred == y) == 1.0


def test_baseline_fits_an_easy_set():
    x, y = color_coded(10, seed=1)
    cfg = finetune_defaults(encoder=TINY, lr=0.05, max_epochs=100)
    result = supervised_baseline_train(cfg, x, y)
    assert evaluate_classifier(result.classifier, x, y).top1 >= 90.0
    assert result.history.stop_reason in ("max-epochs", "early-stop")


def test_baseline_and_finetune_share_head_init_only():
    x, y = color_coded(2)
    cfg = finetune_defaults(encoder=TINY, max_epochs=1)
    base = supervised_baseline_train(cfg, x, y)
    pre = pretext_train(pretext_defaults(encoder=TINY, max_epochs=1, seed=5), x)
    tuned = finetune(cfg, pre.state, x, y)
    for k in base.initial_head:
        assert base.initial_head[k].tobytes() == tuned.initial_head[k].tobytes()
    base0 = load_classifier(cfg, base.state).params
    assert any(base.state[n].tobytes() != tuned.state[n].tobytes() for n in base0.backbone_names())


def test_finetune_rejects_incompatible_checkpoint():
    from pldpirl.checkpoint import CheckpointError

    x, y = color_coded(2)
    pre = pretext_train(pretext_defaults(encoder=TINY, max_epochs=1), x)
    wide = replace(TINY, channels=(4, 16))
    with pytest.raises(CheckpointError, match="stage1"):
        finetune(finetune_defaults(encoder=wide, max_epochs=1), pre.state, x, y)


def _pretext(lam, epochs=3, seed=0, n=36):
    x, _ = color_coded(n // 3, seed=seed)
    cfg = pretext_defaults(encoder=TINY, max_epochs=epochs, seed=seed, loss=LossConfig(lam=lam, negatives=8))
    return pretext_train(cfg, x)


def test_lambda_zero_never_evaluates_pld():
    assert _pretext(0.0).pld_calls == 0
    assert _pretext(0.5).pld_calls > 0


def test_banks_updated_once_per_sample_per_epoch():
    r = _pretext(0.5, epochs=3)
    assert np.all(r.image_bank.update_counts == 3) and np.all(r.patch_bank.update_counts == 3)
    np.testing.assert_allclose(np.linalg.norm(r.image_bank.entries, axis=1), 1.0, atol=1e-6)
    assert r.image_clusters is not None and r.image_clusters.k == 3


def test_pretext_and_finetune_are_bitwise_deterministic():
    a, b = _pretext(0.5, epochs=2, seed=3), _pretext(0.5, epochs=2, seed=3)
    assert a.history.losses[0] == b.history.losses[0]
    for k in a.state:
        assert a.state[k].tobytes() == b.state[k].tobytes()
    x, y = color_coded(3, seed=3)
    cfg = finetune_defaults(encoder=TINY, max_epochs=3, lr=1e-2)
    ra, rb = finetune(cfg, a.state, x, y, x, y), finetune(cfg, b.state, x, y, x, y)
    for k in ra.state:
        assert ra.state[k].tobytes() == rb.state[k].tobytes()


def test_pretext_rejects_empty_dataset():
    with pytest.raises(TrainingError):
        pretext_train(pretext_defaults(encoder=TINY), np.zeros((0, 3, 24, 24)))


def test_history_serialization(tmp_path):
    r = _pretext(0.0, epochs=2)
    r.history.write_csv(tmp_path / "h.csv")
    r.history.write_json(tmp_path / "h.json")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,lr,seconds" and len(lines) == 3
    import json

    d = json.loads((tmp_path / "h.json").read_text())
    assert d["stop_reason"] == "max-epochs" and len(d["epochs"]) == 2
