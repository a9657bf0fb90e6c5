import hashlib
import math

import numpy as np
import pytest

from edora.adapters import AdapterSpec
from edora.model import ConfigError, ModelConfig, build
from edora.numerics import GradTape, Tensor
from edora.signal import TrialSet, synth_generate, zscore
from edora.train import (
    AdamState,
    FreezePolicy,
    OptimConfig,
    _fit,
    adam_step,
    cross_entropy,
    finetune,
    holdout_split,
    prepare_finetune,
    pretrain,
)

SMALL = ModelConfig(channels=3, samples=64, classes=3, temporal_kernel=9, embed_dim=8,
                    encoder_layers=1, heads=2, pool_kernel=14, pool_stride=6, head_hidden=8)


def small_set(n_per_class=12, seed=0, shift=0.0):
    ts = synth_generate(3, 3, n_per_class, 32.0, 2.0, shift, seed=seed, amplitude=2.0)
    ts.data = zscore(ts.data)
    return ts


def digest(model):
    h = hashlib.sha256()
    for name, t in sorted(model.params.items()):
        h.update(name.encode() + t.data.tobytes())
    return h.hexdigest()


# cross-entropy ------------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((4, 3))), [0, 1, 2, 1])
    assert loss.item() == pytest.approx(math.log(3), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.full((2, 3), -40.0)
    logits[[0, 1], [2, 0]] = 40.0
    assert cross_entropy(Tensor(logits), [2, 0]).item() < 1e-30
    assert cross_entropy(Tensor(logits), [0, 1]).item() == pytest.approx(80.0, rel=1e-9)


def test_cross_entropy_matches_oracle_and_gradient():
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(5, 4)), np.array([0, 3, 1, 1, 2])
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    x = Tensor(z, requires_grad=True)
    with GradTape() as tape:
        loss = cross_entropy(x, y)
    assert loss.item() == pytest.approx(-np.mean(np.log(p[np.arange(5), y])), rel=1e-12)
    onehot = np.eye(4)[y]
    np.testing.assert_allclose(tape.backward(loss)[x], (p - onehot) / 5, atol=1e-14)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# Adam ------------------------------------------------------------------------------


def test_adam_first_step_is_lr_times_sign():
    cfg = OptimConfig(lr=0.01)
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 1e-3])}
    out, state = adam_step(p, g, AdamState(), cfg, 1)
    np.testing.assert_allclose(out["w"], p["w"] - 0.01 * np.sign(g["w"]), atol=1e-7)
    assert state.t == 1


def test_adam_zero_gradient_holds_still():
    out, _ = adam_step({"w": np.ones(3)}, {"w": np.zeros(3)}, AdamState(), OptimConfig(), 1)
    np.testing.assert_array_equal(out["w"], np.ones(3))


def test_adam_reference_recurrence_on_quadratic():
    cfg = OptimConfig(lr=0.05, beta1=0.5, beta2=0.999, eps=1e-8)
    w, state = {"w": np.array([1.0, -0.3])}, AdamState()
    ref, m, v = np.array([1.0, -0.3]), np.zeros(2), np.zeros(2)
    for t in range(1, 11):
        w, state = adam_step(w, {"w": 2 * w["w"]}, state, cfg, t)
        g = 2 * ref
        m = 0.5 * m + 0.5 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.5 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(w["w"], ref, rtol=0, atol=1e-12)


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(lr=0)
    with pytest.raises(ConfigError):
        OptimConfig(beta1=1.0)


# splits ----------------------------------------------------------------------------


def test_holdout_split_stratified_and_disjoint():
    labels = np.repeat([0, 1, 2], [10, 20, 30])
    tr, ho = holdout_split(labels, 0.2, seed=3)
    assert set(tr).isdisjoint(ho) and len(tr) + len(ho) == 60
    np.testing.assert_array_equal(np.bincount(labels[ho]), [2, 4, 6])
    tr2, ho2 = holdout_split(labels, 0.2, seed=3)
    np.testing.assert_array_equal(ho, ho2)


def test_holdout_split_ordered_takes_last_trials():
    labels = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1])
    _, ho = holdout_split(labels, 0.4, policy="ordered")
    np.testing.assert_array_equal(ho, [3, 4, 8, 9])


# training loop ---------------------------------------------------------------------------


def test_zero_epochs_is_noop():
    model = build(SMALL, seed=0)
    trained, history = pretrain(model, small_set(), OptimConfig(epochs=0, batch_size=8))
    assert history == [] and digest(trained) == digest(model)


def test_pretrain_learns_and_is_deterministic():
    cfg = OptimConfig(lr=3e-3, epochs=25, batch_size=12, seed=1)
    ts = small_set(20)
    a, ha = pretrain(build(SMALL, seed=0), ts, cfg)
    b, hb = pretrain(build(SMALL, seed=0), ts, cfg)
    assert ha == hb and digest(a) == digest(b)
    assert ha[-1]["train_acc"] >= 0.95
    losses = np.array([h["train_loss"] for h in ha])
    assert losses[-5:].mean() < losses[:5].mean()


def test_shuffled_labels_stay_near_chance_on_holdout():
    ts = small_set(30, seed=4)
    ts = TrialSet(ts.data, np.random.default_rng(0).permutation(ts.labels), ts.class_names,
                  ts.rate_hz)
    _, hist = pretrain(build(SMALL, seed=0), ts, OptimConfig(lr=3e-3, epochs=15, batch_size=12))
    assert hist[-1]["holdout_acc"] < 0.6


def test_batch_larger_than_set_rejected():
    with pytest.raises(ConfigError):
        pretrain(build(SMALL), small_set(2), OptimConfig(epochs=1, batch_size=72))


def test_adapters_only_keeps_base_frozen():
    source = build(SMALL, seed=0)
    target = small_set(12, seed=2, shift=0.5)
    spec = AdapterSpec("edora", 2, 2)
    model = prepare_finetune(source, target, spec, FreezePolicy(), seed=0)
    frozen = {n: t.data.copy() for n, t in model.named_parameters() if not t.requires_grad}
    assert frozen and all(not n.startswith("head.") for n in frozen)
    seen = []

    def check(grads):
        seen.append(max(np.abs(grads[n]).max() for n in frozen))

    half = len(target) // 2
    _fit(model, target.subset(np.arange(half)), target.subset(np.arange(half, len(target))),
         OptimConfig(lr=1e-2, epochs=2, batch_size=6), on_step=check)
    assert seen and max(seen) == 0.0
    for n, t in model.named_parameters():
        if n in frozen:
            np.testing.assert_array_equal(t.data, frozen[n])


def test_finetune_leaves_pretrained_untouched_and_reports():
    source = build(SMALL, seed=0)
    before = digest(source)
    res = finetune(source, small_set(12, 2, 0.5), AdapterSpec("edora", 2, 2), FreezePolicy(),
                   OptimConfig(lr=1e-2, epochs=2, batch_size=6))
    assert digest(source) == before and len(res.history) == 2
    assert res.report["adapter"] == res.report["adapter_closed_form"]
    assert res.report["trainable"] == res.report["adapter"] + res.report["fresh"]


def test_full_finetune_trains_everything():
    res = finetune(build(SMALL), small_set(12, 2), None, FreezePolicy("full_finetune"),
                   OptimConfig(epochs=1, batch_size=6))
    assert res.report["trainable_fraction"] == 1.0


def test_fresh_policy_resolution():
    assert FreezePolicy().resolve(8, 8) == ("head.",)
    assert FreezePolicy().resolve(8, 22) == ("spatial.", "head.")
    assert FreezePolicy(fresh=("head.",)).resolve(3, 4) == ("spatial.", "head.")
    with pytest.raises(ConfigError):
        FreezePolicy("everything")
