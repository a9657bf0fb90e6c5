"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The lines are collected by ``conftest.py`` and repeated in the terminal
summary, so ``pytest tests/test_acceptance.py`` shows all ten at a glance.
"""

import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from edora.adapters import (
    AdapterSpec,
    DecomposedWeight,
    adapter_forward,
    dora_forward,
    edora_forward,
    init_adapter,
    merge,
    trainable_param_count,
)
from edora.cli import load_domain, main, params_report
from edora.config import RunConfig, load_config
from edora.metrics import auc_ovr, cohen_kappa, report_from_scores
from edora.model import ModelConfig, adapter_param_closed_form, build, forward, inject_adapters
from edora.numerics import Tensor, finite_diff_check
from edora.signal import butterworth_bandpass, design_bandpass, resample, zscore
from edora.train import FreezePolicy, OptimConfig, finetune, pretrain

from conftest import ACCEPTANCE

DESK = Path(__file__).parents[1] / "configs" / "desk.cfg"


@contextmanager
def criterion(number, title):
    notes = []
    try:
        yield notes
    except BaseException as err:
        detail = f"{type(err).__name__}: {err}".splitlines()[0][:160]
        ACCEPTANCE.append((number, False, title, "; ".join(notes + [detail])))
        print(f"[FAIL] criterion {number}: {title} ({detail})")
        raise
    ACCEPTANCE.append((number, True, title, "; ".join(notes)))
    print(f"[PASS] criterion {number}: {title} ({'; '.join(notes)})")


def randomized(rng, spec, d, k):
    """Adapter whose factors are all non-trivial (B != 0, magnitudes perturbed)."""
    w = init_adapter(rng.normal(size=(d, k)), spec, seed=int(rng.integers(1 << 30)))
    r = spec.sub_rank
    w.A = [Tensor(rng.normal(size=(r, d)), requires_grad=True) for _ in w.A]
    w.B = [Tensor(rng.normal(size=(k, r)), requires_grad=True) for _ in w.B]
    w.magnitudes = [Tensor(rng.uniform(0.5, 2.0, size=(1, k)), requires_grad=True)
                    for _ in w.magnitudes]
    return w


def random_spec(rng, kind):
    n = int(rng.integers(1, 3)) if kind == "edora" else 1
    r = n * int(rng.integers(1, 4 // n + 1))
    return AdapterSpec(kind, r, n)


# 1 ------------------------------------------------------------------------------------


def test_criterion_1_gradient_correctness():
    with criterion(1, "tape gradients match central differences (<1e-5, <60 s)") as notes:
        rng = np.random.default_rng(2024)
        start, worst, checked = time.perf_counter(), 0.0, 0
        for case in range(30):
            kind = ("lora", "dora", "edora")[case % 3]
            spec = random_spec(rng, kind)
            d, k = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            t = 2 * int(rng.integers(1, 4))
            w = randomized(rng, spec, d, k)
            x = Tensor(rng.normal(size=(d, t)))
            probe = Tensor(rng.normal(size=(k, t)))
            for name, param in w.named_parameters():
                group = {"m": "magnitudes", "A": "A", "B": "B"}[name[0]]

                def loss(value, group=group, idx=int(name[1:])):
                    trial = w.clone()
                    getattr(trial, group)[idx] = value
                    return (adapter_forward(trial, x) * probe).sum()

                worst = max(worst, finite_diff_check(loss, param, 1e-5))
                checked += 1
        elapsed = time.perf_counter() - start
        notes.append(f"{checked} tensors, max rel err {worst:.2e}, {elapsed:.1f} s")
        assert worst < 1e-5
        assert elapsed < 60


# 2 ------------------------------------------------------------------------------------


def test_criterion_2_reduction_identity():
    with criterion(2, "single-segment EDoRA equals DoRA (<1e-12, 100 cases)") as notes:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            d, k, t = (int(v) for v in rng.integers(1, 9, size=3))
            r = int(rng.integers(1, 5))
            e = randomized(rng, AdapterSpec("edora", r, 1), d, k)
            dview = DecomposedWeight(e.base, AdapterSpec("dora", r, 1), e.A, e.B, e.magnitudes)
            x = Tensor(rng.normal(size=(d, t)))
            worst = max(worst, float(np.max(np.abs(edora_forward(e, x).data
                                                   - dora_forward(dview, x).data))))
        notes.append(f"max abs diff {worst:.1e}")
        assert worst < 1e-12


# 3 ------------------------------------------------------------------------------------


def test_criterion_3_identity_at_init():
    with criterion(3, "injection leaves default-model logits unchanged (<1e-10)") as notes:
        defaults = RunConfig()
        cfg = defaults.model_config(defaults.synth_channels, defaults.samples(),
                                    defaults.synth_classes)
        model = build(cfg, seed=0)
        rng = np.random.default_rng(3)
        batches = [rng.normal(size=(2, cfg.channels, cfg.samples)) for _ in range(10)]
        reference = [forward(model, b).data for b in batches]
        worst = 0.0
        for spec in (AdapterSpec("lora", 4), AdapterSpec("dora", 4), AdapterSpec("edora", 4, 2)):
            tuned = inject_adapters(model, spec, seed=1)
            for b, ref in zip(batches, reference):
                worst = max(worst, float(np.max(np.abs(forward(tuned, b).data - ref))))
        notes.append(f"{cfg.tokens} tokens, max abs diff {worst:.1e}")
        assert worst < 1e-10


# 4 ------------------------------------------------------------------------------------


def test_criterion_4_merge_equivalence():
    with criterion(4, "merged matrices reproduce adapter forwards (<1e-6)") as notes:
        rng = np.random.default_rng(11)
        worst = 0.0
        for spec in (AdapterSpec("lora", 4), AdapterSpec("dora", 4), AdapterSpec("edora", 4, 2)):
            w = randomized(rng, spec, 6, 5)
            merged = merge(w)
            for _ in range(10):
                x = rng.normal(size=(6, 8))
                got = adapter_forward(w, Tensor(x)).data
                if spec.kind == "edora":
                    parts = np.split(x, spec.segments, axis=-1)
                    want = np.concatenate([W.T @ p for W, p in zip(merged, parts)], axis=-1)
                else:
                    want = merged.T @ x
                worst = max(worst, float(np.max(np.abs(got - want))))
        notes.append(f"max abs diff {worst:.1e}")
        assert worst < 1e-6


# 5 ------------------------------------------------------------------------------------


def test_criterion_5_parameter_accounting():
    with criterion(5, "closed-form counts, LoRA < DoRA < EDoRA ordering and gaps") as notes:
        rng = np.random.default_rng(5)
        for _ in range(20):
            d, k = int(rng.integers(1, 65)), int(rng.integers(1, 65))
            n = int(rng.integers(2, 5))
            r = n * int(rng.integers(1, 4))
            counts = {}
            for kind, segs in (("lora", 1), ("dora", 1), ("edora", n)):
                spec = AdapterSpec(kind, r, segs)
                walk = sum(t.size for _, t in init_adapter(np.ones((d, k)), spec).named_parameters())
                assert trainable_param_count(spec, d, k) == walk, (kind, d, k, r, segs)
                counts[kind] = walk
            assert counts["lora"] < counts["dora"] < counts["edora"]
            assert counts["dora"] - counts["lora"] == k
            assert counts["edora"] - counts["dora"] == (n - 1) * k
        six = ModelConfig(channels=22, samples=1000, classes=4, encoder_layers=6)
        scale = [adapter_param_closed_form(six, AdapterSpec(kd, 4, n))
                 for kd, n in (("lora", 1), ("dora", 1), ("edora", 2))]
        notes.append("20 configs exact; 6-layer width-40 backbone gives " + "/".join(map(str, scale)))


# 6 ------------------------------------------------------------------------------------


def test_criterion_6_trainable_fraction(capsys):
    with criterion(6, "adapters_only on the default config trains < 5% (adapter share)") as notes:
        report = params_report(RunConfig())
        assert main(["params"]) == 0
        printed = capsys.readouterr().out
        assert "adapter_fraction" in printed and "trainable_fraction" in printed
        notes.append(f"adapter {report['adapter']}/{report['total']} = "
                     f"{report['adapter_fraction']:.4f}; incl. re-initialized head "
                     f"{report['trainable_fraction']:.4f}")
        assert report["adapter"] == report["adapter_closed_form"]
        assert report["adapter_fraction"] < 0.05


# 7 ------------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_desk_transfer():
    with criterion(7, "EDoRA >= frozen-encoder baseline + 5 points, 5-seed median, < 10 min") as notes:
        start = time.perf_counter()
        cfg = load_config(DESK)
        source, target = load_domain(cfg, "source"), load_domain(cfg, "target")
        assert (source.num_classes, source.channels, len(source)) == (3, 8, 300)
        model = build(cfg.model_config(source.channels, source.samples, source.num_classes),
                      cfg.seed)
        model, hist = pretrain(model, source, cfg.optim("pretrain"), cfg.holdout_fraction, cfg.seed)
        train_acc = hist[-1]["train_acc"]
        spec = AdapterSpec("edora", 4, 2)
        edora_acc, base_acc = [], []
        for seed in range(5):
            opt = cfg.optim("finetune", seed=seed)
            e = finetune(model, target, spec, FreezePolicy(), opt, seed=seed)
            b = finetune(model, target, None, FreezePolicy(), opt, seed=seed)
            edora_acc.append(e.history[-1]["holdout_acc"])
            base_acc.append(b.history[-1]["holdout_acc"])
        elapsed = time.perf_counter() - start
        med_e, med_b = float(np.median(edora_acc)), float(np.median(base_acc))
        notes.append(f"pretrain train acc {train_acc:.3f}; EDoRA {np.round(edora_acc, 3).tolist()} "
                     f"median {med_e:.3f}; baseline {np.round(base_acc, 3).tolist()} "
                     f"median {med_b:.3f}; {elapsed:.0f} s")
        assert train_acc >= 0.95
        assert med_e >= med_b + 0.05
        assert elapsed < 600


# 8 ------------------------------------------------------------------------------------


def _magnitude(sos, f, fs):
    z1 = np.exp(-2j * np.pi * f / fs)
    h = 1.0
    for b0, b1, b2, a0, a1, a2 in sos:
        h *= (b0 + b1 * z1 + b2 * z1 ** 2) / (a0 + a1 * z1 + a2 * z1 ** 2)
    return abs(h)


def _amplitude(y, f, fs, skip):
    t = np.arange(y.size) / fs
    sl = slice(skip, y.size - skip)
    basis = np.stack([np.sin(2 * np.pi * f * t[sl]), np.cos(2 * np.pi * f * t[sl])], axis=1)
    coef, *_ = np.linalg.lstsq(basis, y[sl], rcond=None)
    return float(np.hypot(*coef))


def test_criterion_8_signal_chain():
    with criterion(8, "bandpass response, 1 Hz rejection, zscore and resample post-conditions") as notes:
        fs = 250.0
        sos = design_bandpass(fs, 4.0, 40.0, 4)
        t = np.arange(int(60 * fs)) / fs
        errs = []
        for f in (10.0, 20.0, 35.0):
            y = butterworth_bandpass(np.sin(2 * np.pi * f * t), fs, 4.0, 40.0, 4)
            expected = _magnitude(sos, f, fs) ** 2  # forward-backward squares |H|
            errs.append(abs(_amplitude(y, f, fs, int(10 * fs)) / expected - 1))
        assert max(errs) < 0.02
        y1 = butterworth_bandpass(np.sin(2 * np.pi * t), fs, 4.0, 40.0, 4)
        a1, bound = _amplitude(y1, 1.0, fs, int(15 * fs)), _magnitude(sos, 1.0, fs) ** 2
        assert a1 < bound * 1.02 + 1e-6 and a1 < 0.1
        np.testing.assert_allclose(zscore([1.0, 2.0, 3.0]), [-np.sqrt(1.5), 0, np.sqrt(1.5)],
                                   rtol=1e-7)
        assert np.all(zscore(np.full((3, 40), 2.7)) == 0)
        z = zscore(np.random.default_rng(0).normal(3, 4, size=(5, 4, 500)))
        assert np.max(np.abs(z.mean(axis=-1))) < 1e-9
        assert np.max(np.abs(z.std(axis=-1) - 1)) < 1e-6
        x = np.random.default_rng(1).normal(size=(2, 4003))
        np.testing.assert_array_equal(resample(x, 250, 250), x)
        assert resample(x, 1000, 250).shape == (2, 1000)
        tt = np.arange(4000) / 1000.0
        ideal = np.sin(2 * np.pi * 5 * np.arange(1000) / 250.0)
        corr = np.corrcoef(resample(np.sin(2 * np.pi * 5 * tt), 1000, 250), ideal)[0, 1]
        assert corr > 0.99
        notes.append(f"max passband error {max(errs):.2%}; 1 Hz amplitude {a1:.2e} "
                     f"(predicted |H|^2 {bound:.2e}); resample corr {corr:.5f}")


# 9 ------------------------------------------------------------------------------------


def _pairs_auc(s, positive):
    pos, neg = s[positive], s[~positive]
    return sum((p > q) + 0.5 * (p == q) for p in pos for q in neg) / (len(pos) * len(neg))


def test_criterion_9_metric_oracles():
    with criterion(9, "kappa hand cases, all-pairs AUC oracle, accuracy == trace/n") as notes:
        cases = [(np.diag([12, 9, 4]), 1.0), (np.array([[25, 25], [25, 25]]), 0.0),
                 (np.array([[45, 5], [15, 35]]), 0.6)]
        for cm, want in cases:
            n = cm.sum()
            p_o = np.trace(cm) / n
            p_e = sum(cm[i].sum() * cm[:, i].sum() for i in range(len(cm))) / n ** 2
            assert abs(cohen_kappa(cm) - want) < 1e-12
            assert abs(cohen_kappa(cm) - (p_o - p_e) / (1 - p_e)) < 1e-12
        worst = 0.0
        for case in range(50):
            rng = np.random.default_rng(100 + case)
            K = int(rng.integers(2, 5))
            n = int(rng.integers(K + 2, 14))
            y = np.concatenate([np.arange(K), rng.integers(0, K, n - K)])
            s = rng.integers(0, 4, size=(n, K)).astype(float)
            macro, per_class, _ = auc_ovr(s, y)
            oracle = [_pairs_auc(s[:, c], y == c) for c in range(K)]
            worst = max(worst, abs(macro - np.mean(oracle)),
                        *(abs(per_class[c] - oracle[c]) for c in range(K)))
            rep = report_from_scores(s, y)
            cm = np.array(rep.confusion)
            assert rep.accuracy == np.trace(cm) / cm.sum()
        assert worst < 1e-12
        notes.append(f"3 kappa cases exact; AUC max diff {worst:.1e} over 50 cases")


# 10 ------------------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    with criterion(10, "identical RunConfig gives byte-identical history and checkpoints") as notes:
        quick = ["--pretrain-epochs", "3", "--finetune-epochs", "2", "--config", str(DESK)]
        for run in ("a", "b"):
            out = ["--out", str(tmp_path / run)]
            assert main(["pretrain", *out, *quick]) == 0
            assert main(["finetune", *out, *quick]) == 0
        files = ["pretrain/history.jsonl", "pretrain/model.edck", "finetune/edora/history.jsonl",
                 "finetune/edora/model.edck", "finetune/edora/adapters.edck",
                 "finetune/edora/param_report.json", "finetune/edora/report.jsonl"]
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        notes.append(f"{len(files)} artifacts identical across two runs")
