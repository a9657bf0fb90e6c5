"""Classification metrics and evaluation reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .numerics import DimensionError, Tensor

__all__ = [
    "EvalReport",
    "UndefinedAUCError",
    "auc_ovr",
    "auc_ovr_macro",
    "chance_agreement",
    "cohen_kappa",
    "confusion",
    "evaluate",
    "report_from_scores",
]


class UndefinedAUCError(ValueError):
    pass


def confusion(true_labels, pred_labels, K: int) -> np.ndarray:
    """``K x K`` counts, rows = true class, columns = predicted class."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"{t.size} true labels vs {p.size} predictions")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def chance_agreement(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    return float(np.dot(cm.sum(axis=1), cm.sum(axis=0)) / (n * n))


def cohen_kappa(cm) -> float:
    """``(p_o - p_e) / (1 - p_e)``; defined as 0 when ``p_e == 1``."""
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    if n <= 0:
        raise ValueError("kappa needs at least one trial")
    p_o = np.trace(cm) / n
    p_e = chance_agreement(cm)
    if p_e == 1.0:
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def auc_ovr(scores, true_labels) -> tuple[float, dict[int, float], list[int]]:
    """Per-class one-vs-rest AUC via the rank-sum statistic (ties count 1/2).

    Returns ``(macro, per_class, skipped)``; classes without positives or
    without negatives are skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != y.size:
        raise DimensionError(f"scores {scores.shape} do not match {y.size} labels")
    if np.unique(y).size < 2:
        raise UndefinedAUCError("AUC is undefined when only one class is present")
    per_class, skipped = {}, []
    for c in range(scores.shape[1]):
        pos = y == c
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            skipped.append(c)
            continue
        ranks = rankdata(scores[:, c])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        per_class[c] = float(u / (n_pos * n_neg))
    macro = float(np.mean(list(per_class.values())))
    return macro, per_class, skipped


def auc_ovr_macro(scores, true_labels) -> float:
    return auc_ovr(scores, true_labels)[0]


@dataclass
class EvalReport:
    accuracy: float
    kappa: float
    confusion: list[list[int]]
    auc_ovr_macro: float
    precision: list[float]
    recall: list[float]
    n: int
    class_names: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    def to_text(self) -> str:
        names = self.class_names or [str(i) for i in range(len(self.confusion))]
        width = max(8, *(len(s) for s in names)) + 2
        lines = [
            f"trials      {self.n}",
            f"accuracy    {self.accuracy:.4f}",
            f"kappa       {self.kappa:.4f}",
            f"auc (ovr)   {self.auc_ovr_macro:.4f}",
            "",
            "true \\ pred".ljust(width) + "".join(s.rjust(width) for s in names),
        ]
        for name, row in zip(names, self.confusion):
            lines.append(name.ljust(width) + "".join(str(v).rjust(width) for v in row))
        lines.append("")
        lines.append("class".ljust(width) + "precision".rjust(width) + "recall".rjust(width))
        for name, p, r in zip(names, self.precision, self.recall):
            lines.append(name.ljust(width) + f"{p:.4f}".rjust(width) + f"{r:.4f}".rjust(width))
        if self.flags:
            lines.append("")
            lines.append("flags: " + ", ".join(self.flags))
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        return "\n".join(",".join(str(v) for v in row) for row in self.confusion) + "\n"


def report_from_scores(scores, true_labels, class_names=None) -> EvalReport:
    """Report for class scores ``[n, K]``; ties in argmax go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64)
    if y.size == 0:
        raise ValueError("cannot evaluate an empty trial set")
    K = scores.shape[1]
    pred = scores.argmax(axis=1)
    cm = confusion(y, pred, K)
    n = int(cm.sum())
    flags = []
    if chance_agreement(cm) == 1.0:
        flags.append("kappa_degenerate")
    try:
        auc, _, skipped = auc_ovr(scores, y)
        if skipped:
            flags.append("auc_skipped_classes=" + ",".join(map(str, skipped)))
    except UndefinedAUCError:
        auc = float("nan")
        flags.append("auc_undefined")
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    diag = np.diag(cm).astype(np.float64)
    precision = np.divide(diag, col, out=np.zeros(K), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros(K), where=row > 0)
    return EvalReport(
        accuracy=float(np.trace(cm) / n),
        kappa=cohen_kappa(cm),
        confusion=cm.tolist(),
        auc_ovr_macro=auc,
        precision=precision.tolist(),
        recall=recall.tolist(),
        n=n,
        class_names=list(class_names or []),
        flags=flags,
    )


def evaluate(model, ts) -> EvalReport:
    from .train import predict_logits

    if len(ts) == 0:
        raise ValueError("cannot evaluate an empty trial set")
    cfg = model.config
    if (ts.channels, ts.samples, ts.num_classes) != (cfg.channels, cfg.samples, cfg.classes):
        raise DimensionError(
            f"trial set [{ts.channels} x {ts.samples}, {ts.num_classes} classes] does not match "
            f"model [{cfg.channels} x {cfg.samples}, {cfg.classes} classes]")
    probs = nx.softmax(Tensor(predict_logits(model, ts.data)), axis=-1).data
    return report_from_scores(probs, ts.labels, ts.class_names)
