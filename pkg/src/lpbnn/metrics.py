"""Ensemble prediction, calibration, OOD-detection and diversity metrics.

OOD scores follow the "higher means more in-distribution" convention; the
harness uses the maximum class probability of the ensemble mean.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ECE_BINS = 15


@dataclass
class PredictionBatch:
    """Per-member class probabilities ``probs`` of shape (J, N, C)."""

    probs: np.ndarray
    labels: np.ndarray | None = None
    ood: bool = False
    severity: int = 0
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 3:
            raise ValueError(f"probs must be (J, N, C), got shape {self.probs.shape}")
        J, N, C = self.probs.shape
        if J < 1 or C < 2:
            raise ValueError(f"need J >= 1 and C >= 2, got J={J}, C={C}")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=2) - 1.0) > 1e-8):
            raise ValueError("every member row of probs must be a distribution (sum 1 within 1e-8)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (N,):
                raise ValueError(f"labels must have shape ({N},), got {self.labels.shape}")
        if self.sample_ids is None:
            self.sample_ids = np.arange(N)

    @property
    def J(self) -> int:
        return self.probs.shape[0]

    @property
    def N(self) -> int:
        return self.probs.shape[1]

    @property
    def C(self) -> int:
        return self.probs.shape[2]


@dataclass
class MetricsReport:
    metrics: dict[str, float]
    metadata: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        clean, flags = {}, list(self.flags)
        for k, v in self.metrics.items():
            if v is None or not math.isfinite(v):
                clean[k] = None
                flags.append(f"{k}: non-finite value {v!r} written as null")
            else:
                clean[k] = float(v)
        return {"metrics": clean, "metadata": self.metadata, "flags": flags}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ basics


def ensemble_predict(batch: PredictionBatch) -> np.ndarray:
    return batch.probs.mean(axis=0)


def accuracy(probs_mean: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(probs_mean, axis=1) == np.asarray(labels)))


def max_class_probability(probs_mean: np.ndarray) -> np.ndarray:
    return np.asarray(probs_mean).max(axis=1)


def predictive_entropy(probs_mean: np.ndarray) -> np.ndarray:
    p = np.asarray(probs_mean, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=1)


def ece(probs_mean: np.ndarray, labels, M: int = ECE_BINS) -> float:
    """Expected calibration error on M equal-width, right-closed bins of (0, 1]."""
    if M < 1:
        raise ValueError("M must be >= 1")
    probs_mean = np.asarray(probs_mean)
    labels = np.asarray(labels)
    N = probs_mean.shape[0]
    if N < 1:
        raise ValueError("ece needs at least one sample")
    conf = probs_mean.max(axis=1)
    correct = (probs_mean.argmax(axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, M + 1)
    bins = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, M - 1)
    total = 0.0
    for b in range(M):
        sel = bins == b
        n = int(sel.sum())
        if n:
            total += (n / N) * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


# --------------------------------------------------------------------- OOD


def _check_scores(scores_in, scores_out) -> tuple[np.ndarray, np.ndarray]:
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ValueError("OOD metrics need non-empty in- and out-distribution score sets")
    return s_in, s_out


def auroc(scores_in, scores_out) -> float:
    """P(score_in > score_out) + 1/2 P(tie), exact (Mann-Whitney)."""
    s_in, s_out = _check_scores(scores_in, scores_out)
    srt = np.sort(s_out)
    below = np.searchsorted(srt, s_in, side="left")
    ties = np.searchsorted(srt, s_in, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (s_in.size * s_out.size))


def aupr(scores_in, scores_out) -> float:
    """Step-wise area under precision-recall with in-distribution as positives."""
    s_in, s_out = _check_scores(scores_in, scores_out)
    scores = np.concatenate([s_in, s_out])
    pos = np.concatenate([np.ones(s_in.size), np.zeros(s_out.size)])
    order = np.argsort(-scores, kind="mergesort")
    scores, pos = scores[order], pos[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(1.0 - pos)
    # keep the last index of each run of tied scores
    last = np.r_[np.diff(scores) != 0, True]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / s_in.size
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def fpr_at_95_tpr(scores_in, scores_out, tpr: float = 0.95) -> float:
    """FPR at the largest threshold keeping at least 95% of in-distribution scores."""
    s_in, s_out = _check_scores(scores_in, scores_out)
    n = s_in.size
    keep = math.ceil(round(tpr * n, 9))
    threshold = np.sort(s_in)[::-1][keep - 1]
    return float(np.mean(s_out >= threshold))


# ---------------------------------------------------------------- corrupted


def corrupted_metrics(batches: Sequence[PredictionBatch]) -> tuple[float, float]:
    """(cA, cE): unweighted means over severity groups of accuracy and ECE."""
    groups: dict[int, list[PredictionBatch]] = {}
    for b in batches:
        if b.severity < 1 or b.labels is None:
            raise ValueError("corrupted batches need severity >= 1 and labels")
        groups.setdefault(int(b.severity), []).append(b)
    if not groups:
        raise ValueError("no corrupted batches given")
    accs, eces = [], []
    for sev in sorted(groups):
        probs = np.concatenate([ensemble_predict(b) for b in groups[sev]])
        labels = np.concatenate([b.labels for b in groups[sev]])
        accs.append(accuracy(probs, labels))
        eces.append(ece(probs, labels))
    return float(np.mean(accs)), float(np.mean(eces))


# ---------------------------------------------------------------- diversity


@dataclass
class DiversityStats:
    ratio_error: float
    q_statistic: float
    corr_coeff: float
    n_pairs: int
    flags: list[str] = field(default_factory=list)


def pair_counts(correct_a, correct_b) -> tuple[int, int, int, int]:
    """(N11, N00, N10, N01): both right, both wrong, only b wrong, only a wrong."""
    a = np.asarray(correct_a, dtype=bool)
    b = np.asarray(correct_b, dtype=bool)
    return (int(np.sum(a & b)), int(np.sum(~a & ~b)), int(np.sum(a & ~b)), int(np.sum(~a & b)))


def diversity_stats(member_correct) -> DiversityStats:
    """Mean pairwise ratio-error, Q-statistic and error correlation over members."""
    mc = np.asarray(member_correct, dtype=bool)
    if mc.ndim != 2 or mc.shape[0] < 2:
        raise ValueError("diversity_stats needs a (J, N) correctness matrix with J >= 2")
    ratios, qs, corrs, flags = [], [], [], []
    for i, j in itertools.combinations(range(mc.shape[0]), 2):
        n11, n00, n10, n01 = pair_counts(mc[i], mc[j])
        if n00 == 0:
            flags.append(f"pair ({i},{j}): no shared errors, ratio-error is +inf and excluded")
        else:
            ratios.append((n10 + n01) / n00)
        den = n11 * n00 + n10 * n01
        if den == 0:
            flags.append(f"pair ({i},{j}): Q denominator is zero, contributes 0")
            qs.append(0.0)
        else:
            qs.append((n11 * n00 - n10 * n01) / den)
        ea, eb = ~mc[i], ~mc[j]
        if ea.all() or (~ea).all() or eb.all() or (~eb).all():
            flags.append(f"pair ({i},{j}): constant error vector, correlation contributes 0")
            corrs.append(0.0)
        else:
            corrs.append(float(np.corrcoef(ea.astype(float), eb.astype(float))[0, 1]))
    return DiversityStats(
        ratio_error=float(np.mean(ratios)) if ratios else math.inf,
        q_statistic=float(np.mean(qs)),
        corr_coeff=float(np.mean(corrs)),
        n_pairs=len(qs),
        flags=flags,
    )


def member_correctness(batch: PredictionBatch) -> np.ndarray:
    if batch.labels is None:
        raise ValueError("member correctness needs labels")
    return batch.probs.argmax(axis=2) == batch.labels[None, :]


# ------------------------------------------------------------------ report


def ood_metrics(batch_in: PredictionBatch, batch_out: PredictionBatch) -> dict[str, float]:
    s_in = max_class_probability(ensemble_predict(batch_in))
    s_out = max_class_probability(ensemble_predict(batch_out))
    return {
        "auroc": auroc(s_in, s_out),
        "aupr": aupr(s_in, s_out),
        "fpr95": fpr_at_95_tpr(s_in, s_out),
    }


def compute_report(batches: Iterable[PredictionBatch], metadata: dict | None = None) -> MetricsReport:
    """Full metric set from a mix of test (ood=False, severity 0), OOD and corrupted batches."""
    batches = list(batches)
    test = [b for b in batches if not b.ood and b.severity == 0]
    ood = [b for b in batches if b.ood]
    corrupted = [b for b in batches if not b.ood and b.severity > 0]
    metrics: dict[str, float] = {}
    flags: list[str] = []
    metadata = dict(metadata or {})

    if not test:
        raise ValueError("report needs an in-distribution test batch")
    tb = merge_batches(test)
    metadata.setdefault("J", tb.J)
    pm = ensemble_predict(tb)
    metrics["accuracy"] = accuracy(pm, tb.labels)
    metrics["ece"] = ece(pm, tb.labels)
    metrics["nll"] = float(-np.mean(np.log(np.maximum(pm[np.arange(tb.N), tb.labels], 1e-300))))
    metrics["entropy_test"] = float(predictive_entropy(pm).mean())
    metrics["member_entropy_test"] = float(np.mean([predictive_entropy(p).mean() for p in tb.probs]))

    if ood:
        ob = merge_batches(ood)
        metrics.update(ood_metrics(tb, ob))
        metrics["entropy_ood"] = float(predictive_entropy(ensemble_predict(ob)).mean())

    if corrupted:
        cA, cE = corrupted_metrics(corrupted)
        metrics["cA"], metrics["cE"] = cA, cE
        for sev in sorted({b.severity for b in corrupted}):
            group = merge_batches([b for b in corrupted if b.severity == sev])
            gp = ensemble_predict(group)
            metrics[f"accuracy_s{sev}"] = accuracy(gp, group.labels)
            metrics[f"ece_s{sev}"] = ece(gp, group.labels)
            metrics[f"entropy_s{sev}"] = float(predictive_entropy(gp).mean())

    if tb.J >= 2:
        div = diversity_stats(member_correctness(tb))
        metrics["ratio_error"] = div.ratio_error
        metrics["q_statistic"] = div.q_statistic
        metrics["corr_coeff"] = div.corr_coeff
        flags.extend(div.flags)
        if corrupted:
            cb = merge_batches(corrupted)
            cdiv = diversity_stats(member_correctness(cb))
            metrics["ratio_error_corrupted"] = cdiv.ratio_error
            metrics["q_statistic_corrupted"] = cdiv.q_statistic
            metrics["corr_coeff_corrupted"] = cdiv.corr_coeff
    else:
        flags.append("single member: diversity statistics skipped")
    return MetricsReport(metrics, metadata, flags)


def merge_batches(batches: Sequence[PredictionBatch]) -> PredictionBatch:
    if len(batches) == 1:
        return batches[0]
    labels = None
    if all(b.labels is not None for b in batches):
        labels = np.concatenate([b.labels for b in batches])
    return PredictionBatch(
        np.concatenate([b.probs for b in batches], axis=1),
        labels,
        ood=batches[0].ood,
        severity=batches[0].severity,
        sample_ids=np.concatenate([b.sample_ids for b in batches]),
    )


# ------------------------------------------------------------ dump format


def write_prediction_dump(path, batches: Iterable[PredictionBatch]) -> None:
    """CSV ``member,sample_id,label,ood,severity,p_0,...``; absent labels are empty."""
    batches = list(batches)
    C = batches[0].C
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["member", "sample_id", "label", "ood", "severity"] + [f"p_{c}" for c in range(C)])
        for b in batches:
            for j in range(b.J):
                for n in range(b.N):
                    label = "" if b.labels is None else int(b.labels[n])
                    row = [j, int(b.sample_ids[n]), label, int(b.ood), int(b.severity)]
                    w.writerow(row + [repr(float(p)) for p in b.probs[j, n]])


def read_prediction_dump(path) -> list[PredictionBatch]:
    """Parse a dump back into one batch per (ood, severity) group, in file order."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:5] != ["member", "sample_id", "label", "ood", "severity"]:
            raise ValueError(f"{path}: unexpected prediction dump header {header[:5]}")
        C = len(header) - 5
        groups: dict[tuple[int, int], dict] = {}
        for row in reader:
            if not row:
                continue
            j, sid = int(row[0]), int(row[1])
            key = (int(row[3]), int(row[4]))
            g = groups.setdefault(key, {"rows": {}, "labels": {}})
            g["rows"][(j, sid)] = [float(x) for x in row[5:5 + C]]
            if row[2] != "":
                g["labels"][sid] = int(row[2])
    out = []
    for (ood, sev), g in groups.items():
        members = sorted({j for j, _ in g["rows"]})
        sids = list(dict.fromkeys(s for _, s in g["rows"]))
        probs = np.array([[g["rows"][(j, s)] for s in sids] for j in members])
        labels = np.array([g["labels"][s] for s in sids]) if len(g["labels"]) == len(sids) else None
        out.append(PredictionBatch(probs, labels, ood=bool(ood), severity=sev, sample_ids=np.array(sids)))
    return out
