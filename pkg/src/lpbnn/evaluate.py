"""Evaluation of trained models on the test, OOD and corrupted splits."""

from __future__ import annotations

import numpy as np

from .data import Datasets
from .metrics import MetricsReport, PredictionBatch, compute_report
from .models import DeepEnsemble, Network


def passes_for(model, n_extra_samples: int) -> int:
    """Stochastic models repeat the pass to enlarge the ensemble; others run once."""
    if isinstance(model, DeepEnsemble) or model.kind in ("deterministic", "batchensemble"):
        return 1
    return model.eval_samples * (1 + n_extra_samples)


def predict_split(model, x: np.ndarray, seed: int, split: str, n_extra_samples: int = 0) -> np.ndarray:
    return model.predict(x, seed, ("eval", split), passes_for(model, n_extra_samples))


def evaluate(model: Network | DeepEnsemble, data: Datasets, n_extra_samples: int = 0, seed: int = 1,
             metadata: dict | None = None) -> tuple[list[PredictionBatch], MetricsReport]:
    """Run every split through all members and compute the full metric report."""
    for split in [data.test, data.ood, *data.corrupted.values()]:
        if len(split) and split.x.shape[1] != model.layers[0].shape[0]:
            raise ValueError(
                f"input width {split.x.shape[1]} does not match checkpoint width {model.layers[0].shape[0]}"
            )
    batches = [PredictionBatch(predict_split(model, data.test.x, seed, "test", n_extra_samples), data.test.y)]
    if len(data.ood):
        batches.append(PredictionBatch(predict_split(model, data.ood.x, seed, "ood", n_extra_samples),
                                       None, ood=True))
    for sev, split in sorted(data.corrupted.items()):
        probs = predict_split(model, split.x, seed, f"corrupt_{sev}", n_extra_samples)
        batches.append(PredictionBatch(probs, split.y, severity=sev))
    meta = {"model_kind": model.kind, "eval_seed": seed, "n_extra_samples": n_extra_samples}
    meta.update(metadata or {})
    return batches, compute_report(batches, meta)
