"""Seeded mini-batch SGD for every model family."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, make_rng
from .config import ExperimentConfig
from .data import Datasets, generate_dataset
from .models import DeepEnsemble, Network
from .objectives import LossBreakdown, elbo_bnn_loss, lpbnn_total_loss, mle_map_loss

log = logging.getLogger(__name__)

LOSS_FIELDS = ("nll", "weight_decay", "kl_total", "recon_total", "total")


class TrainingError(RuntimeError):
    pass


@dataclass
class RunRecord:
    config: ExperimentConfig
    model: Network | DeepEnsemble
    history: list[dict] = field(default_factory=list)
    divergence_epoch: int | None = None
    members: list[RunRecord] = field(default_factory=list)
    checkpoint_path: str | None = None

    @property
    def diverged(self) -> bool:
        return self.divergence_epoch is not None


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LPBNN_THREADS", "1")))
    except ValueError:
        return 1


def learning_rate_at(cfg: ExperimentConfig, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``; decays after each listed epoch."""
    n_decays = sum(1 for d in cfg.lr_decay_epochs if epoch > d)
    return cfg.learning_rate * cfg.lr_decay_ratio ** n_decays


def member_slices(batch: int, J: int) -> np.ndarray:
    """Contiguous equal slices: rows ``[j*B/J, (j+1)*B/J)`` go to member j."""
    return np.repeat(np.arange(J), batch // J)


def batch_loss(model: Network, cfg: ExperimentConfig, x: Tensor, y: np.ndarray, member_of,
               stream, n_minibatches: int) -> LossBreakdown:
    """Forward pass plus the family's objective, recorded on the active tape."""
    res = model.forward(x, member_of, cfg.seed, stream)
    groups = [g for g in model.param_groups(cfg) if g.trainable]
    if model.kind == "lpbnn":
        return lpbnn_total_loss(res.logits, y, res.layer_terms, groups, from_logits=True)
    if model.kind == "meanfield":
        return elbo_bnn_loss(res.logits, y, res.kl_weights, n_minibatches, groups, from_logits=True)
    return mle_map_loss(res.logits, y, groups, from_logits=True)


def sgd_step(model: Network, cfg: ExperimentConfig, x: np.ndarray, y: np.ndarray, lr: float,
             stream, n_minibatches: int) -> LossBreakdown:
    """One plain SGD step. Raises ``NonFiniteError`` without touching the weights
    when the loss or an updated weight is non-finite."""
    J = model.J
    xt = Tensor(x)
    with Tape() as tape:
        br = batch_loss(model, cfg, xt, y, member_slices(x.shape[0], J), stream, n_minibatches)
    if not np.isfinite(br.total):
        raise ad.NonFiniteError("training loss is non-finite")
    tensors = [t for g in model.param_groups(cfg) if g.trainable for t in g.params]
    if br.objective is not None and br.objective.requires_grad:
        ad.backward(tape, br.objective)
    updates = []
    for t in tensors:
        if t.grad is None:
            continue
        new = t.data - lr * t.grad
        if not np.all(np.isfinite(new)):
            raise ad.NonFiniteError("parameter update is non-finite")
        updates.append((t, new))
    for t, new in updates:
        t.data[...] = new
    return br


def train(cfg: ExperimentConfig, data: Datasets | None = None) -> RunRecord:
    cfg.validate()
    if data is None:
        data = generate_dataset(cfg.dataset, cfg.seed)
    if cfg.model_kind == "deepensemble":
        return _train_deep_ensemble(cfg, data)
    return _train_single(cfg, data)


def _train_single(cfg: ExperimentConfig, data: Datasets) -> RunRecord:
    x_train, y_train = data.train.x, data.train.y
    if y_train is None:
        raise TrainingError("training split has no labels")
    n, B = len(data.train), cfg.batch_size
    n_batches = n // B
    if cfg.epochs > 0 and n_batches == 0:
        raise TrainingError(f"batch_size {B} exceeds the {n} training samples")
    model = Network.build(cfg, data.input_dim, data.n_classes)
    record = RunRecord(cfg, model)

    for epoch in range(1, cfg.epochs + 1):
        lr = learning_rate_at(cfg, epoch)
        perm = make_rng(cfg.seed, "shuffle", epoch).permutation(n)
        sums = dict.fromkeys(LOSS_FIELDS, 0.0)
        try:
            # overflow is caught as NonFiniteError and recorded as divergence
            with np.errstate(over="ignore", invalid="ignore"):
                for b in range(n_batches):
                    idx = perm[b * B:(b + 1) * B]
                    br = sgd_step(model, cfg, x_train[idx], y_train[idx], lr, ("train", epoch, b), n_batches)
                    for k, v in br.as_dict().items():
                        sums[k] += v
        except ad.NonFiniteError as err:
            log.info("diverged at epoch %d: %s", epoch, err)
            record.divergence_epoch = epoch
            break
        entry = {"epoch": epoch, "lr": lr}
        entry.update({k: v / n_batches for k, v in sums.items()})
        record.history.append(entry)
    return record


def _member_config(cfg: ExperimentConfig, j: int) -> ExperimentConfig:
    return cfg.replace(model_kind="deterministic", seed=cfg.seed + j)


def _train_member(args) -> RunRecord:
    cfg, data = args
    return _train_single(cfg, data)


def _train_deep_ensemble(cfg: ExperimentConfig, data: Datasets) -> RunRecord:
    jobs = [(_member_config(cfg, j), data) for j in range(cfg.J)]
    workers = min(worker_count(), cfg.J)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            members = list(pool.map(_train_member, jobs))
    else:
        members = [_train_member(job) for job in jobs]
    record = RunRecord(cfg, DeepEnsemble([m.model for m in members]), members=members)
    epochs = min(len(m.history) for m in members)
    for e in range(epochs):
        entry = {"epoch": e + 1, "lr": members[0].history[e]["lr"]}
        for k in LOSS_FIELDS:
            entry[k] = float(np.mean([m.history[e][k] for m in members]))
        record.history.append(entry)
    diverged = [m.divergence_epoch for m in members if m.divergence_epoch is not None]
    record.divergence_epoch = min(diverged) if diverged else None
    return record
