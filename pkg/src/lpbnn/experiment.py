"""End-to-end runs, the learning-rate stability sweep and covariance checks."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .autodiff import make_rng
from .config import ExperimentConfig, dump_config, load_config
from .covariance import (
    decoder_covariance,
    empirical_weight_covariance,
    member_weight_spectrum,
    rank_approx_error,
    spectrum_summary,
)
from .data import Datasets, generate_dataset, write_dataset_dir
from .evaluate import evaluate, predict_split
from .layers import lpbnn_encode
from .metrics import accuracy, write_prediction_dump
from .models import DeepEnsemble, Network
from .train import RunRecord, train, worker_count


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ExperimentError:
        raise
    except Exception as err:  # noqa: BLE001 -- every stage failure is reported with its tag
        raise ExperimentError(name, f"{type(err).__name__}: {err}") from err


def save_model(record: RunRecord, ckpt_dir: Path) -> list[Path]:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(record.model, DeepEnsemble):
        paths = []
        for j, net in enumerate(record.model.members):
            p = ckpt_dir / f"member_{j}.ckpt"
            net.save(p, {"seed": record.config.seed + j})
            paths.append(p)
        return paths
    p = ckpt_dir / "model.ckpt"
    record.model.save(p, {"seed": record.config.seed})
    return [p]


def write_history(path: Path, history: list[dict]) -> None:
    fields = ["epoch", "lr", "nll", "weight_decay", "kl_total", "recon_total", "total"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in fields})


def _unique_dir(root: Path, stem: str) -> Path:
    out = root / stem
    k = 1
    while out.exists():
        out = root / f"{stem}_{k}"
        k += 1
    out.mkdir(parents=True)
    return out


def run_experiment(config_path, seed: int | None = None, out_dir="runs") -> Path:
    """generate -> train -> evaluate -> write artifacts. Returns the artifact directory."""
    cfg = _stage("config", load_config, config_path)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return run_config(cfg, out_dir, config_path=str(config_path))


def run_config(cfg: ExperimentConfig, out_dir="runs", config_path: str | None = None) -> Path:
    data = _stage("generate", generate_dataset, cfg.dataset, cfg.seed)
    record = _stage("train", train, cfg, data)

    stamp = datetime.now(timezone.utc)
    out = _unique_dir(Path(out_dir), f"{cfg.model_kind}_{stamp:%Y%m%d-%H%M%S}_{cfg.config_hash()[:8]}")
    meta = {
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "dataset": f"{cfg.dataset.kind}:{cfg.seed}",
        "J": cfg.ensemble_size,
        "divergence_epoch": record.divergence_epoch,
        "timestamp": stamp.isoformat(),
    }
    batches, report = _stage("evaluate", evaluate, record.model, data, cfg.extra_samples, cfg.eval_seed, meta)

    def write():
        (out / "config.txt").write_text(dump_config(cfg))
        manifest = {
            "config": cfg.to_dict(),
            "config_path": config_path,
            "seed": cfg.seed,
            "code_version": __version__,
            "timestamp": stamp.isoformat(),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        write_dataset_dir(out / "data", data)
        record.checkpoint_path = str(out / "checkpoints")
        save_model(record, out / "checkpoints")
        write_history(out / "loss_history.csv", record.history)
        write_prediction_dump(out / "predictions.csv", batches)
        report.to_json(out / "metrics.json")

    _stage("report", write)
    return out


# ---------------------------------------------------------------- sweep


@dataclass
class SweepRow:
    model_kind: str
    learning_rate: float
    seed: int
    final_accuracy: float
    divergence_epoch: int | None


def _sweep_job(args) -> SweepRow:
    cfg, data = args
    record = train(cfg, data)
    probs = predict_split(record.model, data.test.x, cfg.eval_seed, "test")
    acc = accuracy(probs.mean(axis=0), data.test.y)
    return SweepRow(cfg.model_kind, cfg.learning_rate, cfg.seed, acc, record.divergence_epoch)


def stability_sweep(base: ExperimentConfig, learning_rates: Sequence[float],
                    kinds: Sequence[str] = ("meanfield", "lpbnn"),
                    seeds: Sequence[int] | None = None) -> list[SweepRow]:
    """Train each kind at each learning rate with everything else fixed."""
    if not learning_rates:
        raise ValueError("learning_rates must be non-empty")
    seeds = [base.seed] if seeds is None else list(seeds)
    jobs = []
    data_cache: dict[int, Datasets] = {}
    for seed in seeds:
        data = data_cache.setdefault(seed, generate_dataset(base.dataset, seed))
        for lr in learning_rates:
            for kind in kinds:
                jobs.append((base.replace(model_kind=kind, learning_rate=float(lr), seed=seed), data))
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_job, jobs))
    return [_sweep_job(j) for j in jobs]


def sweep_table(rows: Sequence[SweepRow]) -> str:
    lines = ["model_kind,learning_rate,seed,final_accuracy,divergence_epoch"]
    for r in rows:
        div = "None" if r.divergence_epoch is None else str(r.divergence_epoch)
        lines.append(f"{r.model_kind},{r.learning_rate!r},{r.seed},{r.final_accuracy:.4f},{div}")
    return "\n".join(lines)


# ------------------------------------------------------------- covcheck


def covariance_check(model: Network, n_samples: int = 100_000, seed: int = 0) -> dict:
    """Per-layer covariance records for LP-BNN (latent rank) and BE-style (member rank) layers."""
    out = {"model_kind": model.kind, "J": model.J, "layers": []}
    for l, layer in enumerate(getattr(model, "layers", [])):
        rec: dict = {"layer": l, "kind": layer.kind, "shape": list(layer.shape)}
        if layer.kind in ("be", "lpbnn"):
            eig = member_weight_spectrum(layer.params)
            rec["member_weight_cov_eigenvalues"] = [float(e) for e in eig]
            rec["member_weight_cov_rank"] = int(np.sum(eig > 1e-10 * max(eig.max(), 1e-300)))
        if layer.kind == "lpbnn":
            vae = layer.vae
            _, sigma = lpbnn_encode(vae, layer.params.u)
            members = []
            for j in range(layer.params.J):
                emp = empirical_weight_covariance(layer.params, vae, n_samples,
                                                  rng=make_rng(seed, "covcheck", l, j), member=j)
                exact = decoder_covariance(vae, sigma.data[j])
                frob = float(np.linalg.norm(emp))
                k = vae.d
                err = rank_approx_error(emp, k) if k < min(emp.shape) else 0.0
                members.append({
                    "member": j,
                    "latent_dim": k,
                    "empirical": spectrum_summary(emp),
                    "exact": spectrum_summary(exact),
                    "rank_k_error": err,
                    "rank_k_relative_error": err / frob if frob > 0 else 0.0,
                    "exact_vs_empirical_frobenius": float(np.linalg.norm(emp - exact)),
                })
            rec["members"] = members
        out["layers"].append(rec)
    return out
