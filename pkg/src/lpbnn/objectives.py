"""Training objectives: NLL, weight decay, Gaussian KLs, the mean-field ELBO and
the latent-posterior ensemble loss."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# parameter-group weight decay used for the classification runs
DEFAULT_DECAY_SLOW = 1e-4
DEFAULT_DECAY_FAST = 0.0


@dataclass
class ParamGroup:
    name: str
    params: list[Tensor]
    decay: float = 0.0
    trainable: bool = True


@dataclass
class LossBreakdown:
    """Scalar parts of one loss evaluation.

    ``weight_decay`` already includes the per-group coefficients, so
    ``total = nll + weight_decay + (kl_total + recon_total) / num_layers``.
    ``objective`` is the differentiable total on the tape.
    """

    nll: float
    weight_decay: float
    kl_total: float = 0.0
    recon_total: float = 0.0
    num_layers: int = 1
    total: float = 0.0
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict[str, float]:
        return {
            "nll": self.nll,
            "weight_decay": self.weight_decay,
            "kl_total": self.kl_total,
            "recon_total": self.recon_total,
            "total": self.total,
        }


def _labels(labels, B: int, C: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise ValueError(f"label out of range [0, {C})")
    return y


def nll_loss(probs: Tensor, labels, from_logits: bool = False) -> Tensor:
    """Mean negative log-likelihood of ``labels``.

    With ``from_logits`` the input is treated as unnormalized scores and a
    stable log-softmax is applied. A zero probability on a true label gives
    ``inf`` with a warning instead of raising.
    """
    B, C = probs.shape
    y = _labels(labels, B, C)
    if from_logits:
        ll = ad.pick(ad.log_softmax(probs), y)
    else:
        if np.any(probs.data[np.arange(B), y] <= 0):
            warnings.warn("nll_loss: zero probability assigned to a true label", RuntimeWarning)
            return Tensor(math.inf)
        ll = ad.log(ad.pick(probs, y))
    return ad.scale(ad.mean(ll), -1.0)


def map_regularizer(param_groups: Iterable[ParamGroup]) -> Tensor:
    """``sum_g decay_g * sum ||theta||^2``; groups with zero decay add nothing."""
    terms = []
    for g in param_groups:
        if g.decay < 0:
            raise ValueError(f"negative weight decay for group {g.name!r}")
        if g.decay == 0:
            continue
        for t in g.params:
            terms.append(ad.scale(ad.sum_(ad.hadamard(t, t)), g.decay))
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def kl_diag_gaussian_std(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL( N(mu, diag sigma^2) || N(0, I) ) = 1/2 sum(mu^2 + sigma^2 - log sigma^2 - 1)."""
    if np.any(sigma.data <= 0):
        raise ValueError("kl_diag_gaussian_std: sigma must be positive")
    s2 = ad.hadamard(sigma, sigma)
    inner = ad.sub(ad.add(ad.hadamard(mu, mu), s2), ad.scale(ad.log(sigma), 2.0))
    return ad.scale(ad.sub(ad.sum_(inner), Tensor(float(mu.size))), 0.5)


def kl_gaussian_to_prior(mu: Tensor, sigma: Tensor, prior_sigma: float) -> Tensor:
    """KL( N(mu, sigma^2) || N(0, prior_sigma^2) ) summed over coordinates."""
    if prior_sigma <= 0:
        raise ValueError("prior_sigma must be positive")
    if np.any(sigma.data <= 0):
        raise ValueError("kl_gaussian_to_prior: sigma must be positive")
    p2 = prior_sigma * prior_sigma
    quad = ad.scale(ad.add(ad.hadamard(sigma, sigma), ad.hadamard(mu, mu)), 0.5 / p2)
    per = ad.sub(quad, ad.log(sigma))
    const = mu.size * (math.log(prior_sigma) - 0.5)
    return ad.add(ad.sum_(per), Tensor(const))


def _sum_scalars(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


def lpbnn_total_loss(probs: Tensor, labels, per_layer_terms: Sequence[tuple[Tensor, Tensor]],
                     param_groups: Iterable[ParamGroup] = (), from_logits: bool = False) -> LossBreakdown:
    """``nll + weight decay + (1/L) * sum_l (kl_l + recon_l)``."""
    L = len(per_layer_terms)
    if L < 1:
        raise ValueError("lpbnn_total_loss: need at least one layer's (kl, recon) terms")
    terms = [(ad._as_tensor(k), ad._as_tensor(r)) for k, r in per_layer_terms]
    nll = nll_loss(probs, labels, from_logits=from_logits)
    reg = map_regularizer(param_groups)
    kl_total = _sum_scalars([k for k, _ in terms])
    recon_total = _sum_scalars([r for _, r in terms])
    if not np.isfinite(nll.item()):
        total = Tensor(math.inf)
    else:
        variational = ad.scale(ad.add(kl_total, recon_total), 1.0 / L)
        total = ad.add(ad.add(nll, reg), variational)
    return LossBreakdown(
        nll=nll.item(),
        weight_decay=reg.item(),
        kl_total=kl_total.item(),
        recon_total=recon_total.item(),
        num_layers=L,
        total=total.item(),
        objective=total,
    )


def elbo_bnn_loss(probs: Tensor, labels, kl_weights, n_minibatches: int,
                  param_groups: Iterable[ParamGroup] = (), from_logits: bool = False) -> LossBreakdown:
    """Mean-field ELBO for one mini-batch: ``nll + KL / n_minibatches`` (+ decay)."""
    if n_minibatches < 1:
        raise ValueError("n_minibatches must be >= 1")
    kl = ad._as_tensor(kl_weights)
    if kl.item() < 0:
        raise ValueError("kl_weights must be non-negative")
    nll = nll_loss(probs, labels, from_logits=from_logits)
    reg = map_regularizer(param_groups)
    if not np.isfinite(nll.item()):
        total = Tensor(math.inf)
    else:
        total = ad.add(ad.add(nll, reg), ad.scale(kl, 1.0 / n_minibatches))
    return LossBreakdown(
        nll=nll.item(),
        weight_decay=reg.item(),
        kl_total=kl.item(),
        num_layers=1,
        total=total.item(),
        objective=total,
    )


def mle_map_loss(probs: Tensor, labels, param_groups: Iterable[ParamGroup] = (),
                 from_logits: bool = False) -> LossBreakdown:
    """Cross-entropy plus weight decay, used by the deterministic and BatchEnsemble models."""
    nll = nll_loss(probs, labels, from_logits=from_logits)
    reg = map_regularizer(param_groups)
    total = ad.add(nll, reg) if np.isfinite(nll.item()) else Tensor(math.inf)
    return LossBreakdown(nll=nll.item(), weight_decay=reg.item(), total=total.item(), objective=total)
