"""Covariance structure checks: latent-factor implicit covariance, the
ensemble-averaging relation, and best rank-k approximation error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .layers import EnsembleLayerParams, LatentPosterior, lpbnn_encode
from .autodiff import make_rng


@dataclass
class LatentFactorModel:
    """Weights ``W = alpha @ Z`` with independent latent coordinates ``Z[k]``."""

    alpha: np.ndarray
    z_var: np.ndarray

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=np.float64))
        self.z_var = np.asarray(self.z_var, dtype=np.float64).ravel()
        if self.alpha.shape[1] != self.z_var.size:
            raise ValueError(f"alpha has {self.alpha.shape[1]} factors but z_var has {self.z_var.size}")
        if np.any(self.z_var < 0):
            raise ValueError("latent variances must be non-negative")

    @property
    def n_weights(self) -> int:
        return self.alpha.shape[0]

    def _row(self, w: int) -> np.ndarray:
        if not 0 <= w < self.n_weights:
            raise IndexError(f"weight index {w} out of range [0, {self.n_weights})")
        return self.alpha[w]

    def covariance_matrix(self) -> np.ndarray:
        return (self.alpha * self.z_var) @ self.alpha.T

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n`` weight vectors with Gaussian latents; shape (n, n_weights)."""
        z = rng.standard_normal((n, self.z_var.size)) * np.sqrt(self.z_var)
        return z @ self.alpha.T


def implicit_variance(model: LatentFactorModel, w_index: int) -> float:
    row = model._row(w_index)
    return float(np.sum(row * row * model.z_var))


def implicit_covariance(model: LatentFactorModel, w_index_a: int, w_index_b: int) -> float:
    a, b = model._row(w_index_a), model._row(w_index_b)
    return float(np.sum(a * b * model.z_var))


# ------------------------------------------------------------ averaging


def mlp_forward(params: Sequence[tuple[np.ndarray, np.ndarray]], x: np.ndarray,
                activation: str = "relu") -> np.ndarray:
    """Pre-softmax output of a dense net given ``[(W, b), ...]``."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(params):
        h = h @ w + b
        if i < len(params) - 1 and activation == "relu":
            h = np.maximum(h, 0.0)
    return h


def _flatten(params) -> np.ndarray:
    return np.concatenate([np.ravel(a) for layer in params for a in layer])


def averaging_consistency(networks: Sequence[Sequence[tuple[np.ndarray, np.ndarray]]], x_batch,
                          activation: str = "relu") -> tuple[float, float]:
    """(residual, delta) between the mean of member outputs and the output of the mean weights.

    ``residual`` is the largest per-input L2 gap on pre-softmax outputs;
    ``delta`` is ``max_j ||theta_j - theta_avg||`` over all weights.
    """
    if not networks:
        raise ValueError("need at least one network")
    ref = [tuple(np.shape(a) for a in layer) for layer in networks[0]]
    for net in networks[1:]:
        if [tuple(np.shape(a) for a in layer) for layer in net] != ref:
            raise ValueError("all networks must share an architecture")
    J = len(networks)
    avg = [tuple(sum(np.asarray(net[l][k], dtype=np.float64) for net in networks) / J
                 for k in range(len(networks[0][l])))
           for l in range(len(networks[0]))]
    mean_out = sum(mlp_forward(net, x_batch, activation) for net in networks) / J
    gap = mean_out - mlp_forward(avg, x_batch, activation)
    residual = float(np.max(np.linalg.norm(gap, axis=1)))
    flat_avg = _flatten(avg)
    delta = float(max(np.linalg.norm(_flatten(net) - flat_avg) for net in networks))
    return residual, delta


# ------------------------------------------------------------------- SVD


def jacobi_svd(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """One-sided (Hestenes) Jacobi SVD. Returns ``U, s, Vt`` with s descending."""
    a = np.array(a, dtype=np.float64)
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    m, n = a.shape
    U = a.copy()
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                ui, uj = U[:, i], U[:, j]
                alpha = ui @ ui
                beta = uj @ uj
                gamma = ui @ uj
                if alpha == 0.0 or beta == 0.0:
                    continue
                c_off = abs(gamma) / (np.sqrt(alpha) * np.sqrt(beta))
                off = max(off, c_off)
                if c_off <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = c * t
                U[:, i], U[:, j] = c * ui - s * uj, s * ui + c * uj
                vi, vj = V[:, i].copy(), V[:, j]
                V[:, i], V[:, j] = c * vi - s * vj, s * vi + c * vj
        if off <= tol:
            break
    sing = np.linalg.norm(U, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing = sing[order]
    U, V = U[:, order], V[:, order]
    nz = sing > 0
    U[:, nz] = U[:, nz] / sing[nz]
    if transposed:
        return V, sing, U.T
    return U, sing, V.T


def singular_values(a: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    return jacobi_svd(a, tol)[1]


def rank_approx_error(matrix, k: int, tol: float = 1e-12) -> float:
    """Frobenius error of the best rank-k approximation, ``sqrt(sum_{i>k} s_i^2)``."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("rank_approx_error needs a matrix")
    if not 1 <= k <= min(a.shape):
        raise ValueError(f"k must be in [1, {min(a.shape)}], got {k}")
    s = singular_values(a, tol)
    return float(np.sqrt(np.sum(s[k:] ** 2)))


# ----------------------------------------------------------- LP-BNN empirics


def sample_u_hat(params: EnsembleLayerParams, lp: LatentPosterior, member: int, n_samples: int,
                 rng) -> np.ndarray:
    """``n_samples`` decoded fast vectors for one member, shape (n_samples, m)."""
    if not 0 <= member < params.J:
        raise IndexError(f"member {member} out of range [0, {params.J})")
    mu, sigma = lpbnn_encode(lp, params.u)
    g = rng if isinstance(rng, np.random.Generator) else make_rng(int(rng), "u_hat_cov")
    z = mu.data[member] + sigma.data[member] * g.standard_normal((n_samples, lp.d))
    return z @ lp.dec_w.data + lp.dec_b.data


def empirical_weight_covariance(params: EnsembleLayerParams, lp: LatentPosterior, n_samples: int,
                                rng=0, member: int = 0) -> np.ndarray:
    """Unbiased covariance (m, m) of sampled ``u_hat`` for one member."""
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    samples = sample_u_hat(params, lp, member, n_samples, rng)
    return np.atleast_2d(np.cov(samples, rowvar=False))


def decoder_covariance(lp: LatentPosterior, sigma: np.ndarray) -> np.ndarray:
    """Exact covariance of ``u_hat`` for latent std ``sigma``: ``dec_w.T diag(sigma^2) dec_w``."""
    W = lp.dec_w.data
    return (W.T * np.asarray(sigma) ** 2) @ W


def member_weight_spectrum(params: EnsembleLayerParams, u_rows: np.ndarray | None = None) -> np.ndarray:
    """Eigenvalues of the across-member covariance of flattened member weights.

    Computed from the thin (J, m*p) centered matrix, so at most J values are
    returned and at most J - 1 of them are non-zero.
    """
    u = params.u.data if u_rows is None else np.asarray(u_rows)
    flat = np.stack([(params.w_share.data * np.outer(u[j], params.v.data[j])).ravel()
                     for j in range(params.J)])
    centered = flat - flat.mean(axis=0)
    s = singular_values(centered)
    return s ** 2 / max(params.J - 1, 1)


def spectrum_summary(matrix: np.ndarray, max_full: int = 64) -> dict:
    """JSON-friendly summary; the full matrix only up to ``max_full`` per side."""
    s = singular_values(matrix)
    out = {
        "shape": list(matrix.shape),
        "frobenius": float(np.linalg.norm(matrix)),
        "singular_values": [float(x) for x in s],
    }
    if max(matrix.shape) <= max_full:
        out["matrix"] = np.asarray(matrix).tolist()
    return out
