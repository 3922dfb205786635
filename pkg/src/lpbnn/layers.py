"""Dense layer zoo: BatchEnsemble, latent-posterior (VAE-encoded) BatchEnsemble,
and a mean-field Gaussian baseline.

Convention: ``u`` (J, m) holds the input-side fast vectors, the ones encoded
by the per-layer VAE, and ``v`` (J, p) the deterministic output-side ones.
Member ``j`` uses the weight ``w_share * outer(u_j, v_j)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .objectives import kl_diag_gaussian_std, kl_gaussian_to_prior

DEFAULT_LATENT_DIM = 32


@dataclass
class EnsembleLayerParams:
    w_share: Tensor
    u: Tensor
    v: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        m, p = self.w_share.shape
        if self.u.ndim != 2 or self.u.shape[1] != m:
            raise ShapeError(f"u must be (J, {m}), got {self.u.shape}")
        if self.v.shape != (self.u.shape[0], p):
            raise ShapeError(f"v must be ({self.u.shape[0]}, {p}), got {self.v.shape}")
        if self.bias is not None and self.bias.shape != (p,):
            raise ShapeError(f"bias must be ({p},), got {self.bias.shape}")
        if self.u.shape[0] < 1:
            raise ValueError("ensemble size J must be >= 1")

    @property
    def J(self) -> int:
        return self.u.shape[0]

    @property
    def m(self) -> int:
        return self.w_share.shape[0]

    @property
    def p(self) -> int:
        return self.w_share.shape[1]

    @classmethod
    def init(cls, m: int, p: int, J: int, rng: np.random.Generator, bias: bool = True,
             fast_init: str = "random") -> EnsembleLayerParams:
        w = rng.normal(0.0, np.sqrt(2.0 / m), size=(m, p))
        if fast_init == "ones":
            u, v = np.ones((J, m)), np.ones((J, p))
        else:
            u = rng.normal(1.0, 0.5, size=(J, m))
            v = rng.normal(1.0, 0.5, size=(J, p))
        return cls(
            Tensor(w, requires_grad=True, name="w_share"),
            Tensor(u, requires_grad=True, name="u"),
            Tensor(v, requires_grad=True, name="v"),
            Tensor(np.zeros(p), requires_grad=True, name="bias") if bias else None,
        )


def _check_members(member_of, B: int, J: int) -> np.ndarray:
    idx = np.asarray(member_of, dtype=np.int64)
    if idx.shape != (B,):
        raise ShapeError(f"member_of must have one entry per row ({B}), got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= J):
        raise IndexError(f"member index out of range [0, {J})")
    return idx


def _rank1_dense(w_share: Tensor, u: Tensor, v: Tensor, bias: Tensor | None,
                 x: Tensor, member_of, activation: str) -> Tensor:
    if x.ndim != 2 or x.shape[1] != w_share.shape[0]:
        raise ShapeError(f"be_forward: x must be (B, {w_share.shape[0]}), got {x.shape}")
    idx = _check_members(member_of, x.shape[0], u.shape[0])
    h = ad.matmul(ad.hadamard(x, ad.take_rows(u, idx)), w_share)
    h = ad.hadamard(h, ad.take_rows(v, idx))
    if bias is not None:
        h = ad.add(h, ad.take_rows(ad.reshape(bias, (1, -1)), np.zeros(x.shape[0], dtype=np.int64)))
    return ad.activate(h, activation)


def be_forward(params: EnsembleLayerParams, x: Tensor, member_of, activation: str = "identity") -> Tensor:
    """Row ``b`` routed to member ``j``: ``act((w_share.T (x_b * u_j)) * v_j + bias)``."""
    return _rank1_dense(params.w_share, params.u, params.v, params.bias, x, member_of, activation)


def materialize_member_weight(params: EnsembleLayerParams, j: int) -> np.ndarray:
    if not 0 <= j < params.J:
        raise IndexError(f"member index {j} out of range [0, {params.J})")
    return params.w_share.data * np.outer(params.u.data[j], params.v.data[j])


# ----------------------------------------------------------- latent posterior


@dataclass
class LatentPosterior:
    """Per-layer VAE over the J input-side fast vectors.

    The encoder maps ``u_j`` to ``(mu_j, log_var_j)``; the linear decoder maps
    a latent code back to a reconstructed fast vector. The encoder reads
    ``u_j - mean_k u_k`` (the J members are its mini-batch); without the
    centering, the common offset of the fast vectors feeds a steady KL push
    into ``enc_w`` that makes plain SGD unstable at lr ~ 0.1.
    ``mu``, ``sigma``, ``z`` and ``u_hat`` cache the most recent forward pass.
    """

    enc_w: Tensor
    enc_b: Tensor
    dec_w: Tensor
    dec_b: Tensor
    mu: np.ndarray | None = field(default=None, repr=False)
    sigma: np.ndarray | None = field(default=None, repr=False)
    z: np.ndarray | None = field(default=None, repr=False)
    u_hat: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        m, two_d = self.enc_w.shape
        d = two_d // 2
        if two_d != 2 * d or self.enc_b.shape != (two_d,):
            raise ShapeError(f"encoder must be (m, 2d) with bias (2d,), got {self.enc_w.shape}")
        if self.dec_w.shape != (d, m) or self.dec_b.shape != (m,):
            raise ShapeError(f"decoder must be ({d}, {m}) with bias ({m},), got {self.dec_w.shape}")
        if not 1 <= d < m:
            raise ValueError(f"latent dimension must satisfy 1 <= d < m, got d={d}, m={m}")

    @property
    def d(self) -> int:
        return self.dec_w.shape[0]

    @property
    def m(self) -> int:
        return self.dec_w.shape[1]

    @classmethod
    def init(cls, m: int, rng: np.random.Generator, latent_dim: int = DEFAULT_LATENT_DIM,
             mode: str = "random", init_log_var: float = -4.0, init_scale: float = 0.1) -> LatentPosterior:
        d = clamp_latent_dim(latent_dim, m)
        if mode == "identity":
            # zero encoder (mu=0, sigma=1) and a constant-one decoder: zero KL and
            # exact reconstruction of all-ones fast vectors
            enc_w, enc_b = np.zeros((m, 2 * d)), np.zeros(2 * d)
            dec_w, dec_b = np.zeros((d, m)), np.ones(m)
        else:
            # small weights and a small initial sigma: the decoder starts near
            # the member mean and the sampling noise is grown by the KL term
            enc_w = rng.normal(0.0, init_scale / np.sqrt(m), size=(m, 2 * d))
            enc_b = np.concatenate([np.zeros(d), np.full(d, init_log_var)])
            dec_w = rng.normal(0.0, init_scale / np.sqrt(d), size=(d, m))
            dec_b = np.ones(m)
        return cls(
            Tensor(enc_w, requires_grad=True, name="enc_w"),
            Tensor(enc_b, requires_grad=True, name="enc_b"),
            Tensor(dec_w, requires_grad=True, name="dec_w"),
            Tensor(dec_b, requires_grad=True, name="dec_b"),
        )


def clamp_latent_dim(latent_dim: int, m: int) -> int:
    if m < 2:
        raise ValueError(f"a latent-posterior layer needs input width >= 2, got {m}")
    return max(1, min(int(latent_dim), m - 1))


def _row_bias(b: Tensor, rows: int) -> Tensor:
    return ad.take_rows(ad.reshape(b, (1, -1)), np.zeros(rows, dtype=np.int64))


def lpbnn_encode(lp: LatentPosterior, u_batch: Tensor) -> tuple[Tensor, Tensor]:
    if u_batch.ndim != 2 or u_batch.shape[1] != lp.m:
        raise ShapeError(f"lpbnn_encode: expected (J, {lp.m}), got {u_batch.shape}")
    d = lp.d
    J = u_batch.shape[0]
    centered = ad.sub(u_batch, ad.matmul(Tensor(np.full((J, J), 1.0 / J)), u_batch))
    out = ad.add(ad.matmul(centered, lp.enc_w), _row_bias(lp.enc_b, u_batch.shape[0]))
    mu = ad.slice_(out, (slice(None), slice(0, d)))
    log_var = ad.slice_(out, (slice(None), slice(d, 2 * d)))
    sigma = ad.exp(ad.scale(log_var, 0.5))
    if not np.all(sigma.data > 0):
        raise ad.NonFiniteError("lpbnn_encode: sigma underflowed to zero")
    return mu, sigma


def lpbnn_sample_decode(lp: LatentPosterior, mu: Tensor, sigma: Tensor, rng) -> Tensor:
    z, _ = ad.gaussian_sample(mu, sigma, rng)
    u_hat = ad.add(ad.matmul(z, lp.dec_w), _row_bias(lp.dec_b, z.shape[0]))
    lp.mu, lp.sigma, lp.z, lp.u_hat = mu.data, sigma.data, z.data, u_hat.data
    return u_hat


def lpbnn_forward(params: EnsembleLayerParams, lp: LatentPosterior, x: Tensor, member_of,
                  activation: str = "identity", rng=0) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Encode u, sample and decode u_hat, then run the rank-1 layer with u_hat.

    Returns ``(h, (kl, recon))``: ``kl`` sums the latent KL to N(0, I) over
    members, ``recon`` is ``sum_j ||u_j - u_hat_j||^2``.
    """
    if lp.m != params.m:
        raise ShapeError(f"VAE width {lp.m} does not match layer input width {params.m}")
    mu, sigma = lpbnn_encode(lp, params.u)
    u_hat = lpbnn_sample_decode(lp, mu, sigma, rng)
    h = _rank1_dense(params.w_share, u_hat, params.v, params.bias, x, member_of, activation)
    kl = kl_diag_gaussian_std(mu, sigma)
    diff = ad.sub(params.u, u_hat)
    recon = ad.sum_(ad.hadamard(diff, diff))
    return h, (kl, recon)


# ------------------------------------------------------------------ mean field


@dataclass
class MeanFieldParams:
    w_mu: Tensor
    w_rho: Tensor
    bias: Tensor | None = None
    prior_sigma: float = 1.0

    def __post_init__(self):
        if self.w_mu.shape != self.w_rho.shape or self.w_mu.ndim != 2:
            raise ShapeError(f"w_mu/w_rho shape mismatch {self.w_mu.shape} vs {self.w_rho.shape}")
        if self.prior_sigma <= 0:
            raise ValueError("prior_sigma must be positive")

    @classmethod
    def init(cls, m: int, p: int, rng: np.random.Generator, prior_sigma: float = 1.0,
             init_rho: float = -5.0, bias: bool = True) -> MeanFieldParams:
        return cls(
            Tensor(rng.normal(0.0, np.sqrt(2.0 / m), size=(m, p)), requires_grad=True, name="w_mu"),
            Tensor(np.full((m, p), init_rho), requires_grad=True, name="w_rho"),
            Tensor(np.zeros(p), requires_grad=True, name="bias") if bias else None,
            prior_sigma,
        )


def meanfield_forward(mf: MeanFieldParams, x: Tensor, rng=0,
                      activation: str = "identity") -> tuple[Tensor, Tensor]:
    """One weight sample ``W = w_mu + softplus(w_rho) * eps``; returns ``(act(xW + b), kl)``."""
    if x.ndim != 2 or x.shape[1] != mf.w_mu.shape[0]:
        raise ShapeError(f"meanfield_forward: x must be (B, {mf.w_mu.shape[0]}), got {x.shape}")
    sigma = ad.softplus(mf.w_rho)
    w, _ = ad.gaussian_sample(mf.w_mu, sigma, rng)
    h = ad.matmul(x, w)
    if mf.bias is not None:
        h = ad.add(h, _row_bias(mf.bias, x.shape[0]))
    return ad.activate(h, activation), kl_gaussian_to_prior(mf.w_mu, sigma, mf.prior_sigma)


# ------------------------------------------------------------------ checkpoint

_MAGIC = b"LPBNNCK1"


def save_checkpoint(path, manifest: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    """Write ``manifest`` (JSON) then each array as little-endian float64, in order.

    The manifest gains a ``params`` list of ``{name, shape}`` records that
    fixes the order of the binary section.
    """
    manifest = dict(manifest)
    manifest["params"] = [{"name": n, "shape": list(np.shape(a))} for n, a in arrays]
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    offset = 16 + n
    arrays: dict[str, np.ndarray] = {}
    for rec in manifest["params"]:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        chunk = raw[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise ValueError(f"{path}: truncated data for {rec['name']}")
        arrays[rec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(rec["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameter data")
    return manifest, arrays
