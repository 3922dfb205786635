"""Model families built from the layer zoo, with checkpoint round-tripping."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_rng
from .config import ExperimentConfig
from .layers import (
    EnsembleLayerParams,
    LatentPosterior,
    MeanFieldParams,
    be_forward,
    load_checkpoint,
    lpbnn_forward,
    meanfield_forward,
    save_checkpoint,
)
from .objectives import ParamGroup

LAYER_KINDS = {
    "deterministic": "dense",
    "batchensemble": "be",
    "lpbnn": "lpbnn",
    "meanfield": "meanfield",
}


@dataclass
class DenseParams:
    w: Tensor
    bias: Tensor


@dataclass
class Layer:
    kind: str
    activation: str
    params: object
    vae: LatentPosterior | None = None

    @property
    def shape(self) -> tuple[int, int]:
        p = self.params
        w = p.w if self.kind == "dense" else p.w_mu if self.kind == "meanfield" else p.w_share
        return w.shape

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        p = self.params
        if self.kind == "dense":
            out = [("w", p.w), ("bias", p.bias)]
        elif self.kind == "meanfield":
            out = [("w_mu", p.w_mu), ("w_rho", p.w_rho), ("bias", p.bias)]
        else:
            out = [("w_share", p.w_share), ("u", p.u), ("v", p.v), ("bias", p.bias)]
        if self.vae is not None:
            v = self.vae
            out += [("enc_w", v.enc_w), ("enc_b", v.enc_b), ("dec_w", v.dec_w), ("dec_b", v.dec_b)]
        return out


@dataclass
class ForwardResult:
    logits: Tensor
    layer_terms: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    kl_weights: Tensor | None = None


class Network:
    """Dense classifier of one model family; ``J`` members for ensemble kinds."""

    def __init__(self, kind: str, layers: list[Layer], J: int = 1, prior_sigma: float = 1.0,
                 eval_samples: int = 1):
        if kind not in LAYER_KINDS:
            raise ValueError(f"unknown network kind {kind!r}")
        self.kind = kind
        self.layers = layers
        self.J = J
        self.prior_sigma = prior_sigma
        # weight samples per evaluation pass (mean-field draws J configurations)
        self.eval_samples = eval_samples

    @classmethod
    def build(cls, cfg: ExperimentConfig, input_dim: int, n_classes: int, seed: int | None = None) -> Network:
        kind = cfg.model_kind
        seed = cfg.seed if seed is None else seed
        J = cfg.J if kind in ("batchensemble", "lpbnn") else 1
        widths = [input_dim, *cfg.layer_widths, n_classes]
        layers = []
        for l, (m, p) in enumerate(zip(widths[:-1], widths[1:])):
            act = "relu" if l < len(widths) - 2 else "identity"
            # the slow weights share one stream across kinds, so same seed -> same W
            slow = make_rng(seed, "init", l, "slow")
            fast = make_rng(seed, "init", l, "fast")
            if kind == "deterministic":
                w = slow.normal(0.0, np.sqrt(2.0 / m), size=(m, p))
                params = DenseParams(Tensor(w, requires_grad=True), Tensor(np.zeros(p), requires_grad=True))
                layers.append(Layer("dense", act, params))
            elif kind == "meanfield":
                layers.append(Layer("meanfield", act, MeanFieldParams.init(m, p, slow, cfg.prior_sigma)))
            else:
                be = EnsembleLayerParams.init(m, p, J, slow, fast_init="ones")
                if not cfg.freeze_fast:
                    be.u.data[...] = fast.normal(1.0, 0.5, size=(J, m))
                    be.v.data[...] = fast.normal(1.0, 0.5, size=(J, p))
                vae = None
                if kind == "lpbnn":
                    vae = LatentPosterior.init(
                        m,
                        make_rng(seed, "init", l, "vae"),
                        cfg.latent_dim,
                        mode="identity" if cfg.freeze_fast else "random",
                        init_log_var=cfg.init_log_var,
                    )
                layers.append(Layer("be" if kind == "batchensemble" else "lpbnn", act, be, vae))
        return cls(kind, layers, J, cfg.prior_sigma, eval_samples=cfg.J if kind == "meanfield" else 1)

    # ------------------------------------------------------------- forward

    def forward(self, x: Tensor, member_of, seed: int = 0, stream=()) -> ForwardResult:
        """One stochastic forward pass; layer ``l`` draws from ``(seed, *stream, l)``."""
        h = x
        terms, kls = [], []
        for l, layer in enumerate(self.layers):
            rng = make_rng(seed, *stream, "layer", l)
            if layer.kind == "dense":
                p = layer.params
                h = ad.matmul(h, p.w)
                h = ad.add(h, ad.take_rows(ad.reshape(p.bias, (1, -1)), np.zeros(h.shape[0], dtype=np.int64)))
                h = ad.activate(h, layer.activation)
            elif layer.kind == "be":
                h = be_forward(layer.params, h, member_of, layer.activation)
            elif layer.kind == "lpbnn":
                h, t = lpbnn_forward(layer.params, layer.vae, h, member_of, layer.activation, rng)
                terms.append(t)
            else:
                h, kl = meanfield_forward(layer.params, h, rng, layer.activation)
                kls.append(kl)
        kl_total = None
        if kls:
            kl_total = kls[0]
            for k in kls[1:]:
                kl_total = ad.add(kl_total, k)
        return ForwardResult(h, terms, kl_total)

    def predict(self, x: np.ndarray, seed: int = 0, stream=(), n_passes: int = 1) -> np.ndarray:
        """Member probabilities (n_passes * J, N, C); every input goes through every member."""
        x = np.asarray(x, dtype=np.float64)
        N = x.shape[0]
        out = []
        for rep in range(n_passes):
            xt = Tensor(np.tile(x, (self.J, 1)))
            members = np.repeat(np.arange(self.J), N)
            logits = self.forward(xt, members, seed, (*stream, "pass", rep)).logits.data
            out.append(ad.softmax(logits).reshape(self.J, N, -1))
        return np.concatenate(out, axis=0)

    # ------------------------------------------------------------ parameters

    def param_groups(self, cfg: ExperimentConfig) -> list[ParamGroup]:
        slow, fast, variational, rho = [], [], [], []
        for layer in self.layers:
            for name, t in layer.named_tensors():
                if t is None:
                    continue
                if name in ("u", "v"):
                    fast.append(t)
                elif name.startswith(("enc_", "dec_")):
                    variational.append(t)
                elif name == "w_rho":
                    rho.append(t)
                else:
                    slow.append(t)
        groups = [ParamGroup("slow", slow, cfg.weight_decay_slow)]
        if fast:
            groups.append(ParamGroup("fast", fast, cfg.weight_decay_fast, trainable=not cfg.freeze_fast))
        if variational:
            groups.append(ParamGroup("variational", variational, cfg.weight_decay_variational,
                                     trainable=not cfg.freeze_fast))
        if rho:
            groups.append(ParamGroup("posterior_std", rho, 0.0))
        return groups

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [(f"layer{l}.{name}", t) for l, layer in enumerate(self.layers)
                for name, t in layer.named_tensors() if t is not None]

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for _, t in self.tensors()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for (_, t), a in zip(self.tensors(), snap):
            t.data[...] = a

    def manifest(self) -> dict:
        return {
            "format": "lpbnn-checkpoint/1",
            "model_kind": self.kind,
            "J": self.J,
            "prior_sigma": self.prior_sigma,
            "eval_samples": self.eval_samples,
            "layers": [
                {
                    "kind": layer.kind,
                    "activation": layer.activation,
                    "shape": list(layer.shape),
                    "J": self.J,
                    "d": layer.vae.d if layer.vae is not None else None,
                }
                for layer in self.layers
            ],
        }

    def save(self, path, extra: dict | None = None) -> None:
        manifest = self.manifest()
        if extra:
            manifest["extra"] = extra
        save_checkpoint(path, manifest, [(n, t.data) for n, t in self.tensors()])

    @classmethod
    def from_arrays(cls, manifest: dict, arrays: dict[str, np.ndarray]) -> Network:
        J = int(manifest["J"])
        layers = []
        for l, spec in enumerate(manifest["layers"]):
            def get(name):
                key = f"layer{l}.{name}"
                if key not in arrays:
                    raise ValueError(f"checkpoint lacks parameter {key}")
                return Tensor(arrays[key], requires_grad=True)

            kind = spec["kind"]
            if kind == "dense":
                params = DenseParams(get("w"), get("bias"))
            elif kind == "meanfield":
                params = MeanFieldParams(get("w_mu"), get("w_rho"), get("bias"), manifest["prior_sigma"])
            else:
                params = EnsembleLayerParams(get("w_share"), get("u"), get("v"), get("bias"))
            vae = None
            if kind == "lpbnn":
                vae = LatentPosterior(get("enc_w"), get("enc_b"), get("dec_w"), get("dec_b"))
            layer = Layer(kind, spec["activation"], params, vae)
            if list(layer.shape) != list(spec["shape"]):
                raise ValueError(f"layer {l}: shape {layer.shape} does not match manifest {spec['shape']}")
            layers.append(layer)
        return cls(manifest["model_kind"], layers, J, manifest.get("prior_sigma", 1.0),
                   manifest.get("eval_samples", 1))

    @classmethod
    def load(cls, path) -> Network:
        manifest, arrays = load_checkpoint(path)
        return cls.from_arrays(manifest, arrays)


class DeepEnsemble:
    """J independently trained deterministic networks."""

    kind = "deepensemble"

    def __init__(self, members: list[Network]):
        self.members = members

    @property
    def J(self) -> int:
        return len(self.members)

    def predict(self, x: np.ndarray, seed: int = 0, stream=(), n_passes: int = 1) -> np.ndarray:
        return np.concatenate([m.predict(x, seed, stream, 1) for m in self.members], axis=0)

    @property
    def layers(self):
        return self.members[0].layers


def load_model(path):
    """A single checkpoint file, or a directory of member checkpoints (deep ensemble)."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.ckpt"))
        if not files:
            raise FileNotFoundError(f"no .ckpt files in {path}")
        nets = [Network.load(f) for f in files]
        return nets[0] if len(nets) == 1 else DeepEnsemble(nets)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Network.load(path)
