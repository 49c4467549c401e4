"""Message-passing layers and the C2R parameter bundle.

Node mask convention: column 0 of the separator output is the rationale
channel, column 1 the non-rationale channel.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .graphdata import GraphBatch

RATIONALE = 0


class Module:
    """Ordered parameter / child registry; nothing more."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, t: Tensor) -> Tensor:
        self._params[name] = t
        return t

    def add_child(self, name: str, m: "Module") -> "Module":
        self._children[name] = m
        return m

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self.add_param("weight", dc.uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = self.add_param("bias", dc.uniform_init(rng, d_in, (1, d_out))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise dc.DimensionError("linear", x.shape, self.weight.shape)
        y = dc.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        super().__init__()
        self.layers = [self.add_child(f"lin{i}", Linear(a, b, rng))
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < len(self.layers) - 1:
                x = dc.relu(x)
        return x


class GINLayer(Module):
    kind = "gin"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.eps = self.add_param("eps", Tensor(np.zeros((1, 1)), requires_grad=True))
        self.mlp = self.add_child("mlp", MLP([d_in, d_out, d_out], rng))

    def aggregate(self, h: Tensor, batch: GraphBatch) -> Tensor:
        """``(1 + eps) * h_v + sum of neighbour rows``."""
        return h + dc.hadamard(h, self.eps) + dc.spmm(batch.adj, h, symmetric=True)

    def __call__(self, h: Tensor, batch: GraphBatch, activate: bool = True) -> Tensor:
        out = self.mlp(self.aggregate(h, batch))
        return dc.relu(out) if activate else out


class GCNLayer(Module):
    kind = "gcn"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.weight = self.add_param("weight", dc.uniform_init(rng, d_in, (d_in, d_out)))

    def __call__(self, h: Tensor, batch: GraphBatch, activate: bool = True) -> Tensor:
        out = dc.matmul(dc.spmm(batch.gcn_adj, h, symmetric=True), self.weight)
        return dc.relu(out) if activate else out


LAYERS = {"gin": GINLayer, "gcn": GCNLayer}


class GNN(Module):
    def __init__(self, backbone: str, d_in: int, d: int, n_layers: int, rng: np.random.Generator):
        super().__init__()
        if backbone not in LAYERS:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.d_in, self.d = d_in, d
        dims = [d_in] + [d] * n_layers
        self.layers = [self.add_child(f"layer{i}", LAYERS[backbone](a, b, rng))
                       for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, batch: GraphBatch) -> Tensor:
        if batch.x.shape[1] != self.d_in:
            raise dc.DimensionError("gnn input", batch.x.shape, (self.d_in,))
        h = Tensor(batch.x)
        for layer in self.layers:
            h = layer(h, batch)
        return h


def encode_graph(encoder: GNN, batch: GraphBatch) -> tuple[Tensor, Tensor]:
    """Node embeddings and their per-graph mean readout."""
    H = encoder(batch)
    return H, dc.segment_mean(H, batch.segment_ids, batch.n_graphs)


# ----------------------------------------------------------------- separator

def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(log_probs: Tensor, tau: float, noise: np.ndarray | None,
                          hard: bool = False) -> Tensor:
    """Relaxed categorical sample per row, or its argmax indicator if ``hard``.

    ``noise`` holds Gumbel(0, 1) draws of the same shape; ``None`` means a
    noiseless pass (the hard version then reduces to the mode).
    """
    if tau <= 0:
        raise ValueError(f"Gumbel temperature must be > 0, got {tau}")
    perturbed = log_probs if noise is None else log_probs + noise
    if hard:
        idx = np.argmax(perturbed.data, axis=1)
        onehot = np.zeros(perturbed.shape)
        onehot[np.arange(len(idx)), idx] = 1.0
        return Tensor(onehot)
    return dc.row_softmax(dc.scale(perturbed, 1.0 / tau))


@dataclass
class Separation:
    m_tilde: Tensor  # |V| x 2 selection distribution
    mask: Tensor  # |V| x 1 rationale mask M
    h_r: Tensor
    h_n: Tensor
    H_g: Tensor


class Separator(Module):
    def __init__(self, backbone: str, d_in: int, d: int, n_layers: int, tau: float,
                 rng: np.random.Generator):
        super().__init__()
        if tau <= 0:
            raise ValueError(f"Gumbel temperature must be > 0, got {tau}")
        self.tau = tau
        self.gnn = self.add_child("gnn", GNN(backbone, d_in, d, n_layers, rng))
        self.w = self.add_param("w", dc.uniform_init(rng, d, (d, 2)))

    def logits(self, batch: GraphBatch) -> Tensor:
        return dc.matmul(self.gnn(batch), self.w)

    def __call__(self, batch: GraphBatch) -> Tensor:
        return dc.row_softmax(self.logits(batch))


def separate(separator: Separator, gnn_g: GNN, batch: GraphBatch,
             rng: np.random.Generator | None, hard: bool = False,
             straight_through: bool = False) -> Separation:
    """Sample the node mask and pool both halves of ``GNN_g``'s embeddings.

    ``straight_through`` (ignored when ``hard``) uses the argmax indicator in
    the forward pass and the relaxed sample's gradient in the backward pass.
    """
    logits = separator.logits(batch)
    m_tilde = dc.row_softmax(logits)
    noise = None if rng is None else gumbel_noise(rng, logits.shape)
    log_probs = dc.log_softmax(logits)
    sample = gumbel_softmax_sample(log_probs, separator.tau, noise, hard=hard)
    if straight_through and not hard:
        onehot = gumbel_softmax_sample(log_probs, separator.tau, noise, hard=True)
        sample = sample + Tensor(onehot.data - sample.data)
    mask = dc.select_col(sample, RATIONALE)
    H_g = gnn_g(batch)
    h_r = dc.segment_mean(dc.hadamard(mask, H_g), batch.segment_ids, batch.n_graphs)
    h_n = dc.segment_mean(dc.hadamard(1.0 - mask, H_g), batch.segment_ids, batch.n_graphs)
    return Separation(m_tilde, mask, h_r, h_n, H_g)


# ---------------------------------------------------------- predictor and EG

class Predictor(MLP):
    def __init__(self, d: int, n_classes: int, rng: np.random.Generator):
        super().__init__([d, d, n_classes], rng)


def predict(predictor: Predictor, h: Tensor) -> Tensor:
    return predictor(h)


class EnvGenerator(MLP):
    """Maps ``[h; e]`` (width ``2d``) to a width-``d`` representation."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__([2 * d, d, d], rng)
        self.d = d


def generate_counterfactual(eg: EnvGenerator, h: Tensor, e) -> Tensor:
    e = dc.as_tensor(e)
    if h.shape[1] != eg.d or e.shape[1] != eg.d or e.shape[0] != h.shape[0]:
        raise dc.DimensionError("generate_counterfactual", h.shape, e.shape)
    return eg(dc.concat_cols([h, e]))


# ------------------------------------------------------------------- bundle

@dataclass(frozen=True)
class Architecture:
    kind: str = "c2r"  # c2r | vanilla | vanilla-rat
    backbone: str = "gin"
    d_in: int = 4
    d: int = 32
    n_layers: int = 3
    n_classes: int = 3
    tau: float = 1.0

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


KINDS = ("c2r", "vanilla", "vanilla-rat")


class C2RModel(Module):
    """Parameter bundle: GNN_en, separator (GNN_m, W_m), GNN_g, Phi and EG.

    ``vanilla`` keeps only GNN_en and Phi; ``vanilla-rat`` keeps the
    separator, GNN_g and Phi.
    """

    def __init__(self, arch: Architecture, rng: np.random.Generator):
        super().__init__()
        if arch.kind not in KINDS:
            raise ValueError(f"unknown model kind {arch.kind!r}")
        self.arch = arch
        a = arch
        self.encoder = self.separator = self.gnn_g = self.eg = None
        if a.kind in ("c2r", "vanilla"):
            self.encoder = self.add_child("gnn_en", GNN(a.backbone, a.d_in, a.d, a.n_layers, rng))
        if a.kind in ("c2r", "vanilla-rat"):
            self.separator = self.add_child(
                "separator", Separator(a.backbone, a.d_in, a.d, a.n_layers, a.tau, rng))
            self.gnn_g = self.add_child("gnn_g", GNN(a.backbone, a.d_in, a.d, a.n_layers, rng))
        self.predictor = self.add_child("phi", Predictor(a.d, a.n_classes, rng))
        if a.kind == "c2r":
            self.eg = self.add_child("eg", EnvGenerator(a.d, rng))

    @property
    def has_classifier(self) -> bool:
        return self.encoder is not None

    @property
    def has_rationalizer(self) -> bool:
        return self.separator is not None


def build_model(arch: Architecture, seed: int) -> C2RModel:
    return C2RModel(arch, dc.Rng(seed).stream("init"))


# --------------------------------------------------------------- checkpoints

class CheckpointError(ValueError):
    pass


def save_checkpoint(model: C2RModel, path, config_hash: str = "") -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian f64)."""
    path = Path(path)
    params = model.named_parameters()
    index, offset, chunks = [], 0, []
    for name, p in params.items():
        n = int(p.data.size)
        index.append({"name": name, "shape": list(p.shape), "offset": offset, "count": n})
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        offset += n
    blob = b"".join(chunks)
    manifest = {
        "architecture": asdict(model.arch),
        "architecture_hash": model.arch.digest(),
        "config_hash": config_hash,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "params": index,
    }
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path, config_hash: str | None = None) -> C2RModel:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if config_hash is not None and manifest["config_hash"] != config_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {manifest['config_hash'][:12]} "
            f"vs requested {config_hash[:12]}")
    blob = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError("parameter blob checksum mismatch")
    arch = Architecture(**manifest["architecture"])
    if arch.digest() != manifest["architecture_hash"]:
        raise CheckpointError("architecture hash mismatch")
    model = build_model(arch, 0)
    flat = np.frombuffer(blob, dtype="<f8")
    params = model.named_parameters()
    names = [e["name"] for e in manifest["params"]]
    if names != list(params):
        raise CheckpointError("parameter index does not match architecture")
    for entry in manifest["params"]:
        vals = flat[entry["offset"]:entry["offset"] + entry["count"]]
        params[entry["name"]].data = vals.reshape(entry["shape"]).astype(np.float64)
    return model
