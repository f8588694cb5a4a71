"""Spectral graph network: eigenvalue-MLP filtered convolutions, attention readout, linear head.

Shapes follow the row-per-node convention: node features are ``N x F``, the
basis ``U`` is ``N x N`` with one eigenvector per column.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .dataset import Graph, fmt17
from .errors import ValidationError
from .spectral import BasisCache, SpectralBasis

FILTER_HIDDEN = 16
ATTENTION_EPS = 1e-8
FILTER_INIT_SCALE = 0.01
MODEL_FORMAT = "sbgnn-model"


@dataclass
class FilterMLPParams:
    """Per-eigenvalue gain ``g(lam) = w2 . tanh(w1 * lam + b1) + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray  # 0-d


@dataclass
class SpectralLayerParams:
    filter: FilterMLPParams
    w: np.ndarray
    b: np.ndarray


@dataclass
class AttentionParams:
    gamma: np.ndarray


@dataclass
class OutputParams:
    w_out: np.ndarray
    b_out: np.ndarray


@dataclass
class ModelParams:
    layers: list[SpectralLayerParams]
    attention: AttentionParams
    output: OutputParams

    @property
    def dims(self) -> tuple[int, int, int]:
        return (
            self.layers[0].w.shape[0],
            self.output.w_out.shape[0],
            self.output.w_out.shape[1],
        )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every learnable tensor in a fixed order (optimizer state is aligned to it)."""
        for k, layer in enumerate(self.layers):
            f = layer.filter
            yield f"layers.{k}.filter.w1", f.w1
            yield f"layers.{k}.filter.b1", f.b1
            yield f"layers.{k}.filter.w2", f.w2
            yield f"layers.{k}.filter.b2", f.b2
            yield f"layers.{k}.w", layer.w
            yield f"layers.{k}.b", layer.b
        yield "attention.gamma", self.attention.gamma
        yield "output.w_out", self.output.w_out
        yield "output.b_out", self.output.b_out

    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.named_tensors()]

    def map(self, fn) -> "ModelParams":
        """New params with ``fn`` applied to every tensor, structure preserved."""
        layers = [
            SpectralLayerParams(
                FilterMLPParams(fn(l.filter.w1), fn(l.filter.b1), fn(l.filter.w2), fn(l.filter.b2)),
                fn(l.w),
                fn(l.b),
            )
            for l in self.layers
        ]
        return ModelParams(
            layers,
            AttentionParams(fn(self.attention.gamma)),
            OutputParams(fn(self.output.w_out), fn(self.output.b_out)),
        )

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        a, b = list(self.named_tensors()), list(other.named_tensors())
        return len(a) == len(b) and all(
            na == nb and ta.shape == tb.shape and np.array_equal(ta, tb)
            for (na, ta), (nb, tb) in zip(a, b)
        )


# Gradients mirror the parameter structure one-to-one.
Gradients = ModelParams


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(f_in: int, f_h: int = 64, c: int = 2, seed: int = 0, n_layers: int = 2) -> ModelParams:
    """Glorot-uniform weights, zero biases, filter MLPs starting near ``g == 1``."""
    if min(f_in, f_h, c, n_layers) < 1:
        raise ValidationError(f"dims must be >= 1, got f_in={f_in} f_h={f_h} c={c} layers={n_layers}")
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    fan = f_in
    for _ in range(n_layers):
        w = _glorot(rng, fan, f_h, (fan, f_h))
        filt = FilterMLPParams(
            w1=rng.uniform(-FILTER_INIT_SCALE, FILTER_INIT_SCALE, FILTER_HIDDEN),
            b1=np.zeros(FILTER_HIDDEN),
            w2=rng.uniform(-FILTER_INIT_SCALE, FILTER_INIT_SCALE, FILTER_HIDDEN),
            b2=np.array(1.0),
        )
        layers.append(SpectralLayerParams(filt, w, np.zeros(f_h)))
        fan = f_h
    gamma = _glorot(rng, f_h, 1, f_h)
    w_out = _glorot(rng, f_h, c, (f_h, c))
    return ModelParams(layers, AttentionParams(gamma), OutputParams(w_out, np.zeros(c)))


def filter_response(filt: FilterMLPParams, eigenvalues: np.ndarray) -> np.ndarray:
    g, _ = _filter_forward(filt, eigenvalues)
    return g


def _filter_forward(filt: FilterMLPParams, lam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hidden = np.tanh(np.outer(lam, filt.w1) + filt.b1)
    return hidden @ filt.w2 + filt.b2, hidden


@dataclass
class LayerTrace:
    h_in: np.ndarray
    h_hat: np.ndarray
    g: np.ndarray
    hidden: np.ndarray
    h_tilde: np.ndarray
    pre_relu: np.ndarray
    mask: np.ndarray | None  # already scaled by 1/keep


@dataclass
class ForwardTrace:
    layers: list[LayerTrace] = field(default_factory=list)
    h_final: np.ndarray | None = None
    scores: np.ndarray | None = None  # sigmoid outputs a_i
    weights: np.ndarray | None = None
    score_sum: float = 0.0  # sum(a) + eps
    h_g: np.ndarray | None = None
    logits: np.ndarray | None = None


def spectral_conv(
    h: np.ndarray,
    basis: SpectralBasis,
    p: SpectralLayerParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.5,
) -> tuple[np.ndarray, LayerTrace]:
    """One spectral layer: GFT, per-frequency gain, inverse GFT, channel mix, ReLU, dropout.

    Dropout (inverted, rate ``dropout``) acts only when ``training`` is set.
    """
    if h.shape[0] != basis.size:
        raise ValidationError(f"features have {h.shape[0]} rows, basis has {basis.size}")
    if h.shape[1] != p.w.shape[0]:
        raise ValidationError(f"features have width {h.shape[1]}, layer expects {p.w.shape[0]}")
    u = basis.eigenvectors
    h_hat = u.T @ h
    g, hidden = _filter_forward(p.filter, basis.eigenvalues)
    h_tilde = u @ (g[:, None] * h_hat)
    pre = h_tilde @ p.w + p.b
    out = np.maximum(pre, 0.0)
    mask = None
    if training and dropout > 0.0:
        if rng is None:
            raise ValidationError("training-mode dropout needs an rng")
        keep = 1.0 - dropout
        mask = (rng.random(out.shape) < keep) / keep
        out = out * mask
    return out, LayerTrace(h, h_hat, g, hidden, h_tilde, pre, mask)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def attention_readout(h: np.ndarray, p: AttentionParams) -> tuple[np.ndarray, np.ndarray]:
    """Graph embedding as the attention-weighted node sum, plus the node weights."""
    h_g, weights, _, _ = _readout(h, p)
    return h_g, weights


def _readout(h: np.ndarray, p: AttentionParams):
    a = _sigmoid(h @ p.gamma)
    total = float(a.sum()) + ATTENTION_EPS
    weights = a / total
    return weights @ h, weights, a, total


def classify(h_g: np.ndarray, p: OutputParams) -> np.ndarray:
    return h_g @ p.w_out + p.b_out


def check_width(graph: Graph, params: ModelParams) -> None:
    f_in = params.dims[0]
    if graph.n_features != f_in:
        raise ValidationError(f"feature width {f_in} ≠ {graph.n_features}")


def model_forward(
    graph: Graph,
    params: ModelParams,
    cache: BasisCache,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.5,
) -> tuple[np.ndarray, ForwardTrace | None]:
    check_width(graph, params)
    basis = cache.basis_for(graph)
    return forward_with_basis(graph.features, basis, params, training, rng, dropout)


def forward_with_basis(
    x: np.ndarray,
    basis: SpectralBasis,
    params: ModelParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.5,
) -> tuple[np.ndarray, ForwardTrace | None]:
    trace = ForwardTrace() if training else None
    h = x
    for layer in params.layers:
        h, lt = spectral_conv(h, basis, layer, training, rng, dropout)
        if trace is not None:
            trace.layers.append(lt)
    h_g, weights, scores, total = _readout(h, params.attention)
    logits = classify(h_g, params.output)
    if trace is not None:
        trace.h_final = h
        trace.scores = scores
        trace.weights = weights
        trace.score_sum = total
        trace.h_g = h_g
        trace.logits = logits
    return logits, trace


def attention_weights(graph: Graph, params: ModelParams, cache: BasisCache) -> np.ndarray:
    check_width(graph, params)
    h = graph.features
    basis = cache.basis_for(graph)
    for layer in params.layers:
        h, _ = spectral_conv(h, basis, layer)
    return attention_readout(h, params.attention)[1]


def predict(graph: Graph, params: ModelParams, cache: BasisCache) -> int:
    logits, _ = model_forward(graph, params, cache)
    return int(np.argmax(logits))


def _encode(arr: np.ndarray) -> str:
    if arr.ndim == 0:
        return fmt17(arr)
    return "[" + ",".join(_encode(x) for x in arr) + "]"


def params_to_json(params: ModelParams) -> str:
    f_in, f_h, c = params.dims
    header = {
        "format": MODEL_FORMAT,
        "version": 1,
        "dims": {"f_in": f_in, "f_h": f_h, "n_classes": c},
        "n_layers": params.n_layers,
        "filter_hidden": FILTER_HIDDEN,
    }
    body = ",\n".join(f"    {json.dumps(name)}: {_encode(t)}" for name, t in params.named_tensors())
    head = json.dumps(header, indent=2)[:-2]
    return f'{head},\n  "params": {{\n{body}\n  }}\n}}\n'


def params_from_json(text: str) -> ModelParams:
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise ValidationError("not a model file (missing format tag)")
    dims = doc["dims"]
    params = init_params(dims["f_in"], dims["f_h"], dims["n_classes"], 0, doc["n_layers"])
    stored = doc["params"]
    for name, tensor in params.named_tensors():
        if name not in stored:
            raise ValidationError(f"model file lacks tensor {name}")
        value = np.asarray(stored[name], dtype=np.float64)
        if value.shape != tensor.shape:
            raise ValidationError(f"{name}: shape {value.shape}, expected {tensor.shape}")
        tensor[...] = value
    return params


def save_params(params: ModelParams, path) -> None:
    Path(path).write_text(params_to_json(params))


def load_params(path) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path.name} not found")
    return params_from_json(path.read_text())


def write_attention_csv(rows, path) -> None:
    """``rows`` yields ``(graph_id, weights)``; one CSV line per node."""
    with open(path, "w", newline="") as fh:
        fh.write("graph_id,node_index,weight\n")
        for gid, weights in rows:
            for i, w in enumerate(weights):
                fh.write(f"{gid},{i},{fmt17(w)}\n")
