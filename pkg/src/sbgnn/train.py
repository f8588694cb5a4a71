"""Loss, reverse-mode gradients, Adam, the best-validation training loop and repeated runs."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset, Graph, split_dataset
from .errors import ConfigError, NumericalError, SBGNNError, ValidationError
from .metrics import ConfusionMatrix, MetricsReport, confusion, report
from .model import ForwardTrace, Gradients, ModelParams, forward_with_basis, init_params, model_forward
from .spectral import BasisCache, SpectralBasis

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 200
    batch_size: int = 16
    dropout: float = 0.5
    hidden: int = 64
    layers: int = 2
    runs: int = 30
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "split_ratios", tuple(float(r) for r in self.split_ratios))
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("epochs", "batch_size", "hidden", "layers", "runs"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split_ratios must be three values summing to 1, got {self.split_ratios}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        ts = params.tensors()
        return cls([np.zeros_like(x) for x in ts], [np.zeros_like(x) for x in ts], 0)


@dataclass
class RunResult:
    best_val_accuracy: float
    test: MetricsReport
    test_confusion: ConfusionMatrix
    epoch_of_best: int
    train_loss: list[float]
    val_accuracy: list[float]
    params: ModelParams
    split: tuple[list[int], list[int], list[int]]
    seed: int


@dataclass
class RunStats:
    n: int
    mean: dict[str, float]
    std: dict[str, float]
    per_run: dict[str, list[float]]
    single_run: bool
    failed_runs: list[int] = field(default_factory=list)

    @property
    def accuracies(self) -> list[float]:
        return self.per_run["accuracy"]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "single_run": self.single_run,
            "failed_runs": self.failed_runs,
            "mean": self.mean,
            "std": self.std,
            "per_run": self.per_run,
        }


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.size:
        raise ValidationError(f"label {label} out of range for {logits.size} classes")
    shifted = logits - logits.max()
    log_z = math.log(float(np.exp(shifted).sum()))
    probs = np.exp(shifted - log_z)
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    return log_z - float(shifted[label]), dlogits


def backward(
    trace: ForwardTrace,
    graph: Graph | None,
    basis: SpectralBasis,
    params: ModelParams,
    dlogits: np.ndarray,
) -> Gradients:
    """Exact gradients of a scalar loss, given ``dloss/dlogits``, for every parameter.

    The basis is data, so no derivative flows into ``U`` or the eigenvalues.
    Dropout masks stored in ``trace`` are replayed.
    """
    if trace is None or trace.logits is None:
        raise ValidationError("backward needs a training-mode forward trace")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != trace.logits.shape or len(trace.layers) != params.n_layers:
        raise ValidationError("trace does not match the parameters")
    grads = params.zeros_like()
    u, lam = basis.eigenvectors, basis.eigenvalues

    grads.output.w_out[...] = np.outer(trace.h_g, dlogits)
    grads.output.b_out[...] = dlogits
    d_hg = params.output.w_out @ dlogits

    h, w, a, s = trace.h_final, trace.weights, trace.scores, trace.score_sum
    gamma = params.attention.gamma
    d_h = np.outer(w, d_hg)
    d_w = h @ d_hg
    d_a = d_w / s - float(d_w @ a) / (s * s)
    d_score = d_a * a * (1.0 - a)
    grads.attention.gamma[...] = h.T @ d_score
    d_h += np.outer(d_score, gamma)

    for k in range(params.n_layers - 1, -1, -1):
        lt, p, gp = trace.layers[k], params.layers[k], grads.layers[k]
        if lt.mask is not None:
            d_h = d_h * lt.mask
        d_pre = d_h * (lt.pre_relu > 0)
        gp.w[...] = lt.h_tilde.T @ d_pre
        gp.b[...] = d_pre.sum(axis=0)
        d_filtered = u.T @ (d_pre @ p.w.T)
        d_g = np.einsum("ij,ij->i", d_filtered, lt.h_hat)
        gp.filter.w2[...] = lt.hidden.T @ d_g
        gp.filter.b2[...] = d_g.sum()
        d_z = np.outer(d_g, p.filter.w2) * (1.0 - lt.hidden * lt.hidden)
        gp.filter.w1[...] = lam @ d_z
        gp.filter.b1[...] = d_z.sum(axis=0)
        if k > 0:
            d_h = u @ (lt.g[:, None] * d_filtered)
    return grads


def adam_step(params: ModelParams, grads: Gradients, state: AdamState, cfg: TrainConfig):
    """In-place Adam update with L2 folded into the gradient before the moments."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for p, g, m, v in zip(params.tensors(), grads.tensors(), state.m, state.v):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


def predict_all(graphs: Sequence[Graph], params: ModelParams, cache: BasisCache) -> np.ndarray:
    preds = []
    for g in graphs:
        logits, _ = model_forward(g, params, cache)
        if not np.all(np.isfinite(logits)):
            raise NumericalError(f"non-finite logits for graph {g.graph_id or '?'}")
        preds.append(int(np.argmax(logits)))
    return np.array(preds, dtype=np.int64)


def evaluate(
    graphs: Sequence[Graph], params: ModelParams, cache: BasisCache, n_classes: int
) -> tuple[MetricsReport, ConfusionMatrix]:
    preds = predict_all(graphs, params, cache)
    cm = confusion(preds, [g.label for g in graphs], n_classes)
    return report(cm), cm


def _accuracy(graphs, params, cache) -> float:
    preds = predict_all(graphs, params, cache)
    return float(np.mean(preds == np.array([g.label for g in graphs])))


def train_one(
    dataset: Dataset,
    split: tuple[Sequence[int], Sequence[int], Sequence[int]],
    cfg: TrainConfig,
    run_seed: int,
    cache: BasisCache | None = None,
    progress: Callable[[str], None] | None = None,
) -> RunResult:
    """Train from scratch, keep the parameters of the best validation epoch, test them."""
    train_idx, val_idx, test_idx = (list(s) for s in split)
    if not (train_idx and val_idx and test_idx):
        raise ValidationError("train, validation and test splits must all be nonempty")
    cache = cache if cache is not None else BasisCache()
    graphs = dataset.graphs
    train_set = [graphs[i] for i in train_idx]
    val_set = [graphs[i] for i in val_idx]
    test_set = [graphs[i] for i in test_idx]
    bases = [cache.basis_for(g) for g in train_set]

    params = init_params(dataset.n_features, cfg.hidden, dataset.n_classes, run_seed, cfg.layers)
    state = AdamState.for_params(params)
    shuffle_seq, dropout_seq = np.random.SeedSequence(run_seed).spawn(2)
    shuffle_rng = np.random.Generator(np.random.PCG64(shuffle_seq))
    dropout_rng = np.random.Generator(np.random.PCG64(dropout_seq))

    best_acc, best_epoch, best_params = -1.0, 0, params.copy()
    losses, val_accs = [], []
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        epoch_loss = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            acc = [np.zeros_like(t) for t in params.tensors()]
            batch_loss = 0.0
            for i in batch:
                g = train_set[i]
                logits, trace = forward_with_basis(
                    g.features, bases[i], params, True, dropout_rng, cfg.dropout
                )
                loss, dlogits = cross_entropy(logits, g.label)
                grads = backward(trace, g, bases[i], params, dlogits)
                for total, part in zip(acc, grads.tensors()):
                    total += part
                batch_loss += loss
            if not math.isfinite(batch_loss) or not all(np.all(np.isfinite(t)) for t in acc):
                raise NumericalError(f"non-finite loss or gradient at epoch {epoch}, batch {b}")
            scale = 1.0 / len(batch)
            mean_grads = params.zeros_like()
            for dst, total in zip(mean_grads.tensors(), acc):
                dst[...] = total * scale
            adam_step(params, mean_grads, state, cfg)
            epoch_loss += batch_loss
        losses.append(epoch_loss / len(train_set))
        val_acc = _accuracy(val_set, params, cache)
        val_accs.append(val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch, best_params = val_acc, epoch, params.copy()
        if progress is not None:
            progress(f"epoch {epoch:4d}  loss {losses[-1]:.4f}  val_acc {val_acc:.4f}")

    test_report, test_cm = evaluate(test_set, best_params, cache, dataset.n_classes)
    return RunResult(
        best_val_accuracy=best_acc,
        test=test_report,
        test_confusion=test_cm,
        epoch_of_best=best_epoch,
        train_loss=losses,
        val_accuracy=val_accs,
        params=best_params,
        split=(train_idx, val_idx, test_idx),
        seed=run_seed,
    )


class RunFailure(SBGNNError):
    def __init__(self, run: int, cause: Exception):
        super().__init__(f"run {run} failed: {cause}")
        self.run = run
        self.cause = cause


def summarize(results: Sequence[RunResult], failed: Sequence[int] = ()) -> RunStats:
    per_run = {
        "accuracy": [r.test.accuracy for r in results],
        "precision": [r.test.macro_precision for r in results],
        "recall": [r.test.macro_recall for r in results],
        "f1": [r.test.macro_f1 for r in results],
    }
    n = len(results)
    mean, std = {}, {}
    for name, vals in per_run.items():
        arr = np.asarray(vals, dtype=np.float64)
        mean[name] = float(arr.mean()) if n else float("nan")
        std[name] = float(arr.std(ddof=1)) if n > 1 else 0.0
    return RunStats(n, mean, std, per_run, single_run=(n == 1), failed_runs=list(failed))


def repeated_runs(
    dataset: Dataset,
    cfg: TrainConfig,
    cache: BasisCache | None = None,
    jobs: int = 1,
    keep_going: bool = False,
    progress: Callable[[str], None] | None = None,
) -> tuple[RunStats, list[RunResult | None]]:
    """Run ``cfg.runs`` independent trainings; run ``r`` seeds split and init with ``cfg.seed + r``.

    With ``keep_going`` a diverged run is recorded in ``failed_runs`` instead
    of raising :class:`RunFailure`.
    """
    cache = cache if cache is not None else BasisCache()
    for g in dataset.graphs:
        cache.basis_for(g)

    def one(r: int) -> RunResult | None:
        seed = cfg.seed + r
        split = split_dataset(dataset, cfg.split_ratios, seed)
        try:
            result = train_one(dataset, split, cfg, seed, cache)
        except NumericalError as exc:
            if keep_going:
                log.warning("run %d failed: %s", r, exc)
                return None
            raise RunFailure(r, exc) from exc
        if progress is not None:
            progress(
                f"run {r}: test acc {result.test.accuracy:.4f} "
                f"(best val {result.best_val_accuracy:.4f} at epoch {result.epoch_of_best})"
            )
        return result

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(cfg.runs)))
    else:
        results = [one(r) for r in range(cfg.runs)]
    failed = [r for r, res in enumerate(results) if res is None]
    stats = summarize([res for res in results if res is not None], failed)
    return stats, results


def write_run_outputs(out_dir, cfg: TrainConfig, stats: RunStats, results: Sequence[RunResult | None]) -> Path:
    """``run_<r>/model.json``, ``run_<r>/history.csv`` and ``summary.json``."""
    from .model import save_params

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    for r, res in enumerate(results):
        entry = {"run": r, "seed": cfg.seed + r}
        if res is None:
            entry["status"] = "failed"
            runs.append(entry)
            continue
        run_dir = out / f"run_{r}"
        run_dir.mkdir(exist_ok=True)
        save_params(res.params, run_dir / "model.json")
        with open(run_dir / "history.csv", "w", newline="") as fh:
            fh.write("epoch,train_loss,val_acc\n")
            for e, (loss, acc) in enumerate(zip(res.train_loss, res.val_accuracy), start=1):
                fh.write(f"{e},{loss!r},{acc!r}\n")
        entry.update(
            status="ok",
            best_val_accuracy=res.best_val_accuracy,
            epoch_of_best=res.epoch_of_best,
            test=res.test.to_dict(),
        )
        runs.append(entry)
    summary = {"config": cfg.to_dict(), "stats": stats.to_dict(), "runs": runs}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return out


def load_run_accuracies(run_dir) -> list[float]:
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise FileNotFoundError(f"summary.json not found in {run_dir}")
    doc = json.loads(path.read_text())
    return list(doc["stats"]["per_run"]["accuracy"])


def random_check_problem(seed: int, n_nodes: int, f_in: int = 5, hidden: int = 16, n_classes: int = 3):
    """A random weighted graph and non-trivial parameters for gradient checking."""
    rng = np.random.Generator(np.random.PCG64(seed))
    w = rng.uniform(0.1, 1.0, (n_nodes, n_nodes)) * (rng.random((n_nodes, n_nodes)) < 0.7)
    adj = np.triu(w, 1)
    adj = adj + adj.T
    x = rng.standard_normal((n_nodes, f_in))
    graph = Graph(adj, x, label=int(rng.integers(n_classes)))
    params = init_params(f_in, hidden, n_classes, seed)
    # move off the near-identity init so every path carries signal
    for layer in params.layers:
        layer.filter.w1[...] = rng.normal(0.0, 1.0, layer.filter.w1.shape)
        layer.filter.b1[...] = rng.normal(0.0, 0.5, layer.filter.b1.shape)
        layer.filter.w2[...] = rng.normal(0.0, 0.5, layer.filter.w2.shape)
        layer.b[...] = rng.normal(0.0, 0.1, layer.b.shape)
    params.output.b_out[...] = rng.normal(0.0, 0.1, n_classes)
    return graph, params


def gradient_check(seed: int = 0, n_nodes: int = 6, step: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Max relative error of :func:`backward` against central differences (dropout off).

    Relative error is ``|a - b| / max(|a|, |b|, 1e-8)``. Returns the overall
    maximum and the maximum per parameter tensor.
    """
    if not 3 <= n_nodes <= 16:
        raise ValidationError(f"nodes must lie in [3, 16], got {n_nodes}")
    graph, params = random_check_problem(seed, n_nodes)
    basis = SpectralBasis.from_adjacency(graph.adjacency)

    def loss_at() -> float:
        logits, _ = forward_with_basis(graph.features, basis, params)
        return cross_entropy(logits, graph.label)[0]

    logits, trace = forward_with_basis(graph.features, basis, params, training=True, dropout=0.0)
    _, dlogits = cross_entropy(logits, graph.label)
    grads = backward(trace, graph, basis, params, dlogits)

    per_tensor = {}
    for (name, tensor), analytic in zip(params.named_tensors(), grads.tensors()):
        worst = 0.0
        flat, aflat = tensor.reshape(-1), analytic.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = loss_at()
            flat[k] = orig - step
            down = loss_at()
            flat[k] = orig
            numeric = (up - down) / (2.0 * step)
            a = aflat[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        per_tensor[name] = worst
    return max(per_tensor.values()), per_tensor
