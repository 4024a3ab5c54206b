"""Ablation-based discretization, the bi-level DARTS baseline, and sub-network training."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import WindowedDataset
from .errors import ConfigError, NumericError, StateError
from .hypernet import (
    HyperNetwork,
    argmax_alpha_spec,
    discretize_node,
    extract_spec,
    mask_operation,
)
from .metrics import MetricsReport, mae, mse
from .nnops import Backbone, ForecastModel, ModelConfig
from .searchspace import ArchitectureSpec
from .serialization import dumps

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    K1: int = 5
    K2: int = 1
    K3: int = 50
    patience: int = 10
    eval_every: int = 100
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_fraction: float = 0.06
    batch_size: int = 64
    seed: int = 0
    node_order: list | None = None
    alpha_lr: float = 3e-4
    alpha_weight_decay: float = 1e-3
    eval_batch_size: int = 512

    def __post_init__(self):
        for name in ("K1", "K2", "K3"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.patience < 1 or self.eval_every < 1 or self.batch_size < 1:
            raise ConfigError("patience, eval_every and batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NodeRecord:
    node_id: int
    node: str
    candidates: list
    scores: list  # per candidate; None where not scored
    chosen: str
    chosen_index: int
    val_loss_discretized: float | None = None
    val_loss_recovered: float | None = None
    pre_discretized: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SearchTrace:
    records: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    algorithm: str = "abdarts"

    def to_jsonl(self) -> str:
        return "".join(dumps(r.to_dict()) + "\n" for r in self.records)

    def scoring_events(self) -> int:
        return sum(sum(s is not None for s in r.scores) for r in self.records)


# ---------------------------------------------------------------------------
# training primitives
# ---------------------------------------------------------------------------


def steps_per_epoch(data: WindowedDataset, batch_size: int) -> int:
    return max(1, math.ceil(len(data) / batch_size))


def evaluate_loss(model: Backbone, data: WindowedDataset, batch_size: int = 512) -> float:
    """Mean squared error over every window of ``data`` (eval mode, no tape)."""
    n = len(data)
    if n == 0:
        raise ConfigError("validation data is empty")
    total = 0.0
    for start in range(0, n, batch_size):
        x, y = data.batch(np.arange(start, min(n, start + batch_size)))
        pred = model.predict(x)
        total += float(np.sum((pred - y) ** 2))
    return total / (n * data.num_channels * data.horizon)


def predict_dataset(model: Backbone, data: WindowedDataset, batch_size: int = 512) -> np.ndarray:
    n = len(data)
    out = [model.predict(data.batch(np.arange(s, min(n, s + batch_size)))[0]) for s in range(0, n, batch_size)]
    return np.concatenate(out, axis=0)


class EpochRunner:
    """Shuffled mini-batch gradient steps on the model weights."""

    def __init__(self, model: Backbone, data: WindowedDataset, cfg: SearchConfig,
                 optimizer: dc.AdamW, rng: np.random.Generator):
        if len(data) == 0:
            raise ConfigError("training data is empty")
        self.model = model
        self.data = data
        self.cfg = cfg
        self.optimizer = optimizer
        self.rng = rng
        self.steps = 0

    def batches(self):
        order = self.rng.permutation(len(self.data))
        for start in range(0, len(order), self.cfg.batch_size):
            yield self.data.batch(np.sort(order[start:start + self.cfg.batch_size]))

    def step(self, x, y) -> float:
        self.model.train()
        params = self.model.parameters()
        loss = dc.mse_loss(self.model(x), y)
        if not np.isfinite(loss.data).all():
            dc.current_tape().clear()
            raise NumericError(f"non-finite training loss at step {self.steps}")
        dc.backward(loss)
        self.optimizer.step(params)
        dc.AdamW.zero_grad(params)
        self.steps += 1
        return loss.item()

    def epoch(self) -> float:
        losses = [self.step(x, y) for x, y in self.batches()]
        return float(np.mean(losses))


def _optimizer(cfg: SearchConfig, total_steps: int) -> dc.AdamW:
    schedule = dc.LinearWarmupDecay(max(1, total_steps), cfg.warmup_fraction)
    return dc.AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay, schedule=schedule)


# ---------------------------------------------------------------------------
# AB-DARTS
# ---------------------------------------------------------------------------


def contribution_score(model: HyperNetwork, node_id: int, op_index: int, val: WindowedDataset,
                       batch_size: int = 512) -> float:
    """Validation MSE of the network with one candidate masked.

    This is ``-S(M without o)`` for ``S = -MSE``; the constant ``S(M)`` is
    dropped, so a larger score means removing the candidate hurts more.
    """
    if len(val) == 0:
        raise ConfigError("validation data is empty")
    with mask_operation(model, node_id, op_index):
        return evaluate_loss(model, val, batch_size)


def default_node_order(model: HyperNetwork) -> list[int]:
    return [n.node_id for n in model.nodes]


def _append(path, record: NodeRecord) -> None:
    if path is not None:
        with open(path, "a") as fh:
            fh.write(dumps(record.to_dict()) + "\n")


def ab_darts_search(model: HyperNetwork, train: WindowedDataset, val: WindowedDataset,
                    cfg: SearchConfig, trace_path=None) -> tuple[ArchitectureSpec, SearchTrace]:
    """Warm up with frozen uniform alpha, then score, discretize and recover node by node."""
    if len(val) == 0:
        raise ConfigError("validation data is empty")
    order = list(cfg.node_order) if cfg.node_order is not None else default_node_order(model)
    if sorted(order) != list(range(len(model.nodes))):
        raise ConfigError(f"node order must be a permutation of 0..{len(model.nodes) - 1}")
    if trace_path is not None:
        Path(trace_path).write_text("")
    alpha_before = [a.data.copy() for a in model.alphas()]
    open_nodes = [i for i in order if model.node(i).mask.sum() > 1]
    spe = steps_per_epoch(train, cfg.batch_size)
    optimizer = _optimizer(cfg, (cfg.K1 + len(open_nodes) * cfg.K2) * spe)
    runner = EpochRunner(model, train, cfg, optimizer, dc.make_rng(cfg.seed))
    trace = SearchTrace(algorithm="abdarts")
    timings = {"supernet_train": 0.0, "scoring": 0.0, "recovery": 0.0}
    trace.timings = timings
    frozen = [(a, a.requires_grad) for a in model.alphas()]
    for a, _ in frozen:
        a.requires_grad = False

    try:
        t0 = time.perf_counter()
        if open_nodes:
            for epoch in range(cfg.K1):
                loss = runner.epoch()
                log.info("warm-up epoch %d/%d train mse %.6f", epoch + 1, cfg.K1, loss)
        timings["supernet_train"] += time.perf_counter() - t0

        for node_id in order:
            node = model.node(node_id)
            idx = node.unmasked()
            if idx.size == 1:
                rec = NodeRecord(node_id, node.name, node.labels, [None] * len(node.candidates),
                                 node.labels[idx[0]], int(idx[0]), pre_discretized=True)
                discretize_node(model, node_id, int(idx[0]))
                trace.records.append(rec)
                _append(trace_path, rec)
                continue
            t0 = time.perf_counter()
            scores = [None] * len(node.candidates)
            for j in idx:
                scores[j] = contribution_score(model, node_id, int(j), val, cfg.eval_batch_size)
            best = max(idx, key=lambda j: (scores[j], -j))
            discretize_node(model, node_id, int(best))
            before = evaluate_loss(model, val, cfg.eval_batch_size)
            timings["scoring"] += time.perf_counter() - t0
            t0 = time.perf_counter()
            for _ in range(cfg.K2):
                runner.epoch()
            after = evaluate_loss(model, val, cfg.eval_batch_size)
            timings["recovery"] += time.perf_counter() - t0
            rec = NodeRecord(node_id, node.name, node.labels, scores, node.labels[best], int(best), before, after)
            log.info("node %s -> %s (val %.6f -> %.6f)", node.name, rec.chosen, before, after)
            trace.records.append(rec)
            _append(trace_path, rec)
    except NumericError as exc:
        exc.trace = trace
        raise
    finally:
        for a, flag in frozen:
            a.requires_grad = flag

    for a, snap in zip(model.alphas(), alpha_before):
        if not np.array_equal(a.data, snap):
            raise StateError("architectural parameters changed during AB-DARTS")
    trace.timings["optimizer_steps"] = runner.steps
    return extract_spec(model), trace


# ---------------------------------------------------------------------------
# DARTS baseline
# ---------------------------------------------------------------------------


def darts_search(model: HyperNetwork, train: WindowedDataset, val: WindowedDataset,
                 cfg: SearchConfig, freeze_alpha: bool = False) -> tuple[ArchitectureSpec, SearchTrace]:
    """First-order bi-level search; the train windows are split in half for weights and alpha.

    The number of weight updates matches an AB-DARTS run on the same config:
    ``(K1 + open_nodes * K2) * steps_per_epoch(train)``.
    """
    half = len(train) // 2
    if half < 1:
        raise ConfigError("training data too small to split for bi-level optimization")
    d1 = train.subset(0, half, "train")
    d2 = train.subset(half, None, "train")
    open_nodes = [n for n in model.nodes if n.mask.sum() > 1]
    total = (cfg.K1 + len(open_nodes) * cfg.K2) * steps_per_epoch(train, cfg.batch_size)
    rng_w, rng_a = dc.spawn_rngs(dc.make_rng(cfg.seed), 2)
    weights = EpochRunner(model, d1, cfg, _optimizer(cfg, total), rng_w)
    alpha_opt = dc.AdamW(lr=cfg.alpha_lr, betas=(0.5, 0.999), weight_decay=cfg.alpha_weight_decay)
    alphas = [n.alpha for n in open_nodes]
    alpha_batches = _cycle(lambda: EpochRunner(model, d2, cfg, alpha_opt, rng_a).batches())
    weight_batches = _cycle(weights.batches)
    t0 = time.perf_counter()
    for _ in range(total if open_nodes else 0):
        if not freeze_alpha:
            x, y = next(alpha_batches)
            model.train()
            loss = dc.mse_loss(model(x), y)
            dc.backward(loss)
            alpha_opt.step(alphas)
            dc.AdamW.zero_grad(alphas)
            dc.AdamW.zero_grad(model.parameters())
        x, y = next(weight_batches)
        weights.step(x, y)
        dc.AdamW.zero_grad(alphas)
    trace = SearchTrace(algorithm="darts")
    trace.timings = {"supernet_train": time.perf_counter() - t0, "scoring": 0.0, "recovery": 0.0,
                     "optimizer_steps": weights.steps}
    spec = argmax_alpha_spec(model)
    for node in model.nodes:
        masked = np.where(node.mask, node.alpha.data, -np.inf)
        best = int(np.argmax(masked))
        scores = [float(a) if m else None for a, m in zip(node.alpha.data, node.mask)]
        trace.records.append(NodeRecord(node.node_id, node.name, node.labels, scores, node.labels[best], best,
                                        pre_discretized=bool(node.mask.sum() == 1)))
    return spec, trace


def _cycle(make_iter):
    while True:
        yield from make_iter()


# ---------------------------------------------------------------------------
# sub-network training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ForecastModel
    report: MetricsReport
    evaluations: list
    best_evaluation: int
    steps: int
    seconds: float


def fit(model: Backbone, train: WindowedDataset, val: WindowedDataset, cfg: SearchConfig,
        epochs: int | None = None, early_stopping: bool = True) -> tuple[list, int, int]:
    """Train with periodic validation; restores the best checkpoint.

    Returns ``(validation_losses, best_evaluation_number, steps)`` with
    1-based evaluation numbers.
    """
    epochs = cfg.K3 if epochs is None else epochs
    spe = steps_per_epoch(train, cfg.batch_size)
    runner = EpochRunner(model, train, cfg, _optimizer(cfg, epochs * spe), dc.make_rng(cfg.seed))
    history: list[float] = []
    best_loss, best_state, best_eval, stale = math.inf, None, 0, 0

    def evaluate() -> bool:
        nonlocal best_loss, best_state, best_eval, stale
        loss = evaluate_loss(model, val, cfg.eval_batch_size)
        history.append(loss)
        if loss < best_loss:
            best_loss, best_state, best_eval, stale = loss, model.state_dict(), len(history), 0
        else:
            stale += 1
        return early_stopping and stale >= cfg.patience

    stop = False
    for _ in range(epochs):
        for x, y in runner.batches():
            runner.step(x, y)
            if runner.steps % cfg.eval_every == 0 and evaluate():
                stop = True
                break
        if stop:
            break
    if not stop and (not history or runner.steps % cfg.eval_every):
        evaluate()
    model.load_state_dict(best_state)
    return history, best_eval, runner.steps


def train_subnet(spec: ArchitectureSpec, train: WindowedDataset, val: WindowedDataset,
                 cfg: SearchConfig, model_cfg: ModelConfig, seed: int | None = None,
                 early_stopping: bool = True) -> TrainResult:
    """Randomly initialize ``spec`` and train it for up to K3 epochs with early stopping."""
    seed = cfg.seed if seed is None else seed
    model = ForecastModel(model_cfg, spec, seed=seed)
    run_cfg = SearchConfig(**{**cfg.to_dict(), "seed": seed})
    t0 = time.perf_counter()
    history, best, steps = fit(model, train, val, run_cfg, early_stopping=early_stopping)
    seconds = time.perf_counter() - t0
    pred = predict_dataset(model, val, cfg.eval_batch_size)
    report = MetricsReport(mse=mse(val.targets, pred), mae=mae(val.targets, pred), horizon=val.horizon)
    return TrainResult(model, report, history, best, steps, seconds)
