"""Supervised fine-tuning of the adapters and hypernetwork over (dataset, context) samples."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .contexts import ContextRecord
from .errors import ConfigError, ContractError, NonFiniteLossError
from .hypernet import HyperConfig, HyperNetwork
from .lora import LoRAPair
from .model import (
    ConditionedModel,
    ModelConfig,
    config_from_text,
    forward_conditioned,
    load_base,
    load_tensors,
    save_base,
    save_tensors,
)
from .numerics import Rng, Tensor, add, backward, cross_entropy, zero_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_lr: float = 2.5e-5
    batch_size: int = 8
    grad_accum: int = 1
    warmup_fraction: float = 0.2
    label_smoothing: float = 0.1
    weight_decay: float = 0.1
    neftune_alpha: float = 5.0
    steps: int = 100
    seed: int = 0
    mode: str = "zhyper-diag"
    rank: int = 8
    lora_scale: float = 1.0
    context_per_batch: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if self.batch_size < 1 or self.grad_accum < 1 or self.steps < 1 or self.rank < 1:
            raise ConfigError("batch_size, grad_accum, steps and rank must be >= 1")
        if self.neftune_alpha < 0:
            raise ConfigError("neftune_alpha must be non-negative")
        if self.mode not in ("zhyper-diag", "zhyper-square", "mtl", "oracle"):
            raise ConfigError(f"unknown mode {self.mode!r}")


@dataclass
class Dataset:
    id: str
    train_x: np.ndarray  # (N, T) token ids
    train_y: np.ndarray  # (N, T) targets, -1 = ignored
    eval_x: np.ndarray | None = None
    eval_y: np.ndarray | None = None


@dataclass
class DatasetBundle:
    datasets: list[Dataset]
    contexts: list[list[ContextRecord]] = field(default_factory=list)

    def __post_init__(self):
        if self.contexts:
            if len(self.contexts) != len(self.datasets):
                raise ConfigError("one context list per dataset is required")
            for d, cs in zip(self.datasets, self.contexts):
                if not cs:
                    raise ConfigError(f"dataset {d.id} has no contexts")
                for c in cs:
                    if c.dataset_id != d.id:
                        raise ConfigError(f"context {c.id} references {c.dataset_id}, not {d.id}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    contexts: np.ndarray  # (B, d_c)
    tasks: np.ndarray  # (B,)
    context_ids: list[str]


def sft_loss(logits: Tensor, targets, smoothing: float = 0.0) -> Tensor:
    """Label-smoothed cross-entropy, averaged over non-ignored target tokens."""
    return cross_entropy(logits, targets, smoothing)


def neftune_perturb(embedded: Tensor, alpha: float, rng: Rng) -> Tensor:
    """Add ``U(-1, 1) * alpha / sqrt(seq * d)`` noise to each (seq, d) slice."""
    if alpha < 0:
        raise ContractError("alpha must be non-negative")
    if alpha == 0:
        return embedded
    seq, d = embedded.shape[-2:]
    noise = rng.uniform(embedded.shape, -1.0, 1.0) * (alpha / math.sqrt(seq * d))
    return add(embedded, Tensor(noise))


def sample_batch(bundle: DatasetBundle, rng: Rng, batch_size: int, per_batch: bool = False) -> Batch:
    """Dataset uniform over [n], example uniform in D_i, context uniform in C_i, per element."""
    n = len(bundle.datasets)
    if n == 0 or not bundle.contexts:
        raise ConfigError("cannot sample from an empty bundle")
    xs, ys, cs, tasks, ids = [], [], [], [], []
    shared = None
    for _ in range(batch_size):
        if per_batch and shared is not None:
            i, ctx = shared
        else:
            i = int(rng.integers(n))
            ctx = bundle.contexts[i][int(rng.integers(len(bundle.contexts[i])))]
            shared = (i, ctx)
        d = bundle.datasets[i]
        if len(d.train_x) == 0:
            raise ConfigError(f"dataset {d.id} has no training examples")
        k = int(rng.integers(len(d.train_x)))
        xs.append(d.train_x[k])
        ys.append(d.train_y[k])
        cs.append(ctx.embedding)
        tasks.append(i)
        ids.append(ctx.id)
    return Batch(np.stack(xs), np.stack(ys), np.stack(cs), np.array(tasks), ids)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_fraction`` of the run, then linear decay towards zero."""
    total = cfg.steps
    warm = int(round(cfg.warmup_fraction * total))
    if step < warm:
        return cfg.max_lr * (step + 1) / warm
    return cfg.max_lr * (total - step) / max(total - warm, 1)


def adamw_update(params: dict[str, Tensor], state: OptimizerState, lr: float, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        decayed = p.data * (1.0 - lr * cfg.weight_decay)
        p.data = decayed - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def batch_loss(model: ConditionedModel, batch: Batch, smoothing: float, perturb=None) -> Tensor:
    logits = forward_conditioned(model, batch.x, batch.contexts, task=batch.tasks, perturb=perturb)
    return sft_loss(logits, batch.y, smoothing)


def train_step(
    model: ConditionedModel,
    batches: list[Batch] | Batch,
    cfg: TrainConfig,
    state: OptimizerState,
    rng: Rng | None = None,
) -> tuple[float, float]:
    """One optimizer update over ``grad_accum`` micro-batches; returns ``(loss, lr)``."""
    if isinstance(batches, Batch):
        batches = [batches]
    params = model.trainable()
    zero_grad(params.values())
    lr = lr_at(state.step, cfg)
    total = 0.0
    for b in batches:
        perturb = None
        if rng is not None and cfg.neftune_alpha > 0:
            perturb = lambda e: neftune_perturb(e, cfg.neftune_alpha, rng)  # noqa: E731
        loss = batch_loss(model, b, cfg.label_smoothing, perturb)
        value = loss.item()
        if not math.isfinite(value):
            gnorm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None))
            raise NonFiniteLossError(f"non-finite loss at step {state.step}, lr {lr:.3g}, grad-norm {gnorm:.3g}")
        backward(loss * (1.0 / len(batches)))
        total += value / len(batches)
    adamw_update(params, state, lr, cfg)
    return total, lr


@dataclass
class TrainResult:
    trace: list[tuple[int, float, float]]
    state: OptimizerState


def train(
    model: ConditionedModel,
    bundle: DatasetBundle,
    cfg: TrainConfig,
    state: OptimizerState | None = None,
    progress: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    state = state or OptimizerState()
    root = Rng(cfg.seed)
    data_rng, noise_rng = root.child("batches"), root.child("neftune")
    trace = []
    while state.step < cfg.steps:
        step = state.step
        batches = [sample_batch(bundle, data_rng, cfg.batch_size, cfg.context_per_batch)
                   for _ in range(cfg.grad_accum)]
        loss, lr = train_step(model, batches, cfg, state, noise_rng)
        trace.append((step, lr, loss))
        if progress is not None:
            progress(step, lr, loss)
    return TrainResult(trace, state)


# ---------------------------------------------------------------- run files

def write_loss_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in trace:
            w.writerow([step, repr(float(lr)), repr(float(loss))])


def read_loss_trace(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(s), float(lr), float(loss)) for s, lr, loss in rows]


def save_run(directory, model: ConditionedModel, cfg: TrainConfig, result: TrainResult, n_tasks: int = 0) -> None:
    """Run checkpoint: base model, trainable tensors, optimizer moments, config echo, loss trace."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_base(directory / "base", model.cfg, model.base)
    save_tensors(directory / "theta", model.trainable())
    opt = {f"m.{k}": Tensor(v) for k, v in result.state.m.items()}
    opt.update({f"v.{k}": Tensor(v) for k, v in result.state.v.items()})
    save_tensors(directory / "optimizer", opt)
    (directory / "optimizer" / "step.txt").write_text(f"{result.state.step}\n")
    lines = [f"{k} = {v}\n" for k, v in asdict(cfg).items()]
    lines.append(f"n_tasks = {n_tasks}\n")
    if model.hyper is not None:
        lines += [f"hyper.{k} = {v}\n" for k, v in asdict(model.hyper.cfg).items()]
    (directory / "config.txt").write_text("".join(lines))
    write_loss_trace(directory / "loss_trace.csv", result.trace)


def load_run(directory) -> tuple[ConditionedModel, TrainConfig, OptimizerState]:
    directory = Path(directory)
    text = (directory / "config.txt").read_text()
    cfg = config_from_text(TrainConfig, text)
    hyper_lines = "\n".join(line[len("hyper."):] for line in text.splitlines() if line.startswith("hyper."))
    model_cfg, base = load_base(directory / "base")
    theta = load_tensors(directory / "theta", requires_grad=True)

    def pairs_from(prefix: str):
        out = {}
        for layer in range(1, model_cfg.n_layers + 1):
            for t in ("Q", "V"):
                out[(layer, t)] = LoRAPair(theta[f"{prefix}{layer}.{t}.A"], theta[f"{prefix}{layer}.{t}.B"], cfg.lora_scale)
        return out

    hyper = task_pairs = None
    if cfg.mode == "oracle":
        n_tasks = len({k.split(".")[1] for k in theta if k.startswith("lora.task")})
        task_pairs = [pairs_from(f"lora.task{k}.") for k in range(n_tasks)]
        pairs = task_pairs[0]
    else:
        pairs = pairs_from("lora.")
    if cfg.mode.startswith("zhyper"):
        hcfg = config_from_text(HyperConfig, hyper_lines)
        hyper = HyperNetwork(hcfg, {k[len("hyper."):]: v for k, v in theta.items() if k.startswith("hyper.")})
    model = ConditionedModel(model_cfg, base, cfg.mode, pairs, hyper, task_pairs)
    state = OptimizerState(step=int((directory / "optimizer" / "step.txt").read_text()))
    for k, v in load_tensors(directory / "optimizer").items():
        kind, name = k.split(".", 1)
        (state.m if kind == "m" else state.v)[name] = v.data
    return model, cfg, state


def train_config_fields() -> set[str]:
    return {f.name for f in fields(TrainConfig)}


__all__ = [
    "Batch", "Dataset", "DatasetBundle", "ModelConfig", "OptimizerState", "TrainConfig", "TrainResult",
    "adamw_update", "batch_loss", "load_run", "lr_at", "neftune_perturb", "sample_batch", "save_run",
    "sft_loss", "train", "train_step",
]
