"""Toy pre-norm decoder standing in for the frozen base LLM.

Attention uses grouped key/value heads: the Q projection emits ``q_out``
features split over ``n_heads`` heads while K and V emit ``v_out`` features,
so Q and V adapters see unequal output widths as in the 7B reference shape.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError, InputError
from .hypernet import HyperConfig, HyperNetwork, hyper_forward, init_hypernet
from .lora import TYPES, AdapterSet, LoRAPair, Modulation, Site, delta_weight
from .numerics import (
    Rng,
    Tensor,
    as_tensor,
    causal_mask_add,
    concat,
    embedding,
    gelu,
    layer_norm,
    load_tensor,
    matmul,
    mul,
    reshape,
    save_tensor,
    scale,
    softmax,
    transpose,
)

MODES = ("zhyper-diag", "zhyper-square", "mtl", "oracle")


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 16
    max_seq: int = 32
    q_out: int = 64
    v_out: int = 16
    out_std: float = 0.0625  # std of the frozen output head

    def __post_init__(self):
        ints = (self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size,
                self.max_seq, self.q_out, self.v_out)
        if any(int(v) <= 0 for v in ints):
            raise ConfigError(f"model dimensions must be positive: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.q_out % self.n_heads:
            raise ConfigError("q_out must be divisible by n_heads")
        if self.v_out % self.head_dim or self.n_heads % (self.v_out // self.head_dim):
            raise ConfigError("v_out must be a multiple of the head dim that divides the head count")

    @property
    def head_dim(self) -> int:
        return self.q_out // self.n_heads

    @property
    def n_kv_heads(self) -> int:
        return self.v_out // self.head_dim

    def proj_dims(self) -> dict[str, tuple[int, int]]:
        return {"Q": (self.d_model, self.q_out), "V": (self.d_model, self.v_out)}


PRESETS = {
    "desk-7b-shape": ModelConfig(),
}


def config_to_text(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def config_from_text(cls, text: str):
    kinds = {f.name: f.type for f in fields(cls)}
    values = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, raw = (s.strip() for s in line.partition("="))
        if key not in kinds:
            continue
        values[key] = parse_value(raw, kinds[key])
    return cls(**values)


def parse_value(raw: str, kind):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1")
    return raw


# ------------------------------------------------------------------ weights

BaseWeights = dict  # name -> frozen Tensor


def base_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    shapes = {
        "tok_emb": ((cfg.vocab_size, cfg.d_model), "embedding"),
        "pos_emb": ((cfg.max_seq, cfg.d_model), "embedding"),
    }
    for layer in range(1, cfg.n_layers + 1):
        p = f"layer{layer}."
        shapes.update({
            p + "ln1.g": ((cfg.d_model,), "norm"),
            p + "ln1.b": ((cfg.d_model,), "norm"),
            p + "Wq": ((cfg.d_model, cfg.q_out), "attention"),
            p + "Wk": ((cfg.d_model, cfg.v_out), "attention"),
            p + "Wv": ((cfg.d_model, cfg.v_out), "attention"),
            p + "Wo": ((cfg.q_out, cfg.d_model), "attention"),
            p + "ln2.g": ((cfg.d_model,), "norm"),
            p + "ln2.b": ((cfg.d_model,), "norm"),
            p + "W1": ((cfg.d_model, cfg.d_ff), "feedforward"),
            p + "b1": ((cfg.d_ff,), "feedforward"),
            p + "W2": ((cfg.d_ff, cfg.d_model), "feedforward"),
            p + "b2": ((cfg.d_model,), "feedforward"),
        })
    shapes["ln_f.g"] = ((cfg.d_model,), "norm")
    shapes["ln_f.b"] = ((cfg.d_model,), "norm")
    shapes["W_out"] = ((cfg.d_model, cfg.vocab_size), "output")
    return shapes


def init_base(cfg: ModelConfig, rng: Rng) -> BaseWeights:
    base = {}
    for name, (shape, _) in base_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf in ("b", "b1", "b2"):
            data = np.zeros(shape)
        elif name == "tok_emb":
            data = rng.child(name).gaussian(shape)
        elif name == "pos_emb":
            data = rng.child(name).gaussian(shape, 0.0, 0.5)
        elif name == "W_out":
            data = rng.child(name).gaussian(shape, 0.0, cfg.out_std)
        else:
            data = rng.child(name).gaussian(shape, 0.0, 1.0 / np.sqrt(shape[0]))
        base[name] = Tensor(data)
    return base


def base_checksum(base: BaseWeights) -> str:
    h = hashlib.sha256()
    for name in sorted(base):
        h.update(name.encode())
        h.update(np.ascontiguousarray(base[name].data).tobytes())
    return h.hexdigest()


# ------------------------------------------------------------------ forward

DeltaFn = Callable[[Site, Tensor], Tensor]


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    toks = np.asarray(tokens)
    if toks.ndim not in (1, 2) or toks.shape[-1] == 0:
        raise InputError(f"tokens must be a non-empty (T,) or (B, T) array, got shape {toks.shape}")
    if not np.issubdtype(toks.dtype, np.integer):
        raise InputError("token ids must be integers")
    if toks.shape[-1] > cfg.max_seq:
        raise InputError(f"sequence length {toks.shape[-1]} exceeds max_seq {cfg.max_seq}")
    if toks.min() < 0 or toks.max() >= cfg.vocab_size:
        raise InputError(f"token ids must lie in [0, {cfg.vocab_size})")
    return toks


def run_decoder(
    cfg: ModelConfig,
    base: BaseWeights,
    tokens,
    delta_fn: DeltaFn | None = None,
    weights: dict[Site, Tensor] | None = None,
    perturb: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    """Decoder logits. ``delta_fn`` adds an adapter branch at Q/V sites;
    ``weights`` replaces Q/V matrices with materialized ones."""
    toks = _check_tokens(cfg, tokens)
    single = toks.ndim == 1
    if single:
        toks = toks[None, :]
    n, seq = toks.shape
    hd, n_kv = cfg.head_dim, cfg.n_kv_heads
    group = cfg.n_heads // n_kv
    x = embedding(base["tok_emb"], toks) + embedding(base["pos_emb"], np.arange(seq))
    if perturb is not None:
        x = perturb(x)

    def project(layer: int, t: str, h: Tensor) -> Tensor:
        site = (layer, t)
        w = weights.get(site) if weights else None
        out = matmul(h, w if w is not None else base[f"layer{layer}.W{t.lower()}"])
        if delta_fn is not None:
            d = delta_fn(site, h)
            if d is not None:
                out = out + d
        return out

    for layer in range(1, cfg.n_layers + 1):
        p = f"layer{layer}."
        h = layer_norm(x, base[p + "ln1.g"], base[p + "ln1.b"])
        q = reshape(project(layer, "Q", h), (n, seq, n_kv, group, hd))
        q = transpose(q, (0, 2, 3, 1, 4))
        k = reshape(matmul(h, base[p + "Wk"]), (n, seq, n_kv, 1, hd))
        k = transpose(k, (0, 2, 3, 4, 1))
        v = reshape(project(layer, "V", h), (n, seq, n_kv, 1, hd))
        v = transpose(v, (0, 2, 3, 1, 4))
        att = softmax(causal_mask_add(scale(matmul(q, k), 1.0 / np.sqrt(hd))))
        ctx = transpose(matmul(att, v), (0, 3, 1, 2, 4))
        x = x + matmul(reshape(ctx, (n, seq, cfg.q_out)), base[p + "Wo"])
        h2 = layer_norm(x, base[p + "ln2.g"], base[p + "ln2.b"])
        ff = gelu(matmul(h2, base[p + "W1"]) + base[p + "b1"])
        x = x + matmul(ff, base[p + "W2"]) + base[p + "b2"]
    logits = matmul(layer_norm(x, base["ln_f.g"], base["ln_f.b"]), base["W_out"])
    return reshape(logits, logits.shape[1:]) if single else logits


def forward_base(cfg: ModelConfig, base: BaseWeights, tokens) -> Tensor:
    return run_decoder(cfg, base, tokens)


# ------------------------------------------------------- conditioned model

@dataclass
class ConditionedModel:
    cfg: ModelConfig
    base: BaseWeights
    mode: str
    pairs: dict[Site, LoRAPair]
    hyper: HyperNetwork | None = None
    task_pairs: list[dict[Site, LoRAPair]] | None = None  # oracle mode only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode.startswith("zhyper") and self.hyper is None:
            raise ConfigError(f"{self.mode} needs a hypernetwork")
        if self.mode in ("mtl", "oracle") and self.hyper is not None:
            raise ConfigError(f"{self.mode} mode has no hypernetwork")
        if self.mode == "oracle" and not self.task_pairs:
            raise ConfigError("oracle mode needs per-task LoRA pairs")

    @property
    def rank(self) -> int:
        return next(iter(self.pairs.values())).rank

    @property
    def variant(self) -> str:
        return "square" if self.mode == "zhyper-square" else "diag"

    def trainable(self) -> dict[str, Tensor]:
        """The trainable set: LoRA factors plus every hypernetwork parameter."""
        out: dict[str, Tensor] = {}
        if self.mode == "oracle":
            for k, pairs in enumerate(self.task_pairs):
                for (layer, t), pair in pairs.items():
                    out[f"lora.task{k}.{layer}.{t}.A"] = pair.A
                    out[f"lora.task{k}.{layer}.{t}.B"] = pair.B
        else:
            for (layer, t), pair in self.pairs.items():
                out[f"lora.{layer}.{t}.A"] = pair.A
                out[f"lora.{layer}.{t}.B"] = pair.B
        if self.hyper is not None:
            out.update({f"hyper.{k}": v for k, v in self.hyper.params.items()})
        return out


def init_pairs(cfg: ModelConfig, rank: int, rng: Rng, b_std: float = 0.0, scale_: float = 1.0) -> dict[Site, LoRAPair]:
    """A ~ N(0, 1/d_in); B zero unless ``b_std`` is set (warm start at the base model)."""
    pairs = {}
    for layer in range(1, cfg.n_layers + 1):
        for t, (d_in, d_out) in cfg.proj_dims().items():
            r = rng.child(f"lora.{layer}.{t}")
            A = r.child("A").gaussian((d_in, rank), 0.0, 1.0 / np.sqrt(d_in))
            B = r.child("B").gaussian((rank, d_out), 0.0, b_std)
            pairs[(layer, t)] = LoRAPair(Tensor(A, True), Tensor(B, True), scale_)
    return pairs


def build_model(
    cfg: ModelConfig,
    mode: str,
    rank: int,
    rng: Rng,
    d_c: int,
    n_tasks: int = 1,
    base: BaseWeights | None = None,
    hyper_cfg: HyperConfig | None = None,
    lora_scale: float = 1.0,
) -> ConditionedModel:
    base = base if base is not None else init_base(cfg, rng.child("base"))
    pairs = init_pairs(cfg, rank, rng.child("lora"), scale_=lora_scale)
    hyper = task_pairs = None
    if mode.startswith("zhyper"):
        if hyper_cfg is None:
            hyper_cfg = HyperConfig(n_layers=cfg.n_layers, d_c=d_c, rank=rank)
        hyper_cfg = replace(hyper_cfg, variant=mode.split("-", 1)[1])
        if hyper_cfg.n_layers != cfg.n_layers or hyper_cfg.rank != rank or hyper_cfg.d_c != d_c:
            raise ConfigError("hypernetwork config disagrees with model layers, rank or d_c")
        hyper = init_hypernet(hyper_cfg, rng.child("hyper"))
    elif mode == "oracle":
        task_pairs = [init_pairs(cfg, rank, rng.child(f"lora.task{k}"), scale_=lora_scale) for k in range(n_tasks)]
    return ConditionedModel(cfg, base, mode, pairs, hyper, task_pairs)


def _batch_contexts(m: ConditionedModel, contexts, n: int) -> Tensor:
    c = as_tensor(contexts)
    if c.ndim == 1:
        c = reshape(c, (1, c.shape[0]))
    if c.shape[0] == 1 and n > 1:
        c = embedding(c, np.zeros(n, dtype=np.int64))
    if c.shape[0] != n:
        raise DimensionError(f"{c.shape[0]} contexts for a batch of {n} sequences")
    return c


def _lowrank(pair: LoRAPair, h: Tensor, mid: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    u = matmul(h, pair.A)
    if mid is not None:
        u = mid(u)
    out = matmul(u, pair.B)
    return out if pair.scale == 1.0 else scale(out, pair.scale)


def conditioned_delta_fn(m: ConditionedModel, contexts, n: int, task=None, unconditioned: bool = False) -> DeltaFn:
    if unconditioned or m.mode == "mtl":
        return lambda site, h: _lowrank(m.pairs[site], h)
    if m.mode == "oracle":
        if task is None:
            raise ContractError("oracle mode needs task indices")
        ids = np.broadcast_to(np.asarray(task, dtype=np.int64), (n,))
        stacked: dict[Site, tuple[Tensor, Tensor]] = {}
        for site in m.pairs:
            As = concat([reshape(tp[site].A, (1,) + tp[site].A.shape) for tp in m.task_pairs], axis=0)
            Bs = concat([reshape(tp[site].B, (1,) + tp[site].B.shape) for tp in m.task_pairs], axis=0)
            stacked[site] = (embedding(As, ids), embedding(Bs, ids))

        def oracle_fn(site, h):
            A, B = stacked[site]
            return matmul(matmul(h, A), B)

        return oracle_fn
    c = _batch_contexts(m, contexts, n)
    sig = m.hyper.signals(c)
    r = m.rank

    def zhyper_fn(site, h):
        z = sig[site]
        if m.mode == "zhyper-diag":
            return _lowrank(m.pairs[site], h, lambda u: mul(u, reshape(z, (n, 1, r))))
        return _lowrank(m.pairs[site], h, lambda u: matmul(u, z))

    return zhyper_fn


def forward_conditioned(m: ConditionedModel, tokens, contexts=None, task=None, perturb=None) -> Tensor:
    """Logits with every Q/V projection adapted by ``A M(c) B``.

    ``contexts`` is one embedding ``(d_c,)`` shared by the batch or ``(B, d_c)``;
    ``task`` (oracle mode) selects the per-task pair.
    """
    toks = np.asarray(tokens)
    n = 1 if toks.ndim == 1 else toks.shape[0]
    fn = conditioned_delta_fn(m, contexts, n, task)
    return run_decoder(m.cfg, m.base, tokens, delta_fn=fn, perturb=perturb)


def forward_unconditioned(m: ConditionedModel, tokens) -> Tensor:
    """The ``z = 1`` path: shared pairs with identity modulation (base model in oracle mode)."""
    if m.mode == "oracle":
        return forward_base(m.cfg, m.base, tokens)
    toks = np.asarray(tokens)
    n = 1 if toks.ndim == 1 else toks.shape[0]
    return run_decoder(m.cfg, m.base, tokens, delta_fn=conditioned_delta_fn(m, None, n, unconditioned=True))


def materialize_adapter(m: ConditionedModel, contexts=None, task: int | None = None) -> AdapterSet:
    """Evaluate the hypernetwork once per site and bake the signals into an adapter set."""
    entries: dict[Site, tuple[LoRAPair, Modulation]] = {}
    for site, pair in m.pairs.items():
        if m.mode == "oracle":
            if task is None:
                raise ContractError("oracle mode needs a task index")
            tp = m.task_pairs[task][site]
            entries[site] = (_frozen(tp), Modulation.identity())
        elif m.mode == "mtl":
            entries[site] = (_frozen(pair), Modulation.identity())
        else:
            layer, t = site
            mod = hyper_forward(m.hyper, contexts, t, layer)
            entries[site] = (_frozen(pair), Modulation(mod.kind, Tensor(mod.value.data.copy())))
    return AdapterSet(entries)


def _frozen(pair: LoRAPair) -> LoRAPair:
    return LoRAPair(Tensor(pair.A.data.copy()), Tensor(pair.B.data.copy()), pair.scale)


def forward_materialized(cfg: ModelConfig, base: BaseWeights, adapters: AdapterSet, tokens) -> Tensor:
    """Forward pass with dense ``W_base + ΔW`` at every adapted site."""
    weights = {}
    for site, (pair, mod) in adapters.entries.items():
        layer, t = site
        w = base[f"layer{layer}.W{t.lower()}"]
        if w.shape != (pair.d_in, pair.d_out):
            raise DimensionError(f"adapter at {site} has shape ({pair.d_in}, {pair.d_out}), base has {w.shape}")
        weights[site] = Tensor(w.data + delta_weight(pair, mod).data)
    return run_decoder(cfg, base, tokens, weights=weights)


def signal_size(m: ConditionedModel) -> int:
    """Values emitted per context: L*|T|*r (diag) or L*|T|*r^2 (square); 0 without a hypernetwork."""
    if m.hyper is None:
        return 0
    return m.cfg.n_layers * len(TYPES) * m.hyper.cfg.head_out


# ---------------------------------------------------------------- checkpoint

def save_tensors(directory, tensors: dict[str, Tensor], roles: dict[str, str] | None = None) -> None:
    """Directory of ZTSR files plus ``manifest.txt`` lines ``name shape role``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(tensors):
        t = tensors[name]
        save_tensor(directory / f"{name}.ztsr", t)
        shape = "x".join(str(d) for d in t.shape) or "scalar"
        lines.append(f"{name} {shape} {(roles or {}).get(name, 'param')}\n")
    (directory / "manifest.txt").write_text("".join(lines))


def load_tensors(directory, requires_grad: bool = False) -> dict[str, Tensor]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"{directory}: missing manifest.txt")
    out = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, shape, _role = line.split()
        arr = load_tensor(directory / f"{name}.ztsr")
        want = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        if arr.shape != want:
            raise FormatError(f"{name}: manifest shape {want} but file holds {arr.shape}")
        out[name] = Tensor(arr, requires_grad=requires_grad)
    return out


def save_base(directory, cfg: ModelConfig, base: BaseWeights) -> None:
    roles = {k: role for k, (_, role) in base_shapes(cfg).items()}
    save_tensors(directory, base, roles)
    Path(directory, "config.txt").write_text(config_to_text(cfg))


def load_base(directory) -> tuple[ModelConfig, BaseWeights]:
    cfg = config_from_text(ModelConfig, Path(directory, "config.txt").read_text())
    base = load_tensors(directory)
    if set(base) != set(base_shapes(cfg)):
        raise FormatError(f"{directory}: tensor names do not match the model config")
    return cfg, base


def file_digest(path: os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
