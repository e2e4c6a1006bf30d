"""Factorized hypernetwork: (context ‖ type embedding ‖ layer embedding) -> modulation.

Wiring, with every hidden linear followed by GELU::

    input projection   (d_c + d_t + d_l) -> d_mlp_in
    block k (k < last) d_mlp_in -> d_mlp_hidden -> d_mlp_in
    last block         d_mlp_in -> d_mlp_hidden -> d_mlp_out
    head               d_mlp_out -> r   (diag)  or  r*r (square)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .lora import TYPES, Modulation
from .numerics import Rng, Tensor, as_tensor, concat, embedding, gelu, matmul, reshape


@dataclass
class HyperConfig:
    n_layers: int
    d_c: int = 1024
    d_t: int = 64
    d_l: int = 64
    d_mlp_in: int = 128
    d_mlp_hidden: int = 512
    d_mlp_out: int = 512
    n_blocks: int = 3
    rank: int = 8
    variant: str = "diag"

    def __post_init__(self):
        dims = (self.n_layers, self.d_c, self.d_t, self.d_l, self.d_mlp_in,
                self.d_mlp_hidden, self.d_mlp_out, self.n_blocks, self.rank)
        if any(int(d) <= 0 for d in dims):
            raise ContractError(f"hypernetwork dimensions must be positive: {self}")
        if self.variant == "mix":
            self.variant = "square"
        if self.variant not in ("diag", "square"):
            raise ContractError(f"unknown modulation variant {self.variant!r}")

    @property
    def head_out(self) -> int:
        return self.rank if self.variant == "diag" else self.rank * self.rank

    def block_dims(self) -> list[tuple[int, int, int]]:
        last = self.n_blocks - 1
        return [(self.d_mlp_in, self.d_mlp_hidden, self.d_mlp_out if k == last else self.d_mlp_in)
                for k in range(self.n_blocks)]


class HyperNetwork:
    def __init__(self, cfg: HyperConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        expected = init_shapes(cfg)
        for name, shape in expected.items():
            if name not in params:
                raise ContractError(f"missing hypernetwork parameter {name}")
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _trunk(self, x: Tensor) -> Tensor:
        p = self.params
        h = gelu(matmul(x, p["proj.W"]) + p["proj.b"])
        for k in range(self.cfg.n_blocks):
            h = gelu(matmul(h, p[f"block{k}.W1"]) + p[f"block{k}.b1"])
            h = gelu(matmul(h, p[f"block{k}.W2"]) + p[f"block{k}.b2"])
        return h

    def _head(self, feats: Tensor) -> Tensor:
        return matmul(feats, self.params["head.W"]) + self.params["head.b"]

    def signal(self, contexts, t: str, layer: int) -> Tensor:
        """Raw head output for a batch of contexts at site ``(layer, t)``.

        Shape ``(B, r)`` for diag and ``(B, r, r)`` for square.
        """
        cfg = self.cfg
        if t not in TYPES:
            raise KeyError(f"unknown projection type {t!r}")
        if not 1 <= layer <= cfg.n_layers:
            raise KeyError(f"layer index {layer} outside 1..{cfg.n_layers}")
        c = as_tensor(contexts)
        if c.ndim != 2 or c.shape[1] != cfg.d_c:
            raise DimensionError(f"context batch must be (B, {cfg.d_c}), got {c.shape}")
        n = c.shape[0]
        e_t = embedding(self.params["E_type"], np.full(n, TYPES.index(t)))
        e_l = embedding(self.params["E_layer"], np.full(n, layer - 1))
        out = self._head(self._trunk(concat([c, e_t, e_l], axis=1)))
        if cfg.variant == "square":
            out = reshape(out, (n, cfg.rank, cfg.rank))
        return out

    def signals(self, contexts) -> dict[tuple[int, str], Tensor]:
        """Signals for every (layer, type) site, one head row per context and site.

        All sites go through the trunk as a single stacked batch.
        """
        cfg = self.cfg
        c = as_tensor(contexts)
        if c.ndim != 2 or c.shape[1] != cfg.d_c:
            raise DimensionError(f"context batch must be (B, {cfg.d_c}), got {c.shape}")
        n = c.shape[0]
        sites = [(layer, t) for layer in range(1, cfg.n_layers + 1) for t in TYPES]
        rows = np.tile(np.arange(n), len(sites))
        t_ids = np.repeat([TYPES.index(t) for _, t in sites], n)
        l_ids = np.repeat([layer - 1 for layer, _ in sites], n)
        x = concat([embedding(c, rows), embedding(self.params["E_type"], t_ids),
                    embedding(self.params["E_layer"], l_ids)], axis=1)
        out = self._head(self._trunk(x))
        shape = (len(sites), n, cfg.rank) if cfg.variant == "diag" else (len(sites), n, cfg.rank, cfg.rank)
        out = reshape(out, shape)
        return {site: reshape(embedding(out, [k]), shape[1:]) for k, site in enumerate(sites)}


def hyper_forward(h: HyperNetwork, c, t: str, layer: int) -> Modulation:
    c = as_tensor(c)
    if c.ndim != 1 or c.shape[0] != h.cfg.d_c:
        raise DimensionError(f"context must have dimension {h.cfg.d_c}, got shape {c.shape}")
    out = h.signal(reshape(c, (1, h.cfg.d_c)), t, layer)
    if h.cfg.variant == "diag":
        return Modulation.diag(reshape(out, (h.cfg.rank,)))
    return Modulation.square(reshape(out, (h.cfg.rank, h.cfg.rank)))


def init_shapes(cfg: HyperConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "E_type": (len(TYPES), cfg.d_t),
        "E_layer": (cfg.n_layers, cfg.d_l),
        "proj.W": (cfg.d_c + cfg.d_t + cfg.d_l, cfg.d_mlp_in),
        "proj.b": (cfg.d_mlp_in,),
    }
    for k, (d_in, d_hid, d_out) in enumerate(cfg.block_dims()):
        shapes[f"block{k}.W1"] = (d_in, d_hid)
        shapes[f"block{k}.b1"] = (d_hid,)
        shapes[f"block{k}.W2"] = (d_hid, d_out)
        shapes[f"block{k}.b2"] = (d_out,)
    shapes["head.W"] = (cfg.d_mlp_out, cfg.head_out)
    shapes["head.b"] = (cfg.head_out,)
    return shapes


def init_hypernet(cfg: HyperConfig, rng: Rng) -> HyperNetwork:
    """Kaiming-normal trunk, N(0, 0.02) tables, zero head weights and an identity head bias.

    The identity bias makes the fresh network emit ``z = 1`` (or ``Z = I``),
    i.e. plain LoRA behaviour, at every site.
    """
    params: dict[str, Tensor] = {}
    for name, shape in init_shapes(cfg).items():
        is_bias = name.rsplit(".", 1)[-1].startswith("b")
        if name in ("E_type", "E_layer"):
            data = rng.child(name).gaussian(shape, 0.0, 0.02)
        elif name == "head.b":
            data = np.ones(shape) if cfg.variant == "diag" else np.eye(cfg.rank).ravel()
        elif name == "head.W" or is_bias:
            data = np.zeros(shape)
        else:
            data = rng.child(name).gaussian(shape, 0.0, np.sqrt(2.0 / shape[0]))
        params[name] = Tensor(data, requires_grad=True)
    return HyperNetwork(cfg, params)
