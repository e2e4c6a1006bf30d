"""Trainable-parameter budgets and per-context signal sizes for adapter methods.

T2L and HyperLoRA budgets are *modeled*: their hypernetworks share the trunk
used here and emit full ``(A, B)`` factors through one head per projection
type; ``p_emb`` is a user-declared task/description embedding table size.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import ContractError

METHODS = ("mtl", "zhyper-diag", "zhyper-square", "t2l", "hyperlora")
BUDGET_RANKS = (8, 16, 32)


@dataclass(frozen=True)
class ArchSpec:
    n_layers: int
    dims: dict[str, tuple[int, int]]  # type -> (d_in, d_out)
    rank: int

    def __post_init__(self):
        if self.n_layers < 1 or self.rank < 1 or not self.dims:
            raise ContractError("need n_layers >= 1, rank >= 1 and at least one projection type")
        if any(d < 1 for io_ in self.dims.values() for d in io_):
            raise ContractError(f"projection dims must be positive: {self.dims}")

    def with_rank(self, rank: int) -> "ArchSpec":
        return ArchSpec(self.n_layers, dict(self.dims), rank)

    def site_params(self, t: str) -> int:
        d_in, d_out = self.dims[t]
        return self.rank * (d_in + d_out)


@dataclass(frozen=True)
class HyperSpec:
    d_c: int = 1024
    d_t: int = 64
    d_l: int = 64
    d_mlp_in: int = 128
    d_mlp_hidden: int = 512
    d_mlp_out: int = 512
    n_blocks: int = 3
    p_emb: int = 0

    def __post_init__(self):
        dims = (self.d_c, self.d_t, self.d_l, self.d_mlp_in, self.d_mlp_hidden, self.d_mlp_out, self.n_blocks)
        if any(d < 1 for d in dims) or self.p_emb < 0:
            raise ContractError(f"hypernetwork dims must be positive: {self}")


ARCH_PRESETS = {
    "ref-7b": ArchSpec(32, {"Q": (4096, 4096), "V": (4096, 1024)}, 8),
    "desk-7b-shape": ArchSpec(2, {"Q": (64, 64), "V": (64, 16)}, 8),
}
CANONICAL_HYPER = HyperSpec()


@dataclass
class ParamBudget:
    method: str
    lora_params: int
    hyper_params: int
    embed_params: int
    per_context_output_size: int
    rademacher_order: str
    components: list[tuple[str, int]] = field(default_factory=list)
    modeled: bool = False
    rank: int = 0

    @property
    def total(self) -> int:
        return self.lora_params + self.hyper_params + self.embed_params


def lora_param_count(spec: ArchSpec) -> int:
    return spec.n_layers * sum(spec.site_params(t) for t in spec.dims)


def trunk_param_count(h: HyperSpec, n_types: int = 2) -> int:
    """Input projection plus MLP blocks (weights and biases), excluding the head."""
    total = (h.d_c + h.d_t + h.d_l) * h.d_mlp_in + h.d_mlp_in
    for k in range(h.n_blocks):
        d_out = h.d_mlp_out if k == h.n_blocks - 1 else h.d_mlp_in
        total += h.d_mlp_in * h.d_mlp_hidden + h.d_mlp_hidden
        total += h.d_mlp_hidden * d_out + d_out
    return total


def table_param_count(h: HyperSpec, spec: ArchSpec) -> int:
    return len(spec.dims) * h.d_t + spec.n_layers * h.d_l


def head_param_count(h: HyperSpec, out: int) -> int:
    return h.d_mlp_out * out + out


def rademacher_order(method: str) -> str:
    return {"zhyper-diag": "sqrt(r/N)", "zhyper-square": "r/sqrt(N)"}.get(method, "sqrt(r(d_in+d_out)/N)")


def rademacher_numerator(method: str, r: int, d_in: int, d_out: int) -> int:
    """Free-parameter count under the square root of the Rademacher order."""
    if method == "zhyper-diag":
        return r
    if method == "zhyper-square":
        return r * r
    return r * (d_in + d_out)


def per_context_signal_size(method: str, spec: ArchSpec) -> int:
    sites = spec.n_layers * len(spec.dims)
    if method == "zhyper-diag":
        return sites * spec.rank
    if method == "zhyper-square":
        return sites * spec.rank ** 2
    if method in ("t2l", "hyperlora"):
        return lora_param_count(spec)
    if method == "mtl":
        return 0
    raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")


def method_budget(method: str, spec: ArchSpec, h: HyperSpec = CANONICAL_HYPER) -> ParamBudget:
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")
    lora = lora_param_count(spec)
    signal = per_context_signal_size(method, spec)
    order = rademacher_order(method)
    if method == "mtl":
        return ParamBudget(method, lora, 0, 0, signal, order, [("lora", lora)], rank=spec.rank)
    trunk = trunk_param_count(h)
    tables = table_param_count(h, spec)
    if method.startswith("zhyper"):
        out = spec.rank if method == "zhyper-diag" else spec.rank ** 2
        head = head_param_count(h, out)
        comps = [("lora", lora), ("trunk", trunk), ("head", head), ("type+layer tables", tables)]
        return ParamBudget(method, lora, trunk + head, tables, signal, order, comps, rank=spec.rank)
    heads = sum(head_param_count(h, spec.site_params(t)) for t in spec.dims)
    comps = [("trunk", trunk), ("full-adapter heads", heads)]
    embed = h.p_emb
    if method == "t2l":
        comps.append(("type+layer tables", tables))
        embed += tables
    comps.append(("task embeddings (declared)", h.p_emb))
    return ParamBudget(method, 0, trunk + heads, embed, signal, order, comps, modeled=True, rank=spec.rank)


def millions(n: int) -> str:
    return f"{n / 1e6:.2f}M"


def budget_table(base: ArchSpec = ARCH_PRESETS["ref-7b"], h: HyperSpec = CANONICAL_HYPER,
                 ranks=BUDGET_RANKS, methods=("mtl", "zhyper-diag", "zhyper-square", "t2l")) -> dict[int, dict[str, ParamBudget]]:
    return {r: {m: method_budget(m, base.with_rank(r), h) for m in methods} for r in ranks}


def render_table(table: dict[int, dict[str, ParamBudget]]) -> str:
    methods = list(next(iter(table.values())))
    width = max(14, *(len(m) + 2 for m in methods))
    lines = ["rank".ljust(6) + "".join(m.rjust(width) for m in methods)]
    for r, row in table.items():
        lines.append(str(r).ljust(6) + "".join(millions(row[m].total).rjust(width) for m in methods))
    modeled = [m for m in methods if next(iter(table.values()))[m].modeled]
    if modeled:
        lines.append(f"(modeled: {', '.join(modeled)})")
    return "\n".join(lines)


def render_csv(budgets: list[ParamBudget]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "rank", "component", "count"])
    for b in budgets:
        for name, count in b.components:
            w.writerow([b.method, b.rank, name, count])
        w.writerow([b.method, b.rank, "total", b.total])
    return buf.getvalue()
