"""Fast invariant suite behind ``zhyper check``."""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import complexity as cx
from .contexts import ContextRecord, ContextStore, decode_context_store, encode_context_store
from .errors import FormatError
from .hypernet import HyperConfig
from .lora import (
    LoRAPair,
    Modulation,
    best_diag_fit,
    decode_adapter,
    delta_weight,
    embed_diag_in_square,
    encode_adapter,
    factor_square_into_full,
    rotation_counterexample,
)
from .model import (
    ModelConfig,
    build_model,
    forward_base,
    forward_conditioned,
    forward_materialized,
    forward_unconditioned,
    materialize_adapter,
)
from .numerics import Rng, Tensor, backward, cross_entropy, decode_tensor, encode_tensor, finite_diff_grad, rel_err


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


TINY_MODEL = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab_size=11, max_seq=8, q_out=8, v_out=4,
                         out_std=0.5)


def tiny_hyper(d_c: int = 3, rank: int = 2, variant: str = "diag") -> HyperConfig:
    return HyperConfig(n_layers=2, d_c=d_c, d_t=2, d_l=2, d_mlp_in=3, d_mlp_hidden=4, d_mlp_out=3,
                       rank=rank, variant=variant)


def randomize(model, rng: Rng, std: float = 0.5) -> None:
    """Overwrite every trainable tensor with gaussian noise so no gradient is trivially zero."""
    for name, p in model.trainable().items():
        p.data = rng.child(name).gaussian(p.shape, 0.0, std)


def check_budget() -> str:
    ref = cx.ARCH_PRESETS["ref-7b"]
    want = {8: 3_407_872, 16: 6_815_744, 32: 13_631_488}
    for r, n in want.items():
        got = cx.lora_param_count(ref.with_rank(r))
        assert got == n, f"lora count r={r}: {got} != {n}"
    targets = {(8, "zhyper-diag"): 4.21e6, (8, "zhyper-square"): 4.27e6, (16, "zhyper-diag"): 7.62e6,
               (16, "zhyper-square"): 7.87e6, (32, "zhyper-diag"): 14.46e6, (32, "zhyper-square"): 15.47e6}
    worst = 0.0
    for (r, m), target in targets.items():
        dev = abs(cx.method_budget(m, ref.with_rank(r)).total / target - 1)
        worst = max(worst, dev)
        assert dev <= 0.05, f"{m} r={r} off by {dev:.1%}"
    ratio = cx.method_budget("t2l", ref.with_rank(16)).total / cx.method_budget("zhyper-diag", ref).total
    assert ratio >= 26, f"T2L/Zhyper ratio {ratio:.2f} < 26"
    return f"worst deviation {worst:.2%}, ratio {ratio:.2f}"


def check_containment(n: int = 100) -> str:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # random shapes often have r > min(d_in, d_out)
        return _containment(n)


def _containment(n: int) -> str:
    rng = Rng(7)
    worst = 0.0
    for i in range(n):
        r_ = rng.child(str(i))
        d_in, d_out, r = (int(v) for v in (r_.integers(16) + 1, r_.integers(16) + 1, r_.integers(4) + 1))
        pair = LoRAPair(Tensor(r_.gaussian((d_in, r))), Tensor(r_.gaussian((r, d_out))))
        z = r_.gaussian(r)
        Z = r_.gaussian((r, r))
        d1 = delta_weight(pair, Modulation.diag(z)).data
        d2 = delta_weight(pair, Modulation.square(embed_diag_in_square(Tensor(z)))).data
        A2, B2 = factor_square_into_full(pair, Tensor(Z))
        d3 = (A2.data @ B2.data)
        d4 = delta_weight(pair, Modulation.square(Z)).data
        worst = max(worst, np.abs(d1 - d2).max(), np.abs(d3 - d4).max())
    assert worst <= 1e-12, f"containment error {worst:.2e}"
    pair, Z = rotation_counterexample()
    _, resid = best_diag_fit(pair, delta_weight(pair, Modulation.square(Z)).data)
    assert resid > 1e-3, f"rotation residual {resid:.2e}"
    return f"max error {worst:.1e}, rotation residual {resid:.3f}"


def check_gradients(seeds: int = 3) -> str:
    worst = 0.0
    for seed in range(seeds):
        rng = Rng(seed)
        variant = ("diag", "square")[seed % 2]
        m = build_model(TINY_MODEL, f"zhyper-{variant}", 2, rng, d_c=3, hyper_cfg=tiny_hyper())
        randomize(m, rng.child("rand"))
        toks = rng.integers(11, size=(2, 5))
        targets = rng.integers(11, size=(2, 5))
        ctx = Tensor(rng.gaussian((2, 3)), requires_grad=True)

        def loss():
            return cross_entropy(forward_conditioned(m, toks, ctx), targets, 0.1)

        leaves = dict(m.trainable(), context=ctx)
        backward(loss())
        for name, p in leaves.items():
            fd = finite_diff_grad(lambda _: loss(), p)
            err = rel_err(p.grad, fd)
            worst = max(worst, err)
            assert err <= 1e-4, f"seed {seed} {variant} {name}: rel err {err:.2e}"
    return f"max rel err {worst:.1e}"


def check_reductions() -> str:
    rng = Rng(3)
    m = build_model(ModelConfig(), "zhyper-diag", 8, rng, d_c=16)
    toks = rng.integers(16, size=(3, 10))
    c = rng.gaussian((3, 16))
    base = forward_base(m.cfg, m.base, toks).data
    err0 = np.abs(forward_conditioned(m, toks, c).data - base).max()
    assert err0 <= 1e-10, f"warm start differs by {err0:.2e}"
    randomize(m, rng.child("rand"), 0.3)
    m.hyper["head.W"].data[:] = 0.0
    m.hyper["head.b"].data[:] = 1.0
    err1 = np.abs(forward_conditioned(m, toks, c).data - forward_unconditioned(m, toks).data).max()
    assert err1 <= 1e-12, f"z=1 path differs from plain LoRA by {err1:.2e}"
    m.hyper["head.b"].data[:] = 0.0
    err2 = np.abs(forward_conditioned(m, toks, c).data - base).max()
    assert err2 <= 1e-12, f"z=0 path differs from base by {err2:.2e}"
    return f"warm start {err0:.1e}, z=1 {err1:.1e}, z=0 {err2:.1e}"


def check_materialization(n: int = 5) -> str:
    worst = 0.0
    for i in range(n):
        rng = Rng(100 + i)
        variant = "diag" if i % 2 == 0 else "square"
        m = build_model(ModelConfig(), f"zhyper-{variant}", 4, rng, d_c=16)
        randomize(m, rng.child("rand"), 0.2)
        c = rng.gaussian(16)
        toks = rng.integers(16, size=(2, 12))
        adapters = materialize_adapter(m, c)
        expect = m.cfg.n_layers * 2 * (4 if variant == "diag" else 16)
        assert adapters.signal_size() == expect, f"signal size {adapters.signal_size()} != {expect}"
        a = forward_conditioned(m, toks, c).data
        b = forward_materialized(m.cfg, m.base, adapters, toks).data
        worst = max(worst, np.abs(a - b).max())
    assert worst <= 1e-10, f"materialized forward differs by {worst:.2e}"
    return f"max diff {worst:.1e}"


def check_formats() -> str:
    rng = Rng(11)
    blob = encode_tensor(rng.gaussian((3, 4)))
    arr, bits, _ = decode_tensor(blob)
    assert encode_tensor(arr, bits) == blob
    m = build_model(ModelConfig(), "zhyper-square", 2, rng, d_c=4)
    zadp = encode_adapter(materialize_adapter(m, rng.gaussian(4)))
    assert encode_adapter(decode_adapter(zadp)) == zadp
    corrupt = bytearray(zadp)
    corrupt[40] ^= 0xFF
    try:
        decode_adapter(bytes(corrupt))
    except FormatError:
        pass
    else:
        raise AssertionError("corrupted ZADP payload was accepted")
    store = ContextStore(4, (ContextRecord("a", "t", "text", np.float32(rng.gaussian(4)).astype(float)),))
    zemb = encode_context_store(store)
    assert encode_context_store(decode_context_store(zemb)) == zemb
    return "ZTSR, ZADP, ZEMB round-trip; CRC corruption rejected"


CHECKS: dict[str, Callable[[], str]] = {
    "budget": check_budget,
    "containment": check_containment,
    "gradients": check_gradients,
    "reductions": check_reductions,
    "materialization": check_materialization,
    "formats": check_formats,
}


def run_checks(names=None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if names and name not in names:
            continue
        t0 = time.perf_counter()
        try:
            detail, ok = fn(), True
        except AssertionError as exc:
            detail, ok = str(exc), False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results
