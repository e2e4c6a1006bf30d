"""End-to-end acceptance suite; each test prints one PASS/FAIL line with its measured value."""
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from zhyper import complexity as cx
from zhyper.checks import check_containment, check_gradients, check_materialization, check_reductions
from zhyper.cli import run_command
from zhyper.contexts import ContextRecord, ContextStore, decode_context_store, encode_context_store
from zhyper.errors import FormatError
from zhyper.lora import decode_adapter, encode_adapter
from zhyper.model import ModelConfig, build_model, materialize_adapter
from zhyper.numerics import Rng, decode_tensor, encode_tensor
from zhyper.tasks import EvalReport

ROOT = Path(__file__).resolve().parents[1]
TOY_CFG = ROOT / "configs" / "toy.cfg"


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n} {title}: {detail}")
        assert ok, detail
    return emit


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


def test_1_budget(report):
    def run():
        ref = cx.ARCH_PRESETS["ref-7b"]
        exact = [cx.lora_param_count(ref.with_rank(r)) for r in (8, 16, 32)]
        targets = {(8, "zhyper-diag"): 4.21, (8, "zhyper-square"): 4.27, (16, "zhyper-diag"): 7.62,
                   (16, "zhyper-square"): 7.87, (32, "zhyper-diag"): 14.46, (32, "zhyper-square"): 15.47}
        devs = {k: cx.method_budget(k[1], ref.with_rank(k[0])).total / (v * 1e6) - 1 for k, v in targets.items()}
        ratio = cx.method_budget("t2l", ref.with_rank(16)).total / cx.method_budget("zhyper-diag", ref).total
        return exact, devs, ratio

    (exact, devs, ratio), secs = timed(run)
    worst = max(abs(d) for d in devs.values())
    ok = exact == [3_407_872, 6_815_744, 13_631_488] and worst <= 0.05 and ratio >= 26 and secs < 1
    report(1, "budget", ok, f"lora {exact}, worst zhyper deviation {worst:.2%} (<= 5%), "
                             f"t2l/zhyper {ratio:.2f} (>= 26), {secs:.2f}s")


def test_2_containment(report):
    detail, secs = timed(check_containment, 100)
    report(2, "containment", secs < 5, f"{detail} over 100 instances (<= 1e-12, > 1e-3), {secs:.2f}s")


def test_3_gradients(report):
    detail, secs = timed(check_gradients, 20)
    report(3, "gradients", secs < 60, f"{detail} over 20 seeds, all groups incl. context (<= 1e-4), {secs:.1f}s")


def test_4_reductions(report):
    detail, secs = timed(check_reductions)
    report(4, "warm start and reductions", secs < 5, f"{detail} (<= 1e-10 / exact / exact), {secs:.2f}s")


def test_5_materialization(report):
    detail, secs = timed(check_materialization, 20)
    sizes = {}
    for variant in ("diag", "square"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = build_model(ModelConfig(), f"zhyper-{variant}", 8, Rng(0), d_c=16)
        sizes[variant] = materialize_adapter(m, np.zeros(16)).signal_size()
    ok = secs < 10 and sizes == {"diag": 32, "square": 256}
    report(5, "materialization", ok, f"{detail} over 20 triples (<= 1e-10), signal sizes {sizes}, {secs:.2f}s")


def _pipeline(root: Path) -> float:
    t0 = time.perf_counter()
    assert run_command(["gen-data", "--config", str(TOY_CFG), "--out", str(root / "data")]) == 0
    assert run_command(["train", "--config", str(TOY_CFG), "--data", str(root / "data"),
                        "--out", str(root / "run")]) == 0
    assert run_command(["eval", "--run", str(root / "run"), "--data", str(root / "data"),
                        "--out", str(root / "eval")]) == 0
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    roots = [tmp_path_factory.mktemp(f"toy{k}") for k in range(2)]
    secs = [_pipeline(r) for r in roots]
    return roots, secs


def _grid(path: Path):
    rows = [line.split(",") for line in path.read_text().splitlines()]
    tasks = rows[0][2:]
    ctx = [r for r in rows[1:] if r[0] != "z=ones"]
    loss = np.array([[float(v) for v in r[2:]] for r in ctx])
    groups = [tasks.index(r[1]) for r in ctx]
    unc = np.array([float(v) for v in rows[-1][2:]])
    return EvalReport([r[0] for r in ctx], groups, tasks, loss, loss, unc, unc)


def test_6_conditioning(report, toy_runs):
    roots, secs = toy_runs
    rep = _grid(roots[0] / "eval" / "eval.csv")
    gain = rep.relative_gain()
    margin = rep.best_mismatched() - rep.matched()
    ok = bool(np.all(gain >= 0.15)) and rep.diagonal_dominant() and secs[0] <= 15 * 60
    report(6, "conditioning efficacy", ok,
           "gain vs z=ones " + ", ".join(f"{t} {g:.1%}" for t, g in zip(rep.task_ids, gain)) + " (>= 15%); "
           "margin vs mismatched " + ", ".join(f"{m:.4f}" for m in margin) + f" (> 0); {secs[0]:.0f}s")


def test_7_determinism(report, toy_runs):
    roots, _ = toy_runs
    same_trace = (roots[0] / "run" / "loss_trace.csv").read_bytes() == (roots[1] / "run" / "loss_trace.csv").read_bytes()
    same_eval = (roots[0] / "eval" / "eval.csv").read_bytes() == (roots[1] / "eval" / "eval.csv").read_bytes()
    n = len((roots[0] / "run" / "loss_trace.csv").read_text().splitlines()) - 1
    report(7, "determinism", same_trace and same_eval,
           f"loss trace ({n} steps) identical: {same_trace}, eval matrix identical: {same_eval}")


def test_8_formats(report, tmp_path):
    rng = Rng(8)
    results = {}

    def rewrite(name, blob, decode, encode):
        path = tmp_path / name
        path.write_bytes(blob)
        results[name] = encode(decode(path.read_bytes())) == blob

    arr = rng.gaussian((3, 5))
    rewrite("t.ztsr", encode_tensor(arr), lambda b: decode_tensor(b)[:2], lambda v: encode_tensor(*v))
    m = build_model(ModelConfig(), "zhyper-square", 4, rng, d_c=8)
    zadp = encode_adapter(materialize_adapter(m, rng.gaussian(8)))
    rewrite("a.zadp", zadp, decode_adapter, encode_adapter)
    store = ContextStore(4, tuple(ContextRecord(f"c{i}", "t", "txt", np.float32(rng.gaussian(4)).astype(float))
                                  for i in range(3)))
    rewrite("c.zemb", encode_context_store(store), decode_context_store, encode_context_store)

    rejected = {}

    def expect(name, fn, pattern):
        try:
            fn()
        except FormatError as exc:
            rejected[name] = pattern in str(exc)
        else:
            rejected[name] = False

    bad = bytearray(zadp)
    bad[len(bad) // 2] ^= 0x10
    expect("zadp crc", lambda: decode_adapter(bytes(bad)), "CRC mismatch")
    nan = arr.copy()
    nan[1, 2] = np.nan
    expect("ztsr nan", lambda: decode_tensor(encode_tensor(nan)), "flat index 7")
    zemb = bytearray(encode_context_store(store))
    zemb[-4:] = np.float32(np.nan).tobytes()
    expect("zemb nan", lambda: decode_context_store(bytes(zemb)), "record 2 ('c2'): non-finite embedding value at position 3")
    ok = all(results.values()) and all(rejected.values())
    report(8, "format round trips", ok, f"byte-identical {results}, located rejections {rejected}")
