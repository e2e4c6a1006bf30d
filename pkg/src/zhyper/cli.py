"""Command-line entry point: ``zhyper {gen-data,train,eval,gen-adapter,params,check}``.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import complexity as cx
from .checks import run_checks
from .contexts import embed_texts
from .errors import NonFiniteLossError, ZhyperError
from .hypernet import HyperConfig
from .lora import load_adapter, save_adapter
from .model import (
    PRESETS,
    ModelConfig,
    build_model,
    file_digest,
    forward_conditioned,
    forward_materialized,
    materialize_adapter,
    parse_value,
)
from .numerics import Rng, load_tensor
from .tasks import default_specs, eval_conditioned, eval_fixed, gen_corpus, read_corpus, write_corpus
from .training import TrainConfig, load_run, save_run, train

log = logging.getLogger("zhyper")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int
    out: str
    argv: list[str] = field(default_factory=list)
    hashes: dict[str, str] = field(default_factory=dict)

    def write(self, path: Path) -> None:
        lines = [f"command = {self.command}\n", f"argv = {' '.join(self.argv)}\n",
                 f"config = {self.config or ''}\n", f"seed = {self.seed}\n", f"out = {self.out}\n"]
        lines += [f"sha256 {name} = {digest}\n" for name, digest in sorted(self.hashes.items())]
        path.write_text("".join(lines))


def read_config(path: str | None) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    if not path:
        return {}
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, _, value = (s.strip() for s in line.partition("="))
        out[key] = value
    return out


def _apply(cls, values: dict[str, str], prefix: str = "", base=None):
    kinds = {f.name: f.type for f in fields(cls)}
    kwargs = asdict(base) if base is not None else {}
    for key, raw in values.items():
        if key.startswith(prefix) and key[len(prefix):] in kinds:
            name = key[len(prefix):]
            kwargs[name] = parse_value(raw, kinds[name])
    return cls(**kwargs)


def _hash_tree(out: Path) -> dict[str, str]:
    if out.is_file():
        return {out.name: file_digest(out)}
    return {str(p.relative_to(out)): file_digest(p) for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "run_manifest.txt"}


def _finish(args, out: Path, manifest_path: Path) -> None:
    RunManifest(args.command, args.config, args.seed, str(out), list(args.argv), _hash_tree(out)).write(manifest_path)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cfg: dict[str, str]) -> int:
    keys = dict(vocab_size=16, seq_len=12, n_train=256, n_eval=64)
    keys = {k: int(cfg.get(k, v)) for k, v in keys.items()}
    specs = default_specs(seed=args.seed, **keys)
    bundle, store = gen_corpus(specs, d_c=int(cfg.get("d_c", 32)), descriptions=int(cfg.get("descriptions", 4)),
                               noise=float(cfg.get("noise", 0.3)), seed=args.seed)
    out = Path(args.out)
    write_corpus(out, specs, bundle, store)
    _finish(args, out, out / "run_manifest.txt")
    print(f"wrote {len(specs)} tasks and {len(store)} contexts to {out}")
    return 0


def _corpus_vocab(data: Path) -> int:
    for line in (data / "manifest.txt").read_text().splitlines():
        if line.startswith("vocab_size ="):
            return int(line.split("=")[1])
    raise UsageError(f"{data}/manifest.txt has no vocab_size")


def cmd_train(args, cfg: dict[str, str]) -> int:
    if not args.data:
        raise UsageError("train needs --data")
    if args.variant and args.mode:
        raise UsageError("give either --mode or --variant, not both")
    overrides = dict(cfg)
    for key, flag in (("steps", args.steps), ("rank", args.rank), ("seed", args.seed)):
        if flag is not None:
            overrides[key] = str(flag)
    if args.mode or args.variant:
        overrides["mode"] = args.mode or f"zhyper-{args.variant}"
    tcfg = _apply(TrainConfig, overrides)
    data = Path(args.data)
    bundle, store = read_corpus(data)
    preset = PRESETS.get(args.preset or "desk-7b-shape")
    if preset is None:
        raise UsageError(f"unknown model preset {args.preset!r}; choose from {sorted(PRESETS)}")
    mcfg = _apply(ModelConfig, {**cfg, "vocab_size": str(_corpus_vocab(data))}, base=preset)
    hcfg = None
    if tcfg.mode.startswith("zhyper"):
        hcfg = _apply(HyperConfig, {**cfg, "hyper.n_layers": str(mcfg.n_layers), "hyper.d_c": str(store.d_c),
                                    "hyper.rank": str(tcfg.rank)}, prefix="hyper.")
    model = build_model(mcfg, tcfg.mode, tcfg.rank, Rng(tcfg.seed).child("model"), d_c=store.d_c,
                        n_tasks=len(bundle.datasets), hyper_cfg=hcfg, lora_scale=tcfg.lora_scale)

    def progress(step, lr, loss):
        if step % 100 == 0 or step == tcfg.steps - 1:
            log.info("step %d lr %.3g loss %.4f", step, lr, loss)

    result = train(model, bundle, tcfg, progress=progress)
    out = Path(args.out)
    save_run(out, model, tcfg, result, len(bundle.datasets))
    _finish(args, out, out / "run_manifest.txt")
    print(f"trained {tcfg.mode} for {tcfg.steps} steps; final loss {result.trace[-1][2]:.4f}; run saved to {out}")
    return 0


def cmd_eval(args, cfg: dict[str, str]) -> int:
    if not args.run or not args.data:
        raise UsageError("eval needs --run and --data")
    model, _, _ = load_run(args.run)
    bundle, store = read_corpus(args.data)
    if args.adapter and args.context_id:
        raise UsageError("give either --adapter or --context-id, not both")
    lines: list[str]
    if args.adapter or args.context_id:
        if args.adapter:
            adapters = load_adapter(args.adapter)
            losses = eval_fixed(lambda x: forward_materialized(model.cfg, model.base, adapters, x), bundle)
            label = f"adapter {args.adapter}"
        else:
            rec = store.get(args.context_id)
            task = [d.id for d in bundle.datasets].index(rec.dataset_id)
            losses = eval_fixed(lambda x: forward_conditioned(model, x, rec.embedding, task=task), bundle)
            label = f"context {args.context_id}"
        lines = [f"# {label}", "task,loss"]
        lines += [f"{d.id},{float(v)!r}" for d, v in zip(bundle.datasets, losses)]
        lines.append(f"mean,{float(np.mean(losses))!r}")
    else:
        report = eval_conditioned(model, bundle)
        print(report.summary())
        lines = ["context,context_task," + ",".join(report.task_ids)]
        for cid, t, row in zip(report.context_ids, report.context_tasks, report.loss):
            lines.append(f"{cid},{report.task_ids[t]}," + ",".join(repr(float(v)) for v in row))
        lines.append("z=ones,," + ",".join(repr(float(v)) for v in report.unconditioned_loss))
    text = "\n".join(lines) + "\n"
    if args.adapter or args.context_id:
        print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(text)
        _finish(args, out, out / "run_manifest.txt")
    return 0


def cmd_gen_adapter(args, cfg: dict[str, str]) -> int:
    if not args.run or not args.out:
        raise UsageError("gen-adapter needs --run and --out")
    model, _, _ = load_run(args.run)
    task = None
    sources = [s for s in (args.context_id, args.embedding, args.text) if s]
    if len(sources) != 1:
        raise UsageError("give exactly one of --context-id, --embedding, --text")
    if args.context_id:
        if not args.data:
            raise UsageError("--context-id needs --data")
        bundle, store = read_corpus(args.data)
        rec = store.get(args.context_id)
        c = rec.embedding
        task = [d.id for d in bundle.datasets].index(rec.dataset_id)
    elif args.embedding:
        c = load_tensor(args.embedding).reshape(-1)
    else:
        c = embed_texts([args.text]).records[0].embedding
    if model.mode == "oracle" and task is None:
        raise UsageError("oracle runs need --context-id to pick the task adapter")
    adapters = materialize_adapter(model, c, task=task)
    out = Path(args.out)
    save_adapter(out, adapters)
    _finish(args, out, out.with_name(out.name + ".manifest.txt"))
    print(f"wrote {out}: {len(adapters.entries)} sites, signal size {adapters.signal_size()}")
    return 0


def cmd_params(args, cfg: dict[str, str]) -> int:
    preset = args.preset or "ref-7b"
    if preset not in cx.ARCH_PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(cx.ARCH_PRESETS)}")
    spec = cx.ARCH_PRESETS[preset].with_rank(args.rank or 8)
    hspec = _apply(cx.HyperSpec, cfg)
    methods = cx.METHODS if args.method in (None, "all") else (args.method,)
    budgets = [cx.method_budget(m, spec, hspec) for m in methods]
    for b in budgets:
        tag = " (modeled)" if b.modeled else ""
        print(f"{b.method}{tag}: {b.total:,} trainable ({cx.millions(b.total)}); "
              f"per-context signal {b.per_context_output_size:,}; Rademacher order {b.rademacher_order}")
        for name, count in b.components:
            print(f"    {name}: {count:,}")
    if args.method in (None, "all"):
        print()
        print(cx.render_table(cx.budget_table(cx.ARCH_PRESETS[preset], hspec)))
    if args.out:
        Path(args.out).write_text(cx.render_csv(budgets))
    return 0


def cmd_check(args, cfg: dict[str, str]) -> int:
    results = run_checks()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:16s} {r.seconds:6.2f}s  {r.detail}")
    return 0 if all(r.passed for r in results) else 2


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gen-adapter": cmd_gen_adapter,
    "params": cmd_params,
    "check": cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zhyper", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("-v", "--verbose", action="store_true")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out")
        s.add_argument("--preset")
        s.add_argument("--rank", type=int)
        s.add_argument("--variant", choices=("diag", "square"))
        s.add_argument("--mode", choices=("zhyper-diag", "zhyper-square", "mtl", "oracle"))
        s.add_argument("--context-id")
        s.add_argument("--adapter")
        s.add_argument("--steps", type=int)
        s.add_argument("--data")
        s.add_argument("--run")
        s.add_argument("--embedding", help="ZTSR file holding one context vector")
        s.add_argument("--text", help="raw text embedded via $ZHYPER_EMBEDDER")
        s.add_argument("--method", choices=cx.METHODS + ("all",))
    return p


def run_command(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"zhyper: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.argv = argv
    try:
        cfg = read_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ZhyperError, KeyError, FileNotFoundError) as exc:
        if isinstance(exc, NonFiniteLossError):
            print(f"zhyper: runtime failure: {exc}", file=sys.stderr)
            return 2
        print(f"zhyper: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"zhyper: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
