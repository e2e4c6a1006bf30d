"""Print trainable-parameter budgets for every method and rank, optionally as CSV."""
import argparse

from zhyper import complexity as cx


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", default="ref-7b", choices=sorted(cx.ARCH_PRESETS))
    ap.add_argument("--p-emb", type=int, default=0, help="declared description-embedding table size")
    ap.add_argument("--csv", help="write itemized components here")
    args = ap.parse_args()
    h = cx.HyperSpec(p_emb=args.p_emb)
    base = cx.ARCH_PRESETS[args.preset]
    table = cx.budget_table(base, h, methods=cx.METHODS)
    print(cx.render_table(table))
    print()
    for r in cx.BUDGET_RANKS:
        spec = base.with_rank(r)
        sizes = ", ".join(f"{m} {cx.per_context_signal_size(m, spec):,}" for m in cx.METHODS)
        print(f"r={r} per-context signal: {sizes}")
    if args.csv:
        rows = [b for by_method in table.values() for b in by_method.values()]
        with open(args.csv, "w") as fh:
            fh.write(cx.render_csv(rows))


if __name__ == "__main__":
    main()
