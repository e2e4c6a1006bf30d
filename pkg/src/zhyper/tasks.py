"""Synthetic conditioned-generation corpora and the per-(context, task) evaluation grid."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contexts import ContextRecord, ContextStore
from .errors import ConfigError, FormatError
from .model import ConditionedModel, forward_conditioned, forward_unconditioned
from .numerics import Rng
from .training import Dataset, DatasetBundle, sft_loss

BOS = 0
KINDS = ("biased-unigram", "cyclic-grammar", "copy-with-marker")
MIN_TV = 0.2


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: str
    kind: str
    vocab_size: int = 16
    seq_len: int = 12
    n_train: int = 256
    n_eval: int = 64
    seed: int = 0
    bias: tuple[float, ...] = ()  # biased-unigram: weight per token id
    cycle: tuple[int, ...] = ()  # cyclic-grammar
    pool: tuple[int, ...] = ()  # copy-with-marker: tokens to copy
    marker: int = -1  # copy-with-marker

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"{self.task_id}: unknown generator kind {self.kind!r}")
        if self.seq_len < 3 or self.n_train < 1 or self.n_eval < 0:
            raise ConfigError(f"{self.task_id}: need seq_len >= 3, n_train >= 1, n_eval >= 0")
        used: tuple[int, ...]
        if self.kind == "biased-unigram":
            if len(self.bias) != self.vocab_size or min(self.bias) < 0 or sum(self.bias) <= 0:
                raise ConfigError(f"{self.task_id}: bias needs {self.vocab_size} non-negative weights")
            if self.bias[BOS] > 0:
                raise ConfigError(f"{self.task_id}: token {BOS} is reserved for BOS")
            used = ()
        elif self.kind == "cyclic-grammar":
            if len(self.cycle) < 2:
                raise ConfigError(f"{self.task_id}: cycle needs >= 2 tokens")
            used = self.cycle
        else:
            if not self.pool or self.marker in self.pool:
                raise ConfigError(f"{self.task_id}: copy task needs a token pool excluding the marker")
            used = self.pool + (self.marker,)
        if any(not 0 < t < self.vocab_size for t in used):
            raise ConfigError(f"{self.task_id}: token ids must lie in 1..{self.vocab_size - 1}")

    def emission(self) -> np.ndarray:
        """Distribution of the supervised target tokens."""
        p = np.zeros(self.vocab_size)
        if self.kind == "biased-unigram":
            p[:] = np.asarray(self.bias, dtype=float) / sum(self.bias)
        elif self.kind == "cyclic-grammar":
            np.add.at(p, list(self.cycle), 1.0 / len(self.cycle))
        else:
            k, n_sup = self.copy_len, self.seq_len - self.copy_len
            p[self.marker] = (n_sup - k) / n_sup
            np.add.at(p, list(self.pool), k / n_sup / len(self.pool))
        return p

    @property
    def copy_len(self) -> int:
        return (self.seq_len - 1) // 2

    def sample(self, rng: Rng, n: int) -> tuple[np.ndarray, np.ndarray]:
        """``n`` sequences as (inputs, targets); targets of unpredictable prompt tokens are -1."""
        T = self.seq_len
        seqs = np.zeros((n, T + 1), dtype=np.int64)
        seqs[:, 0] = BOS
        mask = np.ones((n, T), dtype=bool)
        if self.kind == "biased-unigram":
            p = np.asarray(self.bias, dtype=float) / sum(self.bias)
            seqs[:, 1:] = rng.choice(self.vocab_size, (n, T), p=p)
        elif self.kind == "cyclic-grammar":
            cyc = np.asarray(self.cycle)
            start = rng.integers(len(cyc), size=n)
            seqs[:, 1:] = cyc[(start[:, None] + np.arange(T)) % len(cyc)]
        else:
            k = self.copy_len
            pool = np.asarray(self.pool)
            prompt = pool[rng.integers(len(pool), size=(n, k))]
            seqs[:, 1:k + 1] = prompt
            seqs[:, k + 1] = self.marker
            seqs[:, k + 2:2 * k + 2] = prompt
            if 2 * k + 2 <= T:
                seqs[:, 2 * k + 2:] = self.marker
            mask[:, :k] = False
        x = seqs[:, :-1]
        y = np.where(mask, seqs[:, 1:], -1)
        return x, y


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def empirical_emission(y: np.ndarray, vocab_size: int) -> np.ndarray:
    valid = y[y >= 0]
    return np.bincount(valid, minlength=vocab_size) / max(valid.size, 1)


def default_specs(seed: int = 0, vocab_size: int = 16, seq_len: int = 12, n_train: int = 256, n_eval: int = 64):
    """Three tasks, one of each generator kind, over disjoint token ranges."""
    bias = [0.0] * vocab_size
    for tok, w in zip(range(1, 6), (0.4, 0.25, 0.15, 0.1, 0.1)):
        bias[tok] = w
    common = dict(vocab_size=vocab_size, seq_len=seq_len, n_train=n_train, n_eval=n_eval)
    return [
        SyntheticTaskSpec("unigram", "biased-unigram", seed=seed, bias=tuple(bias), **common),
        SyntheticTaskSpec("cyclic", "cyclic-grammar", seed=seed + 1, cycle=(6, 7, 8, 9), **common),
        SyntheticTaskSpec("copy", "copy-with-marker", seed=seed + 2, pool=(10, 11, 12, 13), marker=14, **common),
    ]


def _describe(spec: SyntheticTaskSpec, j: int) -> str:
    if spec.kind == "biased-unigram":
        top = np.argsort(spec.bias)[::-1][:3]
        body = "draw tokens independently, favouring " + ", ".join(str(int(t)) for t in top)
    elif spec.kind == "cyclic-grammar":
        body = "repeat the cycle " + " ".join(str(t) for t in spec.cycle)
    else:
        body = f"after the marker {spec.marker}, copy the preceding tokens"
    return f"[{spec.task_id}] {body} (phrasing {j + 1})"


def gen_corpus(
    specs: list[SyntheticTaskSpec],
    d_c: int = 32,
    descriptions: int = 4,
    noise: float = 0.3,
    seed: int = 0,
) -> tuple[DatasetBundle, ContextStore]:
    """Deterministic corpora plus pseudo-embedded descriptions.

    Each task gets an orthonormal direction scaled to unit-variance entries;
    each description adds independent gaussian noise. Values are rounded to
    float32 so they survive a ZEMB round trip unchanged.
    """
    if not specs:
        raise ConfigError("need at least one task spec")
    ids = [s.task_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate task ids in {ids}")
    if len(specs) > d_c:
        raise ConfigError(f"{len(specs)} tasks need d_c >= {len(specs)}")
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            if a.vocab_size != b.vocab_size:
                raise ConfigError("all tasks must share one vocabulary size")
            tv = total_variation(a.emission(), b.emission())
            if tv < MIN_TV:
                raise ConfigError(f"tasks {a.task_id} and {b.task_id} are too similar (TV {tv:.3f} < {MIN_TV})")
    datasets = []
    for s in specs:
        rng = Rng(s.seed)
        x, y = s.sample(rng.child("train"), s.n_train)
        ex, ey = s.sample(rng.child("eval"), s.n_eval) if s.n_eval else (None, None)
        datasets.append(Dataset(s.task_id, x, y, ex, ey))
    rng = Rng(seed).child("contexts")
    basis, _ = np.linalg.qr(rng.child("basis").gaussian((d_c, len(specs))))
    records = []
    contexts = []
    for i, s in enumerate(specs):
        direction = basis[:, i] * np.sqrt(d_c)
        group = []
        for j in range(descriptions):
            emb = direction + rng.child(f"{s.task_id}/{j}").gaussian(d_c, 0.0, noise)
            rec = ContextRecord(f"{s.task_id}/d{j}", s.task_id, _describe(s, j),
                                emb.astype(np.float32).astype(np.float64))
            records.append(rec)
            group.append(rec)
        contexts.append(group)
    return DatasetBundle(datasets, contexts), ContextStore(d_c, tuple(records))


# ------------------------------------------------------------- corpus files

def _write_tokens(path: Path, x: np.ndarray, y: np.ndarray) -> None:
    n, T = x.shape
    with open(path, "wb") as fh:
        fh.write(f"ZTOK v1 n={n} len={T}\n".encode())
        fh.write(np.ascontiguousarray(x, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(y, dtype="<i4").tobytes())


def _read_tokens(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    head, _, body = raw.partition(b"\n")
    parts = head.decode().split()
    if len(parts) != 4 or parts[:2] != ["ZTOK", "v1"]:
        raise FormatError(f"{path}: bad token file header")
    n, T = int(parts[2][2:]), int(parts[3][4:])
    if len(body) != 8 * n * T:
        raise FormatError(f"{path}: expected {8 * n * T} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<i4").astype(np.int64)
    return arr[:n * T].reshape(n, T), arr[n * T:].reshape(n, T)


def write_corpus(directory, specs: list[SyntheticTaskSpec], bundle: DatasetBundle, store: ContextStore) -> None:
    from .contexts import write_context_store

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"d_c = {store.d_c}\n", f"vocab_size = {specs[0].vocab_size}\n",
             f"tasks = {' '.join(s.task_id for s in specs)}\n"]
    for s, d in zip(specs, bundle.datasets):
        lines.append(f"[{s.task_id}] kind={s.kind} vocab={s.vocab_size} seq_len={s.seq_len} "
                     f"train={len(d.train_x)} eval={0 if d.eval_x is None else len(d.eval_x)} seed={s.seed}\n")
        _write_tokens(directory / f"{s.task_id}.train.tok", d.train_x, d.train_y)
        if d.eval_x is not None:
            _write_tokens(directory / f"{s.task_id}.eval.tok", d.eval_x, d.eval_y)
    (directory / "manifest.txt").write_text("".join(lines))
    write_context_store(store, directory / "contexts.zemb")


def read_corpus(directory) -> tuple[DatasetBundle, ContextStore]:
    from .contexts import assign_contexts, load_context_store

    directory = Path(directory)
    manifest = (directory / "manifest.txt").read_text().splitlines()
    task_line = next((ln for ln in manifest if ln.startswith("tasks =")), None)
    if task_line is None:
        raise FormatError(f"{directory}/manifest.txt: missing task list")
    datasets = []
    for tid in task_line.split("=", 1)[1].split():
        x, y = _read_tokens(directory / f"{tid}.train.tok")
        ev = directory / f"{tid}.eval.tok"
        ex, ey = _read_tokens(ev) if ev.exists() else (None, None)
        datasets.append(Dataset(tid, x, y, ex, ey))
    store = load_context_store(directory / "contexts.zemb")
    return assign_contexts(store, DatasetBundle(datasets)), store


# ----------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    context_ids: list[str]
    context_tasks: list[int]
    task_ids: list[str]
    loss: np.ndarray  # (n_contexts, n_tasks)
    accuracy: np.ndarray
    unconditioned_loss: np.ndarray  # (n_tasks,)
    unconditioned_accuracy: np.ndarray
    grouped_loss: np.ndarray = field(init=False)  # (n_tasks, n_tasks): row = context task

    def __post_init__(self):
        n = len(self.task_ids)
        groups = np.asarray(self.context_tasks)
        self.grouped_loss = np.stack([self.loss[groups == i].mean(axis=0) for i in range(n)])

    def matched(self) -> np.ndarray:
        return np.diag(self.grouped_loss)

    def best_mismatched(self) -> np.ndarray:
        g = self.grouped_loss.copy()
        np.fill_diagonal(g, np.inf)
        return g.min(axis=0)

    def diagonal_dominant(self) -> bool:
        return bool(np.all(self.matched() < self.best_mismatched()))

    def relative_gain(self) -> np.ndarray:
        """Fractional drop of matched loss below the unconditioned row, per task."""
        return 1.0 - self.matched() / self.unconditioned_loss

    def summary(self) -> str:
        w = max(len(t) for t in self.task_ids + ["context"]) + 2
        lines = ["loss (rows: context task, cols: eval task)",
                 "".ljust(w) + "".join(t.rjust(10) for t in self.task_ids)]
        for i, tid in enumerate(self.task_ids):
            lines.append(tid.ljust(w) + "".join(f"{v:10.4f}" for v in self.grouped_loss[i]))
        lines.append("z=ones".ljust(w) + "".join(f"{v:10.4f}" for v in self.unconditioned_loss))
        gain = self.relative_gain()
        margin = self.best_mismatched() - self.matched()
        for i, tid in enumerate(self.task_ids):
            lines.append(f"{tid}: matched {self.matched()[i]:.4f}  gain vs z=ones {gain[i]:.1%}  "
                         f"margin vs mismatched {margin[i]:.4f}")
        return "\n".join(lines)


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    valid = y >= 0
    return float((logits.argmax(axis=-1)[valid] == y[valid]).mean())


def eval_conditioned(model: ConditionedModel, bundle: DatasetBundle) -> EvalReport:
    for d in bundle.datasets:
        if d.eval_x is None or len(d.eval_x) == 0:
            raise ConfigError(f"dataset {d.id} has no eval split")
    ctx = [(i, c) for i, group in enumerate(bundle.contexts) for c in group]
    n_t = len(bundle.datasets)
    loss = np.zeros((len(ctx), n_t))
    acc = np.zeros((len(ctx), n_t))
    for row, (task, c) in enumerate(ctx):
        for col, d in enumerate(bundle.datasets):
            logits = forward_conditioned(model, d.eval_x, c.embedding, task=task)
            loss[row, col] = sft_loss(logits, d.eval_y).item()
            acc[row, col] = _accuracy(logits.data, d.eval_y)
    u_loss = np.zeros(n_t)
    u_acc = np.zeros(n_t)
    for col, d in enumerate(bundle.datasets):
        logits = forward_unconditioned(model, d.eval_x)
        u_loss[col] = sft_loss(logits, d.eval_y).item()
        u_acc[col] = _accuracy(logits.data, d.eval_y)
    return EvalReport([c.id for _, c in ctx], [t for t, _ in ctx], [d.id for d in bundle.datasets],
                      loss, acc, u_loss, u_acc)


def eval_fixed(model_forward, bundle: DatasetBundle) -> np.ndarray:
    """Mean eval loss per task under one fixed conditioning (a context or an adapter)."""
    out = []
    for d in bundle.datasets:
        if d.eval_x is None:
            raise ConfigError(f"dataset {d.id} has no eval split")
        out.append(sft_loss(model_forward(d.eval_x), d.eval_y).item())
    return np.array(out)

