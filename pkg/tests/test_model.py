import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from zhyper.checks import TINY_MODEL, randomize, tiny_hyper
from zhyper.errors import ConfigError, InputError
from zhyper.model import (
    ModelConfig,
    base_checksum,
    build_model,
    forward_base,
    forward_conditioned,
    forward_materialized,
    forward_unconditioned,
    init_base,
    load_base,
    materialize_adapter,
    save_base,
    signal_size,
)
from zhyper.numerics import Rng


def reference_decoder(cfg, base, toks, extra=None):
    """Loop-per-position, loop-per-head evaluation; independent of the tape ops."""
    W = {k: v.data for k, v in base.items()}
    extra = extra or {}

    def ln(x, g, b):
        mu = sum(x) / len(x)
        var = sum((xi - mu) ** 2 for xi in x) / len(x)
        return np.array([(xi - mu) / math.sqrt(var + 1e-5) for xi in x]) * g + b

    def gelu(x):
        return np.array([0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3))) for v in x])

    hd = cfg.q_out // cfg.n_heads
    group = cfg.n_heads // (cfg.v_out // hd)
    xs = [W["tok_emb"][t] + W["pos_emb"][i] for i, t in enumerate(toks)]
    for layer in range(1, cfg.n_layers + 1):
        p = f"layer{layer}."
        wq = W[p + "Wq"] + extra.get((layer, "Q"), 0)
        wv = W[p + "Wv"] + extra.get((layer, "V"), 0)
        hs = [ln(x, W[p + "ln1.g"], W[p + "ln1.b"]) for x in xs]
        qs, ks, vs = [h @ wq for h in hs], [h @ W[p + "Wk"] for h in hs], [h @ wv for h in hs]
        new = []
        for i, x in enumerate(xs):
            out = np.zeros(cfg.q_out)
            for head in range(cfg.n_heads):
                kv = head // group
                q = qs[i][head * hd:(head + 1) * hd]
                scores = [q @ ks[j][kv * hd:(kv + 1) * hd] / math.sqrt(hd) for j in range(i + 1)]
                top = max(scores)
                e = [math.exp(s - top) for s in scores]
                for j in range(i + 1):
                    out[head * hd:(head + 1) * hd] += e[j] / sum(e) * vs[j][kv * hd:(kv + 1) * hd]
            x = x + out @ W[p + "Wo"]
            h2 = ln(x, W[p + "ln2.g"], W[p + "ln2.b"])
            x = x + gelu(h2 @ W[p + "W1"] + W[p + "b1"]) @ W[p + "W2"] + W[p + "b2"]
            new.append(x)
        xs = new
    return np.stack([ln(x, W["ln_f.g"], W["ln_f.b"]) @ W["W_out"] for x in xs])


def seeded_base(cfg, seed):
    base = init_base(cfg, Rng(seed))
    rng = Rng(seed).child("norms")
    for name, t in base.items():
        if ".ln" in name or name.startswith("ln_f") or name.endswith(("b1", "b2")):
            t.data = t.data + rng.child(name).gaussian(t.shape, 0.0, 0.3)
    return base


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_reference(seed):
    cfg = TINY_MODEL
    base = seeded_base(cfg, seed)
    toks = Rng(seed).integers(cfg.vocab_size, size=7)
    got = forward_base(cfg, base, toks).data
    assert np.abs(got - reference_decoder(cfg, base, toks)).max() <= 1e-10


def test_shapes_and_batching():
    cfg = TINY_MODEL
    base = init_base(cfg, Rng(0))
    assert forward_base(cfg, base, [3]).shape == (1, cfg.vocab_size)
    toks = Rng(1).integers(cfg.vocab_size, size=(3, 5))
    batched = forward_base(cfg, base, toks).data
    for i in range(3):
        assert np.allclose(batched[i], forward_base(cfg, base, toks[i]).data, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**20), st.integers(1, 7))
def test_causality(seed, pos):
    cfg = TINY_MODEL
    base = init_base(cfg, Rng(seed))
    toks = Rng(seed).integers(cfg.vocab_size, size=8)
    alt = toks.copy()
    alt[pos:] = Rng(seed + 1).integers(cfg.vocab_size, size=8 - pos)
    a, b = forward_base(cfg, base, toks).data, forward_base(cfg, base, alt).data
    assert np.array_equal(a[:pos], b[:pos])


def test_bad_tokens():
    cfg = TINY_MODEL
    base = init_base(cfg, Rng(0))
    with pytest.raises(InputError):
        forward_base(cfg, base, [cfg.vocab_size])
    with pytest.raises(InputError):
        forward_base(cfg, base, np.zeros(cfg.max_seq + 1, dtype=int))
    with pytest.raises(InputError):
        forward_base(cfg, base, np.array([], dtype=int))


def test_bad_config():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        build_model(TINY_MODEL, "hyperlora", 2, Rng(0), d_c=3)


@pytest.mark.parametrize("mode", ["zhyper-diag", "zhyper-square", "mtl", "oracle"])
def test_warm_start_equals_base(mode):
    m = build_model(ModelConfig(), mode, 8, Rng(0), d_c=16, n_tasks=3)
    toks = Rng(1).integers(16, size=(2, 9))
    logits = forward_conditioned(m, toks, Rng(2).gaussian(16), task=[0, 2]).data
    assert np.abs(logits - forward_base(m.cfg, m.base, toks).data).max() <= 1e-10


def test_zero_head_equals_base_for_any_context():
    m = build_model(TINY_MODEL, "zhyper-diag", 2, Rng(0), d_c=3, hyper_cfg=tiny_hyper())
    randomize(m, Rng(1))
    m.hyper["head.W"].data[:] = 0.0
    m.hyper["head.b"].data[:] = 0.0
    toks = Rng(2).integers(11, size=(2, 6))
    base = forward_base(m.cfg, m.base, toks).data
    for c in Rng(3).gaussian((4, 3)):
        assert np.abs(forward_conditioned(m, toks, c).data - base).max() <= 1e-12


@pytest.mark.parametrize("variant", ["diag", "square"])
def test_identity_head_equals_mtl(variant):
    m = build_model(TINY_MODEL, f"zhyper-{variant}", 2, Rng(0), d_c=3, hyper_cfg=tiny_hyper())
    randomize(m, Rng(1))
    m.hyper["head.W"].data[:] = 0.0
    m.hyper["head.b"].data[:] = 1.0 if variant == "diag" else np.eye(2).ravel()
    mtl = build_model(TINY_MODEL, "mtl", 2, Rng(0), d_c=3)
    for site, pair in m.pairs.items():
        mtl.pairs[site].A.data = pair.A.data.copy()
        mtl.pairs[site].B.data = pair.B.data.copy()
    toks = Rng(2).integers(11, size=(2, 6))
    want = forward_conditioned(mtl, toks).data
    assert np.array_equal(forward_conditioned(m, toks, Rng(4).gaussian(3)).data, want)
    assert np.array_equal(forward_unconditioned(m, toks).data, want)


@pytest.mark.parametrize("variant,size", [("diag", 32), ("square", 256)])
def test_materialization_matches_conditioned(variant, size):
    for seed in range(4):
        m = build_model(ModelConfig(), f"zhyper-{variant}", 8, Rng(seed), d_c=16)
        randomize(m, Rng(seed).child("r"), 0.2)
        c = Rng(seed).gaussian(16)
        adapters = materialize_adapter(m, c)
        assert adapters.signal_size() == signal_size(m) == size
        toks = Rng(seed + 9).integers(16, size=(3, 11))
        a = forward_conditioned(m, toks, c).data
        b = forward_materialized(m.cfg, m.base, adapters, toks).data
        assert np.abs(a - b).max() <= 1e-10


def test_materialized_against_reference_decoder():
    m = build_model(TINY_MODEL, "zhyper-square", 2, Rng(5), d_c=3, hyper_cfg=tiny_hyper())
    randomize(m, Rng(6), 0.5)
    c = Rng(7).gaussian(3)
    adapters = materialize_adapter(m, c)
    toks = Rng(8).integers(11, size=6)
    extra = {site: d.data for site, d in adapters.deltas().items()}
    want = reference_decoder(m.cfg, m.base, toks, extra)
    assert np.abs(forward_conditioned(m, toks, c).data - want).max() <= 1e-10


def test_oracle_selects_task_pairs():
    m = build_model(TINY_MODEL, "oracle", 2, Rng(0), d_c=3, n_tasks=2)
    randomize(m, Rng(1))
    toks = Rng(2).integers(11, size=(2, 5))
    mixed = forward_conditioned(m, toks, task=[0, 1]).data
    for k in (0, 1):
        alone = forward_materialized(m.cfg, m.base, materialize_adapter(m, task=k), toks[k]).data
        assert np.abs(mixed[k] - alone).max() <= 1e-10


def test_mtl_has_only_lora_parameters():
    m = build_model(TINY_MODEL, "mtl", 2, Rng(0), d_c=3)
    names = set(m.trainable())
    assert names == {f"lora.{layer}.{t}.{f}" for layer in (1, 2) for t in "QV" for f in "AB"}
    assert m.hyper is None and signal_size(m) == 0


def test_base_roundtrip(tmp_path):
    base = init_base(TINY_MODEL, Rng(3))
    save_base(tmp_path, TINY_MODEL, base)
    cfg, back = load_base(tmp_path)
    assert cfg == TINY_MODEL
    assert base_checksum(back) == base_checksum(base)
