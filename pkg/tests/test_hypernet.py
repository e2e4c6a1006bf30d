import math

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from zhyper.errors import ContractError, DimensionError
from zhyper.hypernet import HyperConfig, HyperNetwork, hyper_forward, init_hypernet, init_shapes
from zhyper.numerics import Rng, Tensor, backward, finite_diff_grad, rel_err, tsum


def gelu_ref(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def one_unit_net():
    cfg = HyperConfig(n_layers=2, d_c=2, d_t=1, d_l=1, d_mlp_in=1, d_mlp_hidden=1, d_mlp_out=1, n_blocks=1, rank=1)
    p = {
        "E_type": [[0.5], [-0.25]],
        "E_layer": [[0.1], [0.2]],
        "proj.W": [[1.0], [-1.0], [1.0], [1.0]],
        "proj.b": [0.0],
        "block0.W1": [[1.0]],
        "block0.b1": [0.0],
        "block0.W2": [[1.0]],
        "block0.b2": [0.0],
        "head.W": [[2.0]],
        "head.b": [1.0],
    }
    return HyperNetwork(cfg, {k: Tensor(np.array(v, dtype=float), requires_grad=True) for k, v in p.items()})


@pytest.mark.parametrize("t,layer", [("Q", 1), ("V", 2)])
def test_hand_evaluated_one_unit(t, layer):
    h = one_unit_net()
    c = [0.7, 0.3]
    e_t = {"Q": 0.5, "V": -0.25}[t]
    e_l = {1: 0.1, 2: 0.2}[layer]
    u = gelu_ref(c[0] - c[1] + e_t + e_l)
    u = gelu_ref(gelu_ref(u))
    want = 2.0 * u + 1.0
    got = hyper_forward(h, np.array(c), t, layer)
    assert got.kind == "diag"
    assert abs(got.value.data[0] - want) <= 1e-12


@pytest.mark.parametrize("variant,shape", [("diag", (8,)), ("square", (8, 8))])
def test_fresh_init_emits_identity(variant, shape):
    cfg = HyperConfig(n_layers=3, d_c=16, rank=8, variant=variant, d_mlp_in=8, d_mlp_hidden=16, d_mlp_out=8)
    h = init_hypernet(cfg, Rng(0))
    for c in Rng(1).gaussian((3, 16)):
        m = hyper_forward(h, c, "V", 3)
        assert m.value.shape == shape
        assert np.array_equal(m.value.data.reshape(8, -1).squeeze(), np.ones(8) if variant == "diag" else np.eye(8))


def test_zero_head_gives_zero_signal():
    cfg = HyperConfig(n_layers=2, d_c=4, rank=3, d_mlp_in=4, d_mlp_hidden=4, d_mlp_out=4)
    h = init_hypernet(cfg, Rng(2))
    h["head.b"].data[:] = 0.0
    assert not np.any(hyper_forward(h, np.ones(4), "Q", 2).value.data)


def test_init_is_deterministic_and_kaiming():
    cfg = HyperConfig(n_layers=2, d_c=64)
    a, b = init_hypernet(cfg, Rng(9)), init_hypernet(cfg, Rng(9))
    for name in a.params:
        assert np.array_equal(a[name].data, b[name].data)
    w = a["block0.W1"].data
    assert abs(w.std() - math.sqrt(2.0 / w.shape[0])) < 0.05 * math.sqrt(2.0 / w.shape[0])
    assert abs(a["E_layer"].data.std() - 0.02) < 0.01
    assert not np.any(a["head.W"].data) and not np.any(a["proj.b"].data)


def test_canonical_shapes():
    shapes = init_shapes(HyperConfig(n_layers=32))
    assert shapes["proj.W"] == (1024 + 64 + 64, 128)
    assert shapes["block0.W2"] == (512, 128)
    assert shapes["block2.W2"] == (512, 512)
    assert shapes["head.W"] == (512, 8)
    assert init_shapes(HyperConfig(n_layers=32, variant="mix"))["head.W"] == (512, 64)


def test_bad_inputs():
    h = one_unit_net()
    with pytest.raises(DimensionError):
        hyper_forward(h, np.ones(3), "Q", 1)
    with pytest.raises(KeyError):
        hyper_forward(h, np.ones(2), "K", 1)
    with pytest.raises(KeyError):
        hyper_forward(h, np.ones(2), "Q", 3)
    with pytest.raises(ContractError):
        HyperConfig(n_layers=0)
    with pytest.raises(ContractError):
        HyperConfig(n_layers=1, variant="full")


def small(variant="diag", seed=0):
    cfg = HyperConfig(n_layers=3, d_c=3, d_t=2, d_l=2, d_mlp_in=3, d_mlp_hidden=4, d_mlp_out=3, rank=2, variant=variant)
    h = init_hypernet(cfg, Rng(seed))
    rng = Rng(seed).child("rand")
    for name, p in h.params.items():
        p.data = rng.child(name).gaussian(p.shape, 0.0, 0.7)
    return h


def test_layer_enters_only_through_table():
    h = small()
    c = Rng(3).gaussian(3)
    before = hyper_forward(h, c, "Q", 1).value.data
    h["E_layer"].data[[0, 2]] = h["E_layer"].data[[2, 0]]
    assert np.array_equal(hyper_forward(h, c, "Q", 3).value.data, before)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**20), st.sampled_from(["diag", "square"]))
def test_stacked_signals_match_single_sites(seed, variant):
    h = small(variant, seed)
    cs = Rng(seed).gaussian((2, 3))
    stacked = h.signals(cs)
    for (layer, t), v in stacked.items():
        assert np.allclose(v.data, h.signal(cs, t, layer).data, atol=1e-13)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**20), st.sampled_from(["diag", "square"]))
def test_gradients_through_every_group(seed, variant):
    h = small(variant, seed)
    c = Tensor(Rng(seed).gaussian((2, 3)), requires_grad=True)
    probe = Tensor(Rng(seed + 1).gaussian((2, 2) if variant == "diag" else (2, 2, 2)))

    def loss():
        sig = h.signals(c)
        return tsum(sig[(2, "V")] * probe) + tsum(sig[(1, "Q")] * sig[(3, "Q")])

    leaves = dict(h.params, context=c)
    for p in leaves.values():
        p.zero_grad()
    backward(loss())
    for name, p in leaves.items():
        assert rel_err(p.grad, finite_diff_grad(lambda _: loss(), p)) <= 1e-4, name
