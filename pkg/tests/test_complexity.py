import math

import pytest
from hypothesis import given
import hypothesis.strategies as st

from zhyper import complexity as cx
from zhyper.errors import ContractError
from zhyper.hypernet import HyperConfig, init_shapes

REF = cx.ARCH_PRESETS["ref-7b"]

# published budget targets, trainable parameters in millions
TARGETS = {
    8: {"mtl": 3.41, "zhyper-diag": 4.21, "zhyper-square": 4.27},
    16: {"mtl": 6.82, "zhyper-diag": 7.62, "zhyper-square": 7.87, "t2l": 110.06},
    32: {"mtl": 13.63, "zhyper-diag": 14.46, "zhyper-square": 15.47},
}


def test_hand_sum():
    assert cx.lora_param_count(cx.ArchSpec(1, {"Q": (2, 2)}, 1)) == 4


@pytest.mark.parametrize("r,count,label", [(8, 3_407_872, "3.41M"), (16, 6_815_744, "6.82M"),
                                           (32, 13_631_488, "13.63M")])
def test_lora_counts_exact(r, count, label):
    n = cx.lora_param_count(REF.with_rank(r))
    assert n == count and cx.millions(n) == label


@pytest.mark.parametrize("r", [8, 16, 32])
@pytest.mark.parametrize("method", ["zhyper-diag", "zhyper-square"])
def test_zhyper_within_band(r, method):
    total = cx.method_budget(method, REF.with_rank(r)).total
    assert abs(total / (TARGETS[r][method] * 1e6) - 1) <= 0.05


def test_t2l_ratio():
    t2l = cx.method_budget("t2l", REF.with_rank(16)).total
    z = cx.method_budget("zhyper-diag", REF).total
    assert t2l / z >= 26
    assert abs(t2l / 110.06e6 - 1) <= 0.05


def test_head_count_example():
    assert cx.head_param_count(cx.CANONICAL_HYPER, 8) == 4104


def test_counts_agree_with_hypernet_shapes():
    for variant, method in (("diag", "zhyper-diag"), ("square", "zhyper-square")):
        shapes = init_shapes(HyperConfig(n_layers=32, rank=8, variant=variant))
        n = sum(math.prod(s) for s in shapes.values())
        b = cx.method_budget(method, REF)
        assert n == b.hyper_params + b.embed_params


def test_signal_sizes():
    assert cx.per_context_signal_size("zhyper-diag", REF) == 512
    assert cx.per_context_signal_size("zhyper-square", REF) == 4096
    assert cx.per_context_signal_size("t2l", REF) == 3_407_872
    assert cx.per_context_signal_size("mtl", REF) == 0


@given(st.integers(1, 40), st.integers(1, 64), st.integers(1, 64), st.integers(1, 32))
def test_signal_ordering(L, d_in, d_out, r):
    spec = cx.ArchSpec(L, {"Q": (d_in, d_out)}, r)
    diag, sq, t2l, hl = (cx.per_context_signal_size(m, spec) for m in ("zhyper-diag", "zhyper-square", "t2l",
                                                                        "hyperlora"))
    assert diag <= sq
    if r < d_in + d_out:
        assert sq < t2l and sq < hl
    assert cx.rademacher_numerator("zhyper-diag", r, d_in, d_out) <= cx.rademacher_numerator(
        "zhyper-square", r, d_in, d_out)


def test_components_sum_to_total():
    for m in cx.METHODS:
        b = cx.method_budget(m, REF, cx.HyperSpec(p_emb=1000))
        assert sum(n for _, n in b.components) == b.total
    assert cx.method_budget("hyperlora", REF, cx.HyperSpec(p_emb=1000)).modeled


def test_render():
    text = cx.render_table(cx.budget_table())
    assert "3.41M" in text and "110.01M" in text and "modeled" in text
    csv = cx.render_csv([cx.method_budget("mtl", REF)])
    assert csv.splitlines()[-1] == "mtl,8,total,3407872"


def test_bad_inputs():
    with pytest.raises(ContractError):
        cx.method_budget("lora-xs", REF)
    with pytest.raises(ContractError):
        cx.ArchSpec(0, {"Q": (2, 2)}, 1)
    with pytest.raises(ContractError):
        cx.HyperSpec(p_emb=-1)
