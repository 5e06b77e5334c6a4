import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetprune.architecture import Architecture, LayerSpec, micronet
from budgetprune.metrics import (
    CostReport,
    SScoreConfig,
    arch_macs,
    backbone_bytes,
    backbone_macs,
    conv_macs,
    cost_report,
    count_macs,
    count_param_bytes,
    csv_columns,
    csv_row,
    mac_ratio,
    param_ratio,
    s_per_cost,
    s_score,
    switch_bytes,
    tensor_bytes,
)
from budgetprune.model import build_from_descriptor

from oracles import conv_macs_direct


def one_conv(c_in, c_out, k, size, stride=1, padding=None):
    padding = k // 2 if padding is None else padding
    return Architecture((c_in, size, size), [
        LayerSpec("conv", c_in, c_out, k, stride, padding, masked=True), LayerSpec("gap")])


def test_conv_formula_example():
    arch = one_conv(3, 8, 3, 16)
    assert arch_macs(arch) == 16 * 16 * 8 * 3 * 3 * 3 == 55296
    m = build_from_descriptor(arch, [("d", 2)])
    m.domain("d").switches[0].data[:] = [1.0, -1.0, -1.0]
    assert count_macs(m, "d") == 18432 + 8 * 2


def test_fully_active_model_has_unit_mac_ratio():
    m = build_from_descriptor(micronet(), [("a", 3), ("b", 4)])
    assert count_macs(m) == arch_macs(micronet())
    assert mac_ratio(m, "a") == 1.0 and mac_ratio(m, "b") == 1.0


def test_micronet_backbone_macs():
    per_layer = [32 * 32 * 16 * 3 * 9, 16 * 16 * 32 * 16 * 9, 16 * 16 * 32 * 32 * 9]
    m = build_from_descriptor(micronet(), [("a", 3)])
    assert backbone_macs(m) == sum(per_layer)
    assert backbone_macs(m, "a") == sum(per_layer) + 32 * 3


def test_param_bytes_examples():
    assert tensor_bytes((64, 32, 3, 3)) == 73728
    assert switch_bytes(32) == 4 and switch_bytes(33) == 5 and switch_bytes(3) == 1


def test_zero_domain_model_equals_backbone():
    m = build_from_descriptor(micronet(), [])
    assert count_param_bytes(m) == backbone_bytes(micronet())
    assert param_ratio(m) == 1.0


def test_micronet_param_accounting_by_hand():
    kernels = 16 * 3 * 9 + 32 * 16 * 9 + 32 * 32 * 9
    bn = 4 * (16 + 32 + 32)
    assert backbone_bytes(micronet()) == 4 * (kernels + bn)
    m = build_from_descriptor(micronet(), [("a", 3), ("b", 4)])
    switches = 1 + 2 + 4  # 3, 16 and 32 switches rounded up to whole bytes
    assert count_param_bytes(m) == 4 * kernels + 2 * 4 * bn + 2 * switches


LAYER_CONFIGS = [
    (3, 8, 3, 16, 1, 1), (3, 16, 3, 32, 1, 1), (16, 32, 3, 16, 1, 1), (32, 32, 3, 16, 1, 1),
    (8, 4, 1, 10, 1, 0), (4, 6, 5, 12, 1, 2), (6, 6, 3, 15, 2, 1), (2, 3, 3, 9, 3, 0),
    (5, 7, 1, 9, 2, 0), (1, 1, 7, 21, 1, 3),
]


@pytest.mark.parametrize("c_in, c_out, k, size, stride, pad", LAYER_CONFIGS)
def test_count_macs_matches_direct_count(c_in, c_out, k, size, stride, pad):
    arch = one_conv(c_in, c_out, k, size, stride, pad)
    out = (size + 2 * pad - k) // stride + 1
    assert arch_macs(arch) == conv_macs_direct(out, out, c_out, c_in, k, k)
    assert conv_macs(out, out, c_out, c_in, k, k) == arch_macs(arch)


def test_unknown_layer_type_rejected():
    arch = micronet()
    arch.layers[2].type = "swish"
    with pytest.raises(ValueError, match="unknown layer type"):
        arch_macs(arch)


def test_s_score_examples():
    base = {f"d{i}": 0.1 + 0.02 * i for i in range(10)}
    cfg = SScoreConfig.from_baseline(base)
    assert s_score({d: cfg.err_max[d] for d in base}, cfg) == 0.0
    assert s_score({d: 0.0 for d in base}, cfg) == pytest.approx(10000.0)
    errs = {d: cfg.err_max[d] for d in base}
    errs["d3"] = cfg.err_max["d3"] / 2
    assert s_score(errs, cfg) == pytest.approx(250.0)


def test_s_score_config_invariant_enforced():
    with pytest.raises(ValueError):
        SScoreConfig({"a": 0.5}, {"a": 2.0}, {"a": 1.0})
    cfg = SScoreConfig.from_baseline({"a": 0.2, "b": 0.4})
    for d in "ab":
        assert cfg.alpha[d] * cfg.err_max[d] ** cfg.gamma[d] == pytest.approx(1000.0)


def test_s_score_rejects_out_of_range_errors():
    cfg = SScoreConfig.from_baseline({"a": 0.2})
    for bad in (-0.1, 1.5):
        with pytest.raises(ValueError):
            s_score({"a": bad}, cfg)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.01, 0.5))
def test_s_score_non_increasing_in_error(e1, e2, base):
    cfg = SScoreConfig.from_baseline({"a": base, "b": 0.3})
    lo, hi = sorted((e1, e2))
    assert s_score({"a": hi, "b": 0.2}, cfg) <= s_score({"a": lo, "b": 0.2}, cfg)


def test_s_per_cost():
    assert s_per_cost(2552, 1.0, 1.0) == (2552, 2552)
    with pytest.raises(ValueError):
        s_per_cost(100, 0.0, 1.0)


# Reference rows (S, mac ratio, S_O, param ratio, S_P) from a multi-domain benchmark.
TABLE_ROWS = [
    (2552, 0.447, 5709, 0.783, 3259),
    (1942, 0.238, 8159, 0.531, 3657),
    (2444, 0.645, 3789, 0.921, 2654),
    (2512, 0.837, 3001, 1.03, 2438),
]


def _sig3(x):
    return float(f"{x:.3g}")


@pytest.mark.parametrize("s, mr, so, pr, sp", TABLE_ROWS)
def test_reference_rows_are_consistent(s, mr, so, pr, sp):
    got_o, got_p = s_per_cost(s, mr, pr)
    assert _sig3(got_o) == _sig3(so)
    assert _sig3(got_p) == _sig3(sp)


def test_cost_report_and_csv_schema():
    m = build_from_descriptor(micronet(), [("a", 3), ("b", 4)])
    rep = cost_report(m, {"a": 0.9, "b": 0.6}).with_scores(SScoreConfig.from_baseline({"a": 0.2, "b": 0.5}))
    assert rep.mac_ratio == 1.0 and rep.s > 0
    assert rep.s_o == pytest.approx(rep.s) and rep.s_p == pytest.approx(rep.s / rep.param_ratio)
    text = csv_row(rep, 0.5, 1.0, 0)
    header, row = text.strip().split("\n")
    assert header.split(",") == csv_columns(["a", "b"])
    assert header == "schema_version,beta,lambda_ps,seed,acc_a,acc_b,mac_ratio,param_ratio,S,S_O,S_P"
    assert row.startswith("1,0.5,1.0,0,0.900000,0.600000,1.000000,")
    assert CostReport(**rep.to_dict()) == rep
