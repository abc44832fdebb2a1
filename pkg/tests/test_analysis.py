import numpy as np
import pytest

from contnet import ops
from contnet.analysis import (GOLDEN, conv_flops_formula, conv_param_formula, count_flops, count_params,
                              stage_shapes, ste_flops_formula, ste_param_formula, summarize)
from contnet.autograd import ShapeError, Tensor
from contnet.model import build_network, make_ablation_config, tiny_config, variant_config
from contnet.train import label_smoothing_ce


@pytest.fixture(scope="module")
def reports():
    return {v: summarize(build_network(variant_config(v))) for v in ("ti", "s", "m", "b")}


# ---------------------------------------------------------------- formulas
def test_ste_param_formula_values():
    assert ste_param_formula(64, 256, 7) == 52_288
    assert ste_param_formula(512, 1024, 7) == 2_122_240


def test_ste_flops_formula_value():
    expected = 2 * 64 * 256 * 3136 + 4 * 64 ** 2 * 3136 + 3136 // 49
    assert expected == 154_140_736
    assert ste_flops_formula(64, 256, 7, 56, 56) == expected


@pytest.mark.parametrize("d,p,h", [(64, 7, 56), (128, 7, 28), (256, 14, 14)])
def test_ste_increase_over_3x3_conv(d, p, h):
    hw = h * h
    assert ste_flops_formula(d, 4 * d, p, h, h) - conv_flops_formula(d, h, h) == 3 * d * d * hw + hw // (p * p)


def test_conv_formulas():
    assert conv_param_formula(64) == 36_864
    assert conv_flops_formula(64, 56, 56) == 115_605_504


# ---------------------------------------------------------- measured counts
def test_single_3x3_conv_row(reports):
    row = next(r for r in reports["m"].rows if r.name == "stages.0.0.conv.conv")
    assert row.params == 9 * 64 ** 2
    assert row.flops == 115_605_504


def test_strict_audit_matches_formula_for_every_ste():
    net = build_network(variant_config("s", strict_paper=True))
    # strict mode has no biases; layer norms are excluded from the count as the formula has none
    audit = summarize(net, norms=False).ste_audit
    assert len(audit) == 8
    for a in audit:
        assert a["params"] == a["formula_params"], a["layer"]
        d, f, (h, w), p = a["D"], a["D_ffn"], a["map"], a["P"]
        assert a["flops"] == 2 * d * f * h * w + 4 * d * d * h * w
        assert a["flops"] == a["formula_flops"] - (h * w) // (p * p)
        assert a["attention_flops"] == 2 * p * p * d * h * w


def test_totals_equal_direct_counts(reports):
    net = build_network(variant_config("ti"))
    rep = reports["ti"]
    assert rep.total_params == count_params(net) == net.parameter_store().numel()
    assert rep.total_flops == count_flops(net, (224, 224))
    assert count_flops(net, (224, 224), include_attention=True) == rep.total_flops + rep.attention_flops
    assert rep.total_params == sum(r.params for r in rep.rows)


@pytest.mark.parametrize("flags", [dict(biases=False), dict(norms=False), dict(pe=False),
                                   dict(biases=False, norms=False, pe=False)])
def test_inclusion_flags_match_store(flags):
    net = build_network(variant_config("ti"))
    assert summarize(net, **flags).total_params == net.parameter_store().numel(**flags) == count_params(net, **flags)


def test_stage_sections(reports):
    rep = reports["m"]
    assert [s[2] for _, s in rep.stages] == [56, 28, 14, 7]
    assert stage_shapes(build_network(variant_config("ti")))[-1] == (1, 768, 7, 7)


def test_monotone_over_variants(reports):
    p = [reports[v].total_params for v in ("ti", "s", "m", "b")]
    f = [reports[v].total_flops for v in ("ti", "s", "m", "b")]
    assert p == sorted(p) and len(set(p)) == 4
    assert f == sorted(f) and len(set(f)) == 4


def test_group_8_conv_rows_shrink_eightfold():
    base = summarize(build_network(variant_config("m")))
    grouped = summarize(build_network(make_ablation_config(variant_config("m"), "groups", 8)))
    ref = {r.name: r for r in base.rows}
    block_convs = [r for r in grouped.rows if r.kind == "conv" and ".conv.conv" in r.name and "stages" in r.name]
    assert block_convs
    for r in block_convs:
        assert ref[r.name].params == 8 * r.params
        assert ref[r.name].flops == 8 * r.flops


def test_flops_linear_in_batch_and_area():
    # position tables pin the patch extents, so scale the area on a network without them
    net = build_network(tiny_config(pe_kind="none"))
    one, two = summarize(net, (1, 3, 32, 32)), summarize(net, (2, 3, 32, 32))
    assert two.total_flops == 2 * one.total_flops
    big = summarize(net, (1, 3, 64, 64))
    conv_one = {r.name: r.flops for r in one.rows if r.kind == "conv"}
    for r in big.rows:
        if r.kind == "conv":
            assert r.flops == 4 * conv_one[r.name]


def test_param_count_invariant_under_training_step():
    net = build_network(tiny_config())
    before = count_params(net)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32))
    label_smoothing_ce(net(x), [0, 1]).backward()
    assert count_params(net) == before


def test_tsv_columns_are_stable(reports):
    lines = reports["ti"].to_tsv().splitlines()
    assert lines[0] == "layer\tkind\tparams\tflops\tshape"
    assert lines[1].split("\t")[0] == "stem.conv.conv"
    assert all(len(line.split("\t")) == 5 for line in lines)


def test_text_report_has_totals_and_both_flop_conventions(reports):
    text = reports["s"].to_text()
    assert "total params" in text and "attention matmul flops" in text and "total incl. attention" in text


def test_golden_deltas(reports):
    for v, rep in reports.items():
        d = rep.golden_deltas()
        gflops, mparams = GOLDEN[v]
        assert d["params"] == pytest.approx(rep.total_params / (mparams * 1e6) - 1)
        assert d["flops"] == pytest.approx(rep.total_flops / (gflops * 1e9) - 1)
    assert summarize(build_network(tiny_config())).golden_deltas() is None


def test_invalid_input_shape():
    net = build_network(tiny_config())
    with pytest.raises(ShapeError):
        summarize(net, (40, 40))
    with pytest.raises(ShapeError):
        summarize(net, (1, 1, 32, 32))


def test_measured_flops_match_matmul_instrumentation(monkeypatch):
    """Second route: count the MACs of every matmul issued by a real forward pass."""
    # 1-D tables are added directly, so every matmul is a linear map or an attention product
    net = build_network(tiny_config(pe_kind="learnable_1d"), dtype=np.float64).eval()
    macs = []
    real = ops.matmul

    def counting(a, b):
        out = real(a, b)
        macs.append(int(np.prod(out.shape)) * a.shape[-1])
        return out

    monkeypatch.setattr(ops, "matmul", counting)
    net(Tensor(np.zeros((1, 3, 32, 32))))
    rep = summarize(net)
    assert sum(macs) == sum(r.flops for r in rep.rows if r.kind in ("linear", "attention"))
