import json

import pytest

from veloxnet.accounting import (CSV_COLUMNS, cost_report, count_macs, count_params, emit_summary,
                                 parse_csv, parse_json, storage_size)
from veloxnet.errors import ConsistencyError, UsageError
from veloxnet.models import Model, build_model_graph, build_squeezenet, build_veloxnet

VELOX_ROWS = {"conv1": 4_212, "batchnorm1": 6, "conv10": 780}
SQUEEZE_ROWS = {"conv1": 14_112, "batchnorm1": 192, "fire2": 12_064, "fire3": 12_576, "fire4": 45_632,
                "fire5": 49_728, "fire6": 105_312, "fire7": 111_456, "fire8": 189_568,
                "fire9": 197_760, "conv10": 2_570}


def test_veloxnet_rows():
    rep = cost_report(build_veloxnet(5))
    for name, n in VELOX_ROWS.items():
        assert rep.row(name).params == n
    for i in range(2, 10):
        assert rep.row(f"gmlp{i}").params == 49_296
    assert rep.total_params == 399_366


def test_squeezenet_rows():
    rep = cost_report(build_squeezenet(5))
    for name, n in SQUEEZE_ROWS.items():
        assert rep.row(name).params == n
    assert rep.total_params == 740_970


def test_mac_formulas_by_hand():
    rep = cost_report(build_veloxnet(5))
    assert rep.row("conv1").macs == 9 * 3 * 156 * 111 * 111
    assert rep.row("gmlp2").macs == 55 * 55 * 2 * 156 * 156
    assert rep.row("conv10").macs == 156 * 5 * 13 * 13
    assert rep.row("maxpool1").macs == 0 and rep.row("batchnorm1").macs == 0
    sq = cost_report(build_squeezenet(5))
    assert sq.row("fire2").macs == 56 * 56 * (96 * 16 + 16 * 64 + 9 * 16 * 64)


def test_flops_near_reference_values():
    assert abs(cost_report(build_veloxnet(5)).total_macs / 461e6 - 1) < 0.05
    assert abs(cost_report(build_squeezenet(5)).total_macs / 806e6 - 1) < 0.05


def test_storage():
    s = storage_size(build_veloxnet(5))
    assert s["bytes"] == 399_366 * 4
    assert round(s["mib"], 2) == 1.52


def test_cross_check_against_built_model():
    m = Model(build_veloxnet(5))
    assert sum(r.params for r in count_params(m)) == m.num_params() == 399_366
    m = Model(build_model_graph("veloxnet", preset="paper-eq", reduced=True))
    assert sum(r.params for r in count_params(m)) == m.num_params()


def test_cross_check_detects_mismatch():
    m = Model(build_model_graph("veloxnet", reduced=True))
    name, layer = m.named_layers()[0]
    layer.add_param("extra", layer.params["weight"][:1].copy())
    with pytest.raises(ConsistencyError, match=name):
        count_params(m)


def test_paper_eq_dense_mixing_counted():
    g = build_veloxnet(5, "paper-eq")
    rep = cost_report(g)
    n = 55 * 55
    d = 156
    assert rep.row("gmlp2").params == 2 * d + d * d + d + d + n * n + n + (d // 2) * d + d
    assert rep.row("gmlp2").macs == n * (d * d + d // 2 * d) + n * n * (d // 2)


def test_emitters_roundtrip():
    rep = cost_report(build_squeezenet(5))
    text = emit_summary(rep, "text")
    assert "740,970" in text.strip().splitlines()[-1]
    assert text.startswith("# squeezenet")
    back = parse_csv(emit_summary(rep, "csv"))
    assert back.rows == rep.rows
    assert emit_summary(rep, "csv").splitlines()[0] == ",".join(CSV_COLUMNS)
    back = parse_json(emit_summary(rep, "json"))
    assert back.rows == rep.rows
    assert json.loads(emit_summary(rep, "json"))["total_params"] == 740_970
    with pytest.raises(UsageError):
        emit_summary(rep, "xml")


def test_macs_only_rows():
    rows = count_macs(build_veloxnet(5))
    assert all(r.params == 0 for r in rows)
    assert sum(r.macs for r in rows) == cost_report(build_veloxnet(5)).total_macs


@pytest.mark.parametrize("variant,expected", [("no_sgu", 396_870), ("no_layernorm", 394_374),
                                              ("depth4", 202_182), ("depth6", 300_774),
                                              ("d96", 153_606), ("d128", 270_340), ("d192", 602_118)])
def test_ablation_totals_are_consistent(variant, expected):
    # regression values of our reconstruction; these are not published targets
    m = Model(build_veloxnet(5, ablation=variant))
    assert cost_report(m).total_params == m.num_params() == expected
