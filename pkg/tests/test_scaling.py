from __future__ import annotations

import pytest

from eq4d.config import build_config
from eq4d.errors import InvalidArgument
from eq4d.model import PanopticNet
from eq4d.scaling import (
    below_baseline,
    conv_params,
    feature_elems,
    kernel_size_for,
    model_size,
    scaling_table,
    table_csv,
)


def test_conv_params_examples():
    assert conv_params(15, 1, 256, 256) == 983_040
    assert conv_params(19, 4, 64, 64) == 311_296
    assert conv_params(1, 1, 1, 1) == 1
    with pytest.raises(InvalidArgument):
        conv_params(0, 1, 1, 1)


def test_feature_elems_examples():
    assert feature_elems(1, 1, 1) == 1
    assert feature_elems(1000, 128, 4) == 512_000
    assert len({feature_elems(100, 24 // n, n) for n in (1, 2, 3, 4, 6)}) == 1


def test_kernel_rule():
    assert [kernel_size_for(n) for n in (1, 2, 3, 4, 6)] == [15, 15, 15, 19, 15]


def test_table_at_256():
    rows = scaling_table(256)
    assert [r.c for r in rows] == [256, 128, 85, 64, 42]
    params = {r.n: r.conv_params for r in rows}
    # Independent evaluation of k * n * c^2.
    for r in rows:
        assert r.conv_params == r.k * r.n * r.c * r.c
    assert params[1] == 983_040 and params[4] == 311_296 and params[6] == 158_760
    assert below_baseline(rows)
    assert params[6] < params[4] < params[1]


def test_fixed_k_is_strictly_decreasing():
    for K in (4, 12, 60, 256):
        vals = [15 * K * K // n for n in (1, 2, 3, 4, 6) if K % n == 0]
        assert all(a > b for a, b in zip(vals, vals[1:]))


def test_n4_bump_stays_below_baseline():
    for K in range(4, 513, 4):
        rows = scaling_table(K, (1, 4))
        assert rows[1].conv_params < rows[0].conv_params


def test_minimal_table_and_csv():
    rows = scaling_table(4, (1, 2, 4))
    assert [(r.n, r.c) for r in rows] == [(1, 4), (2, 2), (4, 1)]
    text = table_csv(rows, "h")
    lines = text.strip().splitlines()
    assert lines[0].startswith("config_hash,n,c,k") and lines[-1] == "# below_baseline=true"
    assert all(line.startswith("h,") for line in lines[1:-1])
    with pytest.raises(InvalidArgument):
        below_baseline(scaling_table(4, (2, 4)))


def test_model_size_report():
    cfg = build_config({}, ["net.levels=2"])
    model = PanopticNet(cfg.net, cfg.heads)
    rep = model_size(model, [1000, 250])
    assert rep.total == model.num_parameters()
    assert rep.peak_feature_elems == max(1000 * 8 * 4, 250 * 16 * 4)
