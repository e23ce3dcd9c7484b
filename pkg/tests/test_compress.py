import hashlib

import numpy as np
import pytest

from lrskel.compress import (
    CompressionPlan,
    PlanParseError,
    REPORT_HEADER,
    compress_model,
    parse_plan,
    rank_sweep,
    sweep_to_csv,
)
from lrskel.data import DatasetSpec, generate_dataset
from lrskel.finetune import TrainConfig, evaluate, train
from lrskel.linalg import frobenius, reconstruction_error, svd
from lrskel.model import ModelConfig, build_model, count_params, forward, named_layers, named_params


def toy_model(seed=0):
    return build_model(ModelConfig(joints=3, frames=8, d_model=16, heads=2,
                                   blocks=1, classes=4, seed=seed))


def param_digest(model):
    h = hashlib.sha256()
    for name, arr in named_params(model).items():
        h.update(name.encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def test_parse_plan_two_groups():
    plan = parse_plan("q=1,k=3")
    assert plan.ranks == {"Q": 1, "K": 3}
    assert plan.rank_for("V") is None


def test_parse_plan_empty_is_identity():
    assert parse_plan("") == CompressionPlan()
    assert parse_plan("full") == CompressionPlan()
    assert parse_plan("").is_identity()


def test_parse_plan_full_group_equals_omitted():
    assert parse_plan("v=full") == parse_plan("")
    assert parse_plan("q=2,v=full") == parse_plan("q=2")


def test_parse_plan_case_and_whitespace():
    assert parse_plan(" Q = 4 , Embed=2 ").ranks == {"Q": 4, "EMBED": 2}


def test_parse_plan_rejects_zero_rank():
    with pytest.raises(PlanParseError):
        parse_plan("q=0")


def test_parse_plan_rejects_bad_tokens():
    for text in ("q", "q=x", "zz=3", "q=1,q=2", "q=1,,k=2", "q=-2"):
        with pytest.raises(PlanParseError):
            parse_plan(text)


def test_parse_plan_error_mentions_position():
    with pytest.raises(PlanParseError, match="directive 2"):
        parse_plan("q=1,k=0")


def test_plan_render_round_trip():
    for text in ("", "full", "q=1,k=3", "v=2", "q=1,k=3,v=2,o=4,embed=5,head=1"):
        plan = parse_plan(text)
        assert parse_plan(plan.render()) == plan


def test_identity_plan_keeps_everything():
    m = toy_model()
    compressed, report = compress_model(m, CompressionPlan())
    rng = np.random.default_rng(0)
    batch = [rng.normal(size=(8, 3, 3)) for _ in range(3)]
    assert np.array_equal(forward(m, batch), forward(compressed, batch))
    assert report.params_after == report.params_before
    for name, arr in named_params(m).items():
        assert np.array_equal(arr, named_params(compressed)[name])


def test_full_rank_plan_keeps_logits_and_doubles_square_layers():
    m = toy_model()
    plan = CompressionPlan({"Q": 8, "K": 8, "V": 8, "O": 16, "EMBED": 9,
                            "HEAD": 4})
    compressed, report = compress_model(m, plan)
    rng = np.random.default_rng(1)
    batch = [rng.normal(size=(8, 3, 3)) for _ in range(4)]
    a = forward(m, batch)
    b = forward(compressed, batch)
    assert np.abs(a - b).max() < 1e-8
    # a square layer at full rank honestly doubles its weight count
    wo_rows = [r for r in report.layers if r.group == "O"]
    for r in wo_rows:
        assert r.params_after > r.params_before
    assert report.params_after > report.params_before


def test_compression_reduces_params_at_low_rank():
    m = toy_model()
    _, report = compress_model(m, parse_plan("q=1,k=3"))
    assert report.params_after < report.params_before


def test_recon_error_matches_independent_svd():
    m = toy_model()
    compressed, report = compress_model(m, parse_plan("v=1"))
    by_name = {r.name: r for r in report.layers}
    for name, layer, group in named_layers(m):
        row = by_name[name]
        if group != "V":
            assert row.rank is None
            assert row.recon_fro == 0.0
            continue
        s = svd(layer.weight)
        expected = reconstruction_error(s, 1)
        assert abs(row.recon_fro - expected) < 1e-12
        assert abs(row.recon_rel - expected / frobenius(layer.weight)) < 1e-12


def test_error_ordering_in_rank():
    m = toy_model()
    errs = []
    for k in (1, 2, 3, None):
        plan = CompressionPlan({} if k is None else {"V": k})
        _, report = compress_model(m, plan)
        per_layer = [r.recon_fro for r in report.layers if r.group == "V"]
        errs.append(per_layer)
    for smaller, larger in zip(errs[1:], errs[:-1]):
        for lo, hi in zip(smaller, larger):
            assert lo <= hi + 1e-15


def test_compress_does_not_mutate_source():
    m = toy_model()
    digest = param_digest(m)
    compress_model(m, parse_plan("q=1,k=1,v=1,o=1,embed=1,head=1"))
    assert param_digest(m) == digest


def test_rank_too_large_names_layer():
    m = toy_model()
    with pytest.raises(ValueError, match="blocks.0.heads.0.wv"):
        compress_model(m, parse_plan("v=9999"))


def test_compressing_lowrank_layer_is_an_error():
    m = toy_model()
    once, _ = compress_model(m, parse_plan("v=1"))
    with pytest.raises(ValueError, match="already low-rank"):
        compress_model(once, parse_plan("v=1"))
    # an identity directive on the compressed group is fine
    again, _ = compress_model(once, parse_plan("q=2"))
    assert again.blocks[0].heads[0].wv.kind == "lowrank"


def test_report_totals_and_recount():
    m = toy_model()
    compressed, report = compress_model(m, parse_plan("q=1,k=2"))
    assert report.params_before == sum(r.params_before for r in report.layers)
    assert report.params_after == sum(r.params_after for r in report.layers)
    assert report.params_before == count_params(m)
    assert report.params_after == count_params(compressed)


def test_report_csv_shape():
    m = toy_model()
    _, report = compress_model(m, parse_plan("v=1"))
    lines = report.to_csv().strip().split("\n")
    assert lines[0] == REPORT_HEADER
    assert lines[-1].startswith("TOTAL,")
    assert len(lines) == 2 + len(report.layers)
    total_cells = lines[-1].split(",")
    assert int(total_cells[5]) == report.params_before
    assert int(total_cells[6]) == report.params_after


@pytest.fixture(scope="module")
def trained_toy():
    spec = DatasetSpec(classes=4, train_per_class=40, test_per_class=15,
                       frames=8, joints=3, noise_sigma=0.05, seed=5)
    tr, te = generate_dataset(spec)
    m = build_model(ModelConfig(joints=3, frames=8, d_model=16, heads=2,
                                blocks=1, classes=4, seed=5))
    trained, _ = train(m, tr, te, TrainConfig(base_lr=0.1, epochs=4,
                                              batch_size=16, seed=5))
    return trained, te


def test_rank_sweep_identity_matches_direct_eval(trained_toy):
    m, test = trained_toy
    rows = rank_sweep(m, test, [CompressionPlan()])
    assert rows[0].plan == "full"
    assert rows[0].top1 == evaluate(m, test)
    assert rows[0].params == count_params(m)


def test_rank_sweep_value_rank_one_hurts_trained_model(trained_toy):
    m, test = trained_toy
    grid = [CompressionPlan(), parse_plan("v=1")]
    rows = rank_sweep(m, test, grid)
    assert rows[1].top1 < rows[0].top1


def test_rank_sweep_full_rank_equivalent_keeps_accuracy(trained_toy):
    m, test = trained_toy
    rows = rank_sweep(m, test, [CompressionPlan(), parse_plan("q=8")])
    assert rows[1].top1 == rows[0].top1


def test_rank_sweep_preserves_grid_order(trained_toy):
    m, test = trained_toy
    grid = [parse_plan(t) for t in ("v=3", "full", "v=1", "v=2")]
    rows = rank_sweep(m, test, grid)
    assert [r.plan for r in rows] == ["v=3", "full", "v=1", "v=2"]


def test_rank_sweep_rejects_empty_grid():
    m = toy_model()
    with pytest.raises(ValueError):
        rank_sweep(m, [], [])


def test_sweep_csv(trained_toy):
    m, test = trained_toy
    rows = rank_sweep(m, test, [CompressionPlan(), parse_plan("v=1")])
    csv_text = sweep_to_csv(rows)
    lines = csv_text.strip().split("\n")
    assert lines[0] == "plan,params,top1"
    assert lines[1].startswith("full,")
    assert lines[2].startswith("v=1,")
