import copy

import numpy as np
import pytest
import torch

from mosaicprune.pipeline import (
    MosaicModel,
    dense_sample,
    evaluate,
    expected_groups,
    forward_macs,
    kept_groups,
    mac_count,
    mosaic_sample,
    realized_sparsity,
    run_divide,
    run_prune,
    sign_test,
    write_report_csv,
)
from mosaicprune.pruner import n_pruned_groups
from mosaicprune.schedule import build_schedule
from mosaicprune.toydiffusion import Denoiser, ModelConfig, SamplerSpec, make_blob_dataset
from mosaicprune.trajectory import StagePlan, preset_plan

# Hand tally for the default toy architecture (tokens N=16, patch dim P=4,
# width d=64, frequency dim 64, 4 heads of 16, MLP hidden 256, depth 4).
#   fixed per forward: patch embed 16*4*64 + t-mlp 64*64 + 64*64 + head 16*64*4 = 16384
#   per block: cond 4096, qkv 16*64*3*(16h), scores+mix 2*h*256*16, proj 16*(16h)*64, mlp 2*16*64*I
DENSE_FORWARD = 3_309_568
FORWARD_AT_30 = 2_392_064  # 1 head and 76 neurons pruned per block
FORWARD_AT_60 = 1_466_368  # 2 heads, 153 neurons
FORWARD_AT_04 = 3_227_648  # 0 heads, 10 neurons
FORWARD_AT_10 = 3_104_768  # 0 heads, 25 neurons


@pytest.fixture(scope="module")
def setup():
    torch.manual_seed(0)
    model = Denoiser(ModelConfig()).eval()
    return model, make_blob_dataset(256, seed=5), build_schedule()


@pytest.fixture(scope="module")
def hessians():
    return {}


def prune(setup, hessians, plan, **kw):
    model, data, s = setup
    return run_prune(model, plan, data, s, n_calib=32, seed=0, hessians=hessians, **kw)


def params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


# --- divide -------------------------------------------------------------------------

def test_run_divide_three_stages():
    plan = run_divide(build_schedule(), lam=1e-4, M=0.55, target_aggregate=0.3)
    assert 1000 > plan.dividers[0] > plan.dividers[1] > 1
    assert len(plan.stage_ranges()) == 3


def test_stage_two_narrows_as_threshold_rises():
    d = [run_divide(build_schedule(), lam=1e-4, M=M).dividers for M in (0.45, 0.55, 0.70)]
    assert d[0][0] > d[1][0] > d[2][0]
    assert d[0][1] < d[1][1] < d[2][1]


def test_zero_target_gives_zero_sparsities():
    assert run_divide(build_schedule(), lam=1e-4, target_aggregate=0.0).sparsities == (0.0, 0.0, 0.0)


# --- prune --------------------------------------------------------------------------

def test_zero_plan_is_dense(setup, hessians):
    model, _, s = setup
    before = copy.deepcopy(model.state_dict())
    m = prune(setup, hessians, StagePlan(dividers=(550, 94), horizon=1000))
    assert all(params_equal(net, model) for net in m.subnets)
    assert all(torch.equal(v, before[k]) for k, v in model.state_dict().items())
    labels = torch.arange(8) % 2
    a = mosaic_sample(m, s, SamplerSpec("ddim", 20), labels, seed=3).x0
    b = dense_sample(model, s, SamplerSpec("ddim", 20), labels, seed=3).x0
    assert torch.equal(a, b)


def test_stage_isolation(setup, hessians):
    model, _, s = setup
    base = prune(setup, hessians, StagePlan(dividers=(550, 94), horizon=1000))
    m = prune(setup, hessians, StagePlan(dividers=(550, 94), horizon=1000, sparsities=(0.5, 0, 0)))
    assert not params_equal(m.subnets[0], model)
    assert params_equal(m.subnets[1], model) and params_equal(m.subnets[2], model)
    # only steps dispatched to stage 1 see a different network
    ts = SamplerSpec("ddim", 20).timesteps(1000)
    x = torch.randn(2, 1, 8, 8)
    y = torch.tensor([0, 1])
    with torch.no_grad():
        for t in ts:
            tt = torch.full((2,), int(t))
            same = torch.equal(m.model_for(int(t))(x, tt, y), base.model_for(int(t))(x, tt, y))
            assert same == (t <= 550)


def test_dense_parent_untouched_by_pruning(setup, hessians):
    model = setup[0]
    before = copy.deepcopy(model.state_dict())
    prune(setup, hessians, preset_plan("dit-0.30"))
    assert all(torch.equal(v, before[k]) for k, v in model.state_dict().items())


def test_realized_groups_match_floor_counts(setup, hessians):
    plan = preset_plan("dit-0.30")
    m = prune(setup, hessians, plan)
    cfg = setup[0].cfg
    for net, s in zip(m.subnets, plan.sparsities):
        heads_kept, neurons_kept = cfg.n_heads - n_pruned_groups(s, 4), 256 - n_pruned_groups(s, 256)
        assert expected_groups(net, s) == (heads_kept, neurons_kept)
        for blk_kept, blk in zip(kept_groups(net), net.blocks):
            assert blk_kept == (heads_kept, neurons_kept)
            W = blk.attn.proj.weight.detach()
            zero_heads = sum(bool(torch.all(W[:, h * 16:(h + 1) * 16] == 0)) for h in range(4))
            assert zero_heads == 4 - heads_kept
            assert int((blk.mlp.fc2.weight.detach() == 0).all(dim=0).sum()) == 256 - neurons_kept


def test_parallel_stage_jobs_match_serial(setup, hessians):
    plan = preset_plan("dit-0.30")
    a = prune(setup, hessians, plan, workers=1)
    b = prune(setup, hessians, plan, workers=3)
    assert all(params_equal(x, y) for x, y in zip(a.subnets, b.subnets))


def test_fresh_capture_is_reproducible(setup):
    plan = StagePlan(dividers=(550, 94), horizon=1000, sparsities=(0.3, 0.0, 0.0))
    a = prune(setup, None, plan)
    b = prune(setup, None, plan)
    assert params_equal(a.subnets[0], b.subnets[0])


# --- sampling -----------------------------------------------------------------------

def test_dispatch_trace_follows_dividers(setup, hessians):
    plan = StagePlan(dividers=(550, 94), horizon=1000)
    m = prune(setup, hessians, plan)
    run = mosaic_sample(m, setup[2], SamplerSpec("ddim", 20), torch.tensor([0]), seed=0)
    expected = [(t, 0 if t > 550 else 1 if t > 94 else 2) for t in range(1000, 0, -50)]
    assert run.dispatch == expected


def test_single_network_mosaic_equals_that_network(setup, hessians):
    m = prune(setup, hessians, StagePlan(dividers=(550, 94), horizon=1000, sparsities=(0.5, 0, 0)))
    net = m.subnets[0]
    one = MosaicModel(setup[0], [net, net, net], m.plan)
    labels = torch.arange(4) % 2
    a = mosaic_sample(one, setup[2], SamplerSpec("ddim", 10), labels, seed=1).x0
    b = dense_sample(net, setup[2], SamplerSpec("ddim", 10), labels, seed=1).x0
    assert torch.equal(a, b)


def test_mosaic_save_load(setup, hessians, tmp_path):
    m = prune(setup, hessians, preset_plan("dit-0.30"))
    m.save(tmp_path / "mosaic", {"origin": "test"})
    back = MosaicModel.load(tmp_path / "mosaic")
    assert back.plan.to_text() == m.plan.to_text()  # lambda is nan for presets, so compare text
    assert all(params_equal(a, b) for a, b in zip(m.subnets, back.subnets))


# --- MACs ---------------------------------------------------------------------------

def test_dense_macs_match_hand_tally(setup):
    model = setup[0]
    assert forward_macs(model) == DENSE_FORWARD
    assert mac_count(model, 20, 1000) == 20 * DENSE_FORWARD
    assert mac_count(model, 20, 1000) == mac_count(model, 20, 1000)
    assert mac_count(model, 20, 1000, cfg=True) == 40 * DENSE_FORWARD


def test_uniform_mosaic_macs_match_hand_tally(setup, hessians):
    m = prune(setup, hessians, StagePlan(dividers=(900, 450), horizon=1000, sparsities=(0.3, 0.3, 0.3)))
    assert [forward_macs(n) for n in m.subnets] == [FORWARD_AT_30] * 3
    assert mac_count(m, 20) == 20 * FORWARD_AT_30 == 47_841_280


def test_preset_mosaic_macs_match_hand_tally(setup, hessians):
    m = prune(setup, hessians, preset_plan("dit-0.30"))
    assert [forward_macs(n) for n in m.subnets] == [FORWARD_AT_60, FORWARD_AT_04, FORWARD_AT_10]
    # 20 DDIM steps: 1000 and 950 in stage 1, 900..500 in stage 2, 450..50 in stage 3
    assert mac_count(m, 20) == 2 * FORWARD_AT_60 + 9 * FORWARD_AT_04 + 9 * FORWARD_AT_10 == 59_924_480


def test_half_heads_halve_projection_terms(setup, hessians):
    m = prune(setup, hessians, StagePlan(dividers=(900, 450), horizon=1000, sparsities=(0.5, 0, 0)))
    N, d, dh = 16, 64, 16
    attn_dense = N * d * 3 * 4 * dh + 2 * 4 * N * N * dh + N * 4 * dh * d
    mlp_saving = 2 * N * d * 128
    drop = forward_macs(m.subnets[1]) - forward_macs(m.subnets[0])
    assert drop == 4 * (attn_dense // 2 + mlp_saving)


def test_macs_monotone_in_each_stage(setup, hessians):
    base = (0.1, 0.1, 0.1)
    ref = mac_count(prune(setup, hessians, StagePlan(dividers=(900, 450), horizon=1000, sparsities=base)), 20)
    for i in range(3):
        prev = ref
        for s in (0.3, 0.5, 0.8):
            sp = list(base)
            sp[i] = s
            cur = mac_count(prune(setup, hessians, StagePlan(dividers=(900, 450), horizon=1000, sparsities=sp)), 20)
            assert cur <= prev
            prev = cur
        assert prev < ref


def test_realized_sparsity(setup, hessians):
    m = prune(setup, hessians, StagePlan(dividers=(900, 450), horizon=1000, sparsities=(0.5, 0, 0)))
    assert realized_sparsity(m.subnets[0]) == (0.5, 0.5)
    assert realized_sparsity(m.subnets[1]) == (0.0, 0.0)


# --- evaluation ---------------------------------------------------------------------

def test_self_comparison_has_zero_divergence(setup, hessians, tmp_path):
    model, _, s = setup
    m = prune(setup, hessians, StagePlan(dividers=(900, 450), horizon=1000))
    rep = evaluate(model, m, s, n_eval=8, seed=0, heldout=make_blob_dataset(32, 9))
    assert rep.divergence == 0.0
    assert rep.macs == rep.dense_macs == 20 * DENSE_FORWARD
    assert all(np.isfinite(rep.stage_losses))
    write_report_csv(tmp_path / "r.csv", [rep])
    header, row = (tmp_path / "r.csv").read_text().splitlines()
    assert header.startswith("variant,divergence,")
    assert row.startswith("mosaic,0.0,")


def test_pruned_mosaic_report(setup, hessians):
    model, _, s = setup
    m = prune(setup, hessians, preset_plan("dit-0.30"))
    rep = evaluate(model, m, s, n_eval=8, seed=0)
    assert rep.divergence > 0
    assert rep.macs == mac_count(m, 20) < rep.dense_macs
    assert len(rep.divergence_per_sample) == 8


def test_sign_test():
    better = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    wins, n, p = sign_test(better, better + 1)
    assert (wins, n) == (8, 8)
    assert p == pytest.approx(0.5 ** 8)
    wins, n, p = sign_test(better, better)
    assert n == 0 and p == 1.0
