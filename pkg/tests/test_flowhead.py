import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crossview.costvol import CostOptions, CostVolume, fuse_reciprocal, match_batch, soft_argmax_coords
from crossview.datagen import make_pair
from crossview.errors import (CheckpointError, ConfigurationError, ContractError, DimensionError, MetricError)
from crossview.flowhead import (Compress, CostAggregator, FinetuneConfig, FlowHead, HeadConfig, UpsampleStage,
                                _check_frozen, _fingerprint, aggregate, cache_inputs, compress_decoder_feature,
                                differentiable_flow, finetune_mode, head_flow, load_head,
                                pairs_to_batch, predict_head, reciprocal_aggregate, regression_loss, save_head,
                                train_head, upsample_stage)

HEAD = HeadConfig(n_agg_blocks=1, compressed_dim=16, hidden_dim=8, n_heads=2, window_size=2, guide_layers=(1, 0),
                  guide_dim=4, stage1_epochs=1, stage2_epochs=1, batch_size=4)


def _randomize(module, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g) * scale)


def _inputs(model, n=2, seed=0):
    pairs = [make_pair(seed, i, 32, tier=2) for i in range(n)]
    return pairs, cache_inputs(model, pairs, HEAD)


# -- config -------------------------------------------------------------------

def test_config_invariants():
    with pytest.raises(ConfigurationError):
        HeadConfig(n_agg_blocks=0)
    with pytest.raises(ConfigurationError):
        HeadConfig(upsample_stages=3)
    with pytest.raises(ConfigurationError):
        Compress(16, 32)


def test_guide_layer_outside_encoder(small_config):
    with pytest.raises(ConfigurationError):
        FlowHead(small_config, HeadConfig(guide_layers=(3, 1)))


# -- compression -----------------------------------------------------------------

def test_compress_identity_init():
    x = torch.randn(2, 64, 128)
    assert torch.equal(compress_decoder_feature(x, Compress(128, 128)), x)


def test_compress_shape_and_zero_weights():
    m = Compress(32, 8)
    assert compress_decoder_feature(torch.randn(3, 5, 32), m).shape == (3, 5, 8)
    with torch.no_grad():
        m.proj.weight.zero_()
    assert not compress_decoder_feature(torch.randn(3, 5, 32), m).any()


# -- aggregation ------------------------------------------------------------------

def test_aggregate_identity_at_init():
    agg = CostAggregator(1, 16, HEAD)
    c = CostVolume(torch.randn(2, 16, 16), (4, 4))
    out = aggregate(c, torch.randn(2, 16, 16), agg)
    assert out.scores.shape == (2, 16, 16) and torch.equal(out.scores, c.scores)


def test_aggregate_window_must_divide_grid():
    agg = CostAggregator(1, 16, HeadConfig(window_size=4, compressed_dim=16, hidden_dim=8, n_heads=2))
    with pytest.raises(ConfigurationError):
        aggregate(CostVolume(torch.randn(1, 36, 36), (6, 6)), torch.randn(1, 36, 16), agg)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_aggregate_source_permutation_equivariant(seed):
    torch.manual_seed(seed)
    agg = CostAggregator(2, 16, HEAD).double()
    _randomize(agg, seed)
    costs = torch.randn(1, 2, 16, 16, dtype=torch.float64)
    feats = torch.randn(1, 16, 16, dtype=torch.float64)
    perm = torch.randperm(16)
    a = agg(costs, feats, (4, 4))[..., perm]
    b = agg(costs[..., perm], feats, (4, 4))
    assert torch.allclose(a, b, atol=1e-10)


def test_reciprocal_transpose_exchange_exact():
    agg = CostAggregator(2, 16, HEAD)
    _randomize(agg)
    a, b = torch.randn(1, 2, 16, 16), torch.randn(1, 2, 16, 16)
    fa, fb = torch.randn(1, 16, 16), torch.randn(1, 16, 16)
    x = reciprocal_aggregate(a, b, fa, fb, agg).scores
    y = reciprocal_aggregate(b, a, fb, fa, agg).scores
    assert torch.equal(x, y.transpose(-2, -1))


def test_reciprocal_identity_reduces_to_fuse():
    agg = CostAggregator(1, 16, HEAD)
    a, b = CostVolume(torch.randn(1, 16, 16), (4, 4)), CostVolume(torch.randn(1, 16, 16), (4, 4))
    out = reciprocal_aggregate(a, b, torch.randn(1, 16, 16), torch.randn(1, 16, 16), agg)
    assert torch.allclose(out.scores, fuse_reciprocal([a], [b]).scores, atol=1e-6)


def test_reciprocal_shape_mismatch():
    agg = CostAggregator(1, 16, HEAD)
    with pytest.raises(DimensionError):
        reciprocal_aggregate(torch.randn(1, 1, 16, 16), torch.randn(1, 1, 4, 4),
                             torch.randn(1, 16, 16), torch.randn(1, 16, 16), agg)


def test_reciprocal_gradient_reaches_both_directions():
    agg = CostAggregator(1, 16, HEAD)
    _randomize(agg)
    a = torch.randn(1, 1, 16, 16, requires_grad=True)
    b = torch.randn(1, 1, 16, 16, requires_grad=True)
    fa = torch.randn(1, 16, 16, requires_grad=True)
    fb = torch.randn(1, 16, 16, requires_grad=True)
    (reciprocal_aggregate(a, b, fa, fb, agg).scores ** 2).sum().backward()
    for t in (a, b, fa, fb):
        assert t.grad is not None and t.grad.abs().sum() > 0


# -- upsampling ----------------------------------------------------------------

def test_upsample_shapes():
    c = CostVolume(torch.randn(1, 64, 64), (8, 8))
    s1, s2 = UpsampleStage(32, 4), UpsampleStage(32, 4)
    guide = torch.randn(1, 64, 32)
    once = upsample_stage(c, guide, s1)
    assert once.scores.shape == (1, 256, 64) and once.grid_shape == (16, 16)
    twice = upsample_stage(once, guide, s2, guide_grid=(8, 8))
    assert twice.scores.shape == (1, 1024, 64) and twice.grid_shape == (32, 32)


def test_upsample_guide_mismatch():
    with pytest.raises(DimensionError):
        upsample_stage(CostVolume(torch.randn(1, 64, 64), (8, 8)), torch.randn(1, 9, 32), UpsampleStage(32, 4),
                       guide_grid=(3, 3))


def test_upsample_nearest_init_preserves_argmax():
    c = CostVolume(torch.randn(1, 64, 64), (8, 8))
    up = upsample_stage(c, torch.randn(1, 64, 32), UpsampleStage(32, 4))
    parent = soft_argmax_coords(c.scores, 0.05, (8, 8)).view(1, 8, 8, 2)
    child = soft_argmax_coords(up.scores, 0.05, (8, 8)).view(1, 16, 16, 2)
    for dy in (0, 1):
        for dx in (0, 1):
            assert torch.equal(child[:, dy::2, dx::2], parent)


def test_upsample_zero_column_stays_zero():
    stage = UpsampleStage(32, 4)
    _randomize(stage)
    s = torch.randn(1, 64, 64)
    for j in (0, 17, 63):
        z = s.clone()
        z[..., j] = 0
        up = upsample_stage(CostVolume(z, (8, 8)), torch.randn(1, 64, 32), stage)
        assert not up.scores[..., j].any()


# -- flow from the upsampled cost ------------------------------------------------

def _fine_cost(rows_to_token):
    """Fine 4x4 target grid over a 2x2 source grid; one-hot rows."""
    s = torch.full((1, 16, 4), -30.0)
    for r, j in enumerate(rows_to_token):
        s[0, r, j] = 30.0
    return CostVolume(s, (4, 4))


def test_head_flow_one_hot():
    # every fine row points at source token (row 0, col 1), whose centre is at x=1, y=0 token units
    f = head_flow(_fine_cost([1] * 16), 1e-3, (2, 2), patch_size=1)
    # fine cell (0,0) has centre (-0.25, -0.25) in coarse token units
    assert torch.allclose(f[0, :, 0, 0], torch.tensor([1.25, 0.25]))


def test_head_flow_uniform_rows_give_centroid():
    f = head_flow(CostVolume(torch.zeros(1, 16, 4), (4, 4)), 1e-3, (2, 2), patch_size=8)
    # the centroid (0.5, 0.5) coincides with fine cell (1,1)/(2,2) boundary; cell (1,1) centre is 0.25
    assert torch.allclose(f[0, :, 1, 1], torch.tensor([2.0, 2.0]))


def test_head_flow_two_peaks_midpoint():
    s = torch.zeros(1, 16, 4)
    s[0, 0, 0] = s[0, 0, 3] = 1.0
    f = head_flow(CostVolume(s, (4, 4)), 1e-4, (2, 2), patch_size=1)
    assert torch.allclose(f[0, :, 0, 0], torch.tensor([0.75, 0.75]), atol=1e-5)


# -- loss ----------------------------------------------------------------------

def test_regression_loss_examples():
    gt = torch.randn(1, 2, 4, 4)
    valid = torch.ones(1, 4, 4, dtype=torch.bool)
    assert float(regression_loss(gt, gt, valid)) == 0.0
    off = gt + torch.tensor([3.0, 4.0]).view(1, 2, 1, 1)
    assert float(regression_loss(off, gt, valid)) == pytest.approx(5.0)
    half = gt.clone()
    half[:, 0, :2] += 1.0
    assert float(regression_loss(half, gt, valid)) == pytest.approx(0.5)
    assert float(regression_loss(off, gt, valid, "l1")) == pytest.approx(7.0)


def test_regression_loss_errors():
    with pytest.raises(MetricError):
        regression_loss(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 2, dtype=torch.bool))
    with pytest.raises(DimensionError):
        regression_loss(torch.zeros(1, 2, 2, 2), torch.zeros(1, 2, 3, 3), torch.ones(1, 2, 2, dtype=torch.bool))


# -- full head ------------------------------------------------------------------

def test_untrained_head_equals_zero_shot(small_model, small_config):
    head = FlowHead(small_config, HEAD)
    for i in range(3):
        p = make_pair(5, i, 32, tier=3)
        a = predict_head(small_model, head, p.source, p.target, temperature=0.02)
        b = match_batch(small_model, p.source, p.target, CostOptions(temperature=0.02))
        assert float((a - b).norm(dim=1).mean()) < 1e-4


def test_head_gradcheck_random_subset(small_model, small_config):
    torch.manual_seed(0)
    head = FlowHead(small_config, HEAD)
    _randomize(head, 1, 0.1)
    head = head.double()
    pairs, inp = _inputs(small_model)
    inp = inp.to(torch.float64)
    _, _, gt, valid = pairs_to_batch(pairs, 32)
    gt = gt.double()

    def loss():
        return regression_loss(head(inp, temperature=0.5), gt, valid)

    params = [p for p in head.parameters()]
    g = torch.Generator().manual_seed(3)
    picks = []
    for _ in range(16):
        p = params[int(torch.randint(len(params), (1,), generator=g))]
        picks.append((p, int(torch.randint(p.numel(), (1,), generator=g))))
    head.zero_grad()
    loss().backward()
    h = 1e-6
    for p, i in picks:
        analytic = float(p.grad.view(-1)[i])
        with torch.no_grad():
            flat = p.view(-1)
            old = float(flat[i])
            flat[i] = old + h
            up = float(loss())
            flat[i] = old - h
            down = float(loss())
            flat[i] = old
        numeric = (up - down) / (2 * h)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), abs(analytic)) + 1e-7


def test_train_head_freezes_backbone(small_model, small_config):
    head = FlowHead(small_config, HEAD)
    before = _fingerprint(small_model)
    pairs = [make_pair(1, i, 32, tier=2) for i in range(4)]
    hist = train_head(small_model, head, pairs)
    assert len(hist) == 2 and all(np.isfinite(h["loss"]) for h in hist)
    for a, b in zip(before, small_model.parameters()):
        assert torch.equal(a, b)


def test_train_head_lr_zero_keeps_head(small_model, small_config):
    from dataclasses import replace
    cfg = replace(HEAD, stage1_lr=0.0, stage2_lr=0.0)
    head = FlowHead(small_config, cfg)
    before = _fingerprint(head)
    train_head(small_model, head, [make_pair(1, i, 32, tier=2) for i in range(4)])
    for a, b in zip(before, head.parameters()):
        assert torch.equal(a, b)


def test_drift_detected(small_model):
    before = _fingerprint(small_model)
    with torch.no_grad():
        next(small_model.parameters()).add_(1e-3)
    with pytest.raises(ContractError):
        _check_frozen(small_model, before)


def test_head_checkpoint_round_trip(tmp_path, small_model, small_config):
    head = FlowHead(small_config, HEAD)
    _randomize(head)
    save_head(head, tmp_path / "h.ckpt")
    loaded = load_head(tmp_path / "h.ckpt", small_config)
    p = make_pair(0, 0, 32)
    assert torch.equal(predict_head(small_model, head, p.source, p.target),
                       predict_head(small_model, loaded, p.source, p.target))


def test_load_head_rejects_backbone_checkpoint(tmp_path, small_model):
    from crossview.pretrain import save_checkpoint
    save_checkpoint(small_model, tmp_path / "b.ckpt")
    with pytest.raises(CheckpointError):
        load_head(tmp_path / "b.ckpt")


# -- end-to-end fine-tuning ---------------------------------------------------------

def test_finetune_step0_equals_zero_shot(small_model):
    p = make_pair(2, 0, 32, tier=3)
    src, tgt, _, _ = pairs_to_batch([p], 32)
    opts = CostOptions(temperature=0.02)
    a = differentiable_flow(small_model.eval(), src, tgt, opts, 0.02).detach()
    b = match_batch(small_model, src, tgt, opts)
    assert torch.equal(a, b)


def test_finetune_gradient_reaches_qk_not_reconstruction_head(small_model):
    pairs = [make_pair(2, i, 32, tier=3) for i in range(2)]
    src, tgt, gt, valid = pairs_to_batch(pairs, 32)
    for prm in small_model.parameters():
        prm.requires_grad_(True)
    loss = regression_loss(differentiable_flow(small_model, src, tgt, CostOptions(temperature=0.02), 0.02), gt, valid)
    loss.backward()
    blk = small_model.dec_blocks[0].cross_attn
    assert blk.q.weight.grad.abs().sum() > 0 and blk.k.weight.grad.abs().sum() > 0
    assert small_model.head.weight.grad is None or not small_model.head.weight.grad.any()


def test_finetune_runs_and_changes_weights(small_model):
    pairs = [make_pair(3, i, 32, tier=2) for i in range(4)]
    before = _fingerprint(small_model)
    hist = finetune_mode(small_model, pairs, FinetuneConfig(steps=2, batch_size=2, learning_rate=1e-3))
    assert len(hist) == 2 and all(np.isfinite(h["loss"]) for h in hist)
    assert any(not torch.equal(a, b) for a, b in zip(before, small_model.parameters()))
