"""Behaviour of the pretrained reference backbone (see ``reference.py``)."""

import numpy as np
import torch

from crossview.costvol import CostOptions, build_cost, extract, match_batch, zero_shot_match
from crossview.datagen import NO_JITTER, frame_corners, homography_from_corners, make_pair, render_pair
from crossview.datagen import generate_base_image
from crossview.evalcli import aepe, visualize
from crossview.flowhead import FinetuneConfig, finetune_mode, predict_head
from crossview.pretrain import load_checkpoint, save_checkpoint, to_tensor

from reference import head_training_pairs, reference_head


def _translation_pair(seed, tx, ty):
    rng = np.random.default_rng(seed)
    base = generate_base_image(rng, "procedural", 64)
    src = frame_corners((64, 64))
    H = homography_from_corners(src, src + np.array([tx, ty]))
    return render_pair(base, H, NO_JITTER, rng, pair_id=f"translate-{seed}", tier=1)


def test_identity_pair_flow_below_one_pixel(reference):
    model, _ = reference
    mags = []
    for i in range(10):
        img = make_pair(55, i).source
        f = zero_shot_match(model, img, img)
        mags.append(float(np.hypot(f.u, f.v).mean()))
    assert np.mean(mags) < 1.0, mags


def test_translation_median_within_one_token(reference):
    model, _ = reference
    p_size = model.config.patch_size
    for seed, (tx, ty) in enumerate([(5, 0), (-6, 3), (4, -7)]):
        p = _translation_pair(seed, tx, ty)
        f = zero_shot_match(model, p.source, p.target)
        v = p.gt_flow.valid
        assert abs(np.median(f.u[v]) - np.median(p.gt_flow.u[v])) < p_size
        assert abs(np.median(f.v[v]) - np.median(p.gt_flow.v[v])) < p_size


def test_encoder_self_match(reference):
    model, _ = reference
    imgs = to_tensor([make_pair(66, i).source for i in range(20)])
    with torch.no_grad():
        ex = extract(model, imgs, imgs)
    cost = build_cost(ex, CostOptions(source_kind="encoder_corr", normalize="l2", reciprocity=False))
    hits = (cost.scores.argmax(-1) == torch.arange(cost.scores.shape[-1])).float().mean()
    assert float(hits) >= 0.99


def test_visualize_identity_argmax_near_query(tmp_path, reference):
    model, _ = reference
    img = make_pair(77, 0).source
    ckpt = tmp_path / "ref.ckpt"
    save_checkpoint(model, ckpt)
    from PIL import Image
    qx, qy = 27.0, 36.0
    visualize(ckpt, img, img, (qx, qy), tmp_path, sources=("cross_attention",))
    im = np.asarray(Image.open(tmp_path / "attn_cross_attention.png")).astype(int)
    red = (im[..., 0] == 255) & (im[..., 1] == 0) & (im[..., 2] == 0)
    ys, xs = np.nonzero(red)
    assert len(xs) and abs(xs.mean() - qx) <= 8 and abs(ys.mean() - qy) <= 8


def test_trained_head_beats_zero_shot_on_tier3(reference):
    model, _ = reference
    head, _ = reference_head(model)
    pairs = [make_pair(31, i, tier=3) for i in range(40)]
    src, tgt = to_tensor([p.source for p in pairs]), to_tensor([p.target for p in pairs])
    f_head = predict_head(model, head, src, tgt)
    f_zero = match_batch(model, src, tgt)
    h = np.mean([aepe(f_head[k], p.gt_flow) for k, p in enumerate(pairs)])
    z = np.mean([aepe(f_zero[k], p.gt_flow) for k, p in enumerate(pairs)])
    assert h < z, (h, z)


def test_finetune_loss_decreases(tmp_path, reference):
    model, _ = reference
    save_checkpoint(model, tmp_path / "copy.ckpt")
    copy = load_checkpoint(tmp_path / "copy.ckpt")
    hist = finetune_mode(copy, head_training_pairs()[:64], FinetuneConfig(steps=40))
    losses = [h["loss"] for h in hist]
    assert np.mean(losses[-10:]) < np.mean(losses[:10]), losses
