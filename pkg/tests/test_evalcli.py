import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from crossview.costvol import SOURCE_KINDS
from crossview.datagen import FlowField, generate_dataset, make_pair, save_image
from crossview.errors import MetricError, RangeError
from crossview.evalcli import (OUT_DIR_ENV, REPORT_HEADER, aepe, cli_main, compare_sources, evaluate_pairs,
                               flow_to_color, random_uniform_flow, visualize)
from crossview.costvol import CostOptions
from crossview.flo import read_flo
from crossview.pretrain import save_checkpoint


def brute_force_aepe(pred, gt, valid):
    total, count = 0.0, 0
    for y in range(pred.shape[0]):
        for x in range(pred.shape[1]):
            if valid[y, x]:
                du = float(pred[y, x, 0]) - float(gt[y, x, 0])
                dv = float(pred[y, x, 1]) - float(gt[y, x, 1])
                total += (du * du + dv * dv) ** 0.5
                count += 1
    return total / count


# -- metric ----------------------------------------------------------------------

def test_aepe_examples():
    gt = np.random.default_rng(0).normal(size=(8, 8, 2))
    assert aepe(gt, gt) == 0.0
    assert aepe(gt + np.array([3.0, 4.0]), gt) == pytest.approx(5.0)


def test_aepe_errors():
    with pytest.raises(MetricError):
        aepe(np.zeros((4, 4, 2)), np.zeros((4, 4, 2)), np.zeros((4, 4), bool))
    with pytest.raises(MetricError):
        aepe(np.zeros((4, 4, 2)), np.zeros((5, 5, 2)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_aepe_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(0, 5, (8, 8, 2)), rng.normal(0, 5, (8, 8, 2))
    valid = rng.random((8, 8)) < 0.7
    valid[0, 0] = True
    assert abs(aepe(pred, gt, valid) - brute_force_aepe(pred, gt, valid)) < 1e-6


def test_aepe_accepts_flowfield_and_chw():
    gt = make_pair(0, 0, 16, tier=3).gt_flow
    chw = np.zeros((2, 16, 16))
    expected = brute_force_aepe(np.zeros((16, 16, 2)), gt.stack(), gt.valid)
    assert aepe(chw, gt) == pytest.approx(expected, abs=1e-9)


def test_random_uniform_flow_lands_in_frame():
    f = random_uniform_flow((16, 20), np.random.default_rng(0))
    ys, xs = np.mgrid[0:16, 0:20]
    assert ((xs + f[..., 0]) >= 0).all() and ((xs + f[..., 0]) <= 19).all()
    assert ((ys + f[..., 1]) >= 0).all() and ((ys + f[..., 1]) <= 15).all()


# -- reports ---------------------------------------------------------------------

def test_identity_pair_near_noise_floor(small_model):
    p = make_pair(0, 0, 32, tier=1)
    zero = np.zeros((32, 32))
    ident = type(p)(p.source, p.source.copy(), FlowField(zero, zero.copy(), np.ones((32, 32), bool)),
                    p.homography, "identity", 1)
    rep = compare_sources(small_model, [ident])
    # an untrained backbone still self-matches through identical inputs for the feature correlations
    for s in ("encoder_corr", "decoder_corr"):
        assert rep.mean_aepe(s) < 1.0


def test_report_shape_and_determinism(small_model):
    pairs = [make_pair(9, i, 32, tier=1 + i % 5) for i in range(10)]
    a = compare_sources(small_model, pairs, include_random=True)
    b = compare_sources(small_model, pairs, include_random=True)
    assert a.to_csv(timing=False) == b.to_csv(timing=False)
    lines = a.to_csv(timing=False).splitlines()
    assert lines[0] == ",".join(REPORT_HEADER)
    assert len(lines) == 1 + 4 * 5
    assert all(r["n_pairs"] == 2 and r["aepe_mean"] >= 0 for r in a.rows)


def test_report_formats_six_significant_digits(small_model):
    rep = evaluate_pairs(small_model, [make_pair(0, 0, 32, tier=2)], {"cross_attention": CostOptions()})
    rep.rows[0]["aepe_mean"] = 1.23456789
    assert ",1.23457," in rep.to_csv()


# -- visualisation ----------------------------------------------------------------

def test_visualize_outputs(tmp_path, small_model):
    p = make_pair(0, 0, 40, tier=2)
    files = visualize(small_model, p.source, p.target, (10, 12), tmp_path)
    for kind in SOURCE_KINDS:
        assert files[f"attn_{kind}"].exists()
    for name in ("query", "flow", "warped"):
        assert Image.open(files[name]).size == (40, 40)
    assert Image.open(files["side_by_side"]).size == (80, 40)


def test_visualize_query_out_of_frame(tmp_path, small_model):
    p = make_pair(0, 0, 32)
    with pytest.raises(RangeError):
        visualize(small_model, p.source, p.target, (32, 5), tmp_path)


def test_flow_colour_wheel():
    assert (flow_to_color(np.zeros((4, 4, 2))) == 255).all()
    right = flow_to_color(np.tile([1.0, 0.0], (2, 2, 1)))
    left = flow_to_color(np.tile([-1.0, 0.0], (2, 2, 1)))
    assert not np.array_equal(right, left)


# -- CLI -------------------------------------------------------------------------

@pytest.fixture
def ckpt(tmp_path, small_model):
    path = tmp_path / "small.ckpt"
    save_checkpoint(small_model, path)
    return path


@pytest.fixture
def manifest(tmp_path):
    return generate_dataset(tmp_path / "data", 10, seed=3, size=32)


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_cli_match_writes_flo(tmp_path, ckpt):
    p = make_pair(0, 0, 32, tier=2)
    save_image(tmp_path / "a.png", p.source)
    save_image(tmp_path / "b.png", p.target)
    rc = cli_main(["match", "--source", str(tmp_path / "a.png"), "--target", str(tmp_path / "b.png"),
                   "--ckpt", str(ckpt), "--out", str(tmp_path / "f.flo"), "--png", str(tmp_path / "f.png")])
    assert rc == 0
    u, v = read_flo(tmp_path / "f.flo")
    assert u.shape == (32, 32) and np.isfinite(u).all() and np.isfinite(v).all()
    assert (tmp_path / "f.png").exists()


def test_cli_eval_report(tmp_path, ckpt, manifest, capsys):
    out = tmp_path / "r.csv"
    assert cli_main(["eval", "--manifest", str(manifest), "--ckpt", str(ckpt), "--sources", "all",
                     "--out", str(out), "--no-timing"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "source_kind,tier,n_pairs,aepe_mean,epe_median,wall_ms"
    assert len(lines) == 1 + 3 * 5
    first = out.read_bytes()
    assert cli_main(["eval", "--manifest", str(manifest), "--ckpt", str(ckpt), "--out", str(out),
                     "--no-timing"]) == 0
    assert out.read_bytes() == first


def test_cli_ablation_report(tmp_path, ckpt, manifest):
    out = tmp_path / "abl.csv"
    assert cli_main(["eval", "--ablation", "--manifest", str(manifest), "--ckpt", str(ckpt),
                     "--out", str(out)]) == 0
    kinds = {line.split(",")[0] for line in out.read_text().splitlines()[1:]}
    assert kinds == {"I", "II", "III", "IV", "V", "VI", "VII"}


def test_cli_missing_checkpoint(tmp_path, manifest, capsys):
    rc = cli_main(["eval", "--manifest", str(manifest), "--ckpt", str(tmp_path / "nope.ckpt"),
                   "--out", str(tmp_path / "r.csv")])
    assert rc == 1 and _err(capsys)["error"] == "checkpoint error"


def test_cli_missing_manifest(tmp_path, ckpt, capsys):
    rc = cli_main(["eval", "--manifest", str(tmp_path / "none.csv"), "--ckpt", str(ckpt),
                   "--out", str(tmp_path / "r.csv")])
    assert rc == 1 and _err(capsys)["error"] == "ingestion error"


@pytest.mark.parametrize("argv", [["frobnicate"], ["match", "--bogus"], []])
def test_cli_usage_errors(argv, capsys):
    assert cli_main(argv) == 2
    assert _err(capsys)["error"] == "usage error"


def test_cli_gen_data_and_out_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path))
    assert cli_main(["gen-data", "--out", "gen", "--n-pairs", "5", "--size", "24"]) == 0
    assert (tmp_path / "gen").is_dir() and any((tmp_path / "gen").iterdir())


def test_cli_pretrain_with_config_file(tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("steps=2\nbatch_size=2\n")
    out = tmp_path / "p.ckpt"
    assert cli_main(["pretrain", "--config", str(cfg), "--out", str(out), "--metrics",
                     str(tmp_path / "m.csv")]) == 0
    assert out.exists()
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 3
    # resume continues from step 2 to step 3
    out2 = tmp_path / "p2.ckpt"
    assert cli_main(["pretrain", "--resume", str(out), "--steps", "3", "--out", str(out2)]) == 0


def test_cli_config_unknown_key(tmp_path, ckpt, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("frobnicate=1\n")
    assert cli_main(["match", "--config", str(cfg), "--source", "a", "--target", "b", "--ckpt", str(ckpt),
                     "--out", "f.flo"]) == 2


def test_cli_flag_overrides_config(tmp_path, ckpt, manifest):
    cfg = tmp_path / "eval.cfg"
    cfg.write_text("sources=encoder_corr\n")
    out = tmp_path / "r.csv"
    assert cli_main(["eval", "--config", str(cfg), "--manifest", str(manifest), "--ckpt", str(ckpt),
                     "--out", str(out)]) == 0
    assert {l.split(",")[0] for l in out.read_text().splitlines()[1:]} == {"encoder_corr"}
    assert cli_main(["eval", "--config", str(cfg), "--sources", "decoder_corr", "--manifest", str(manifest),
                     "--ckpt", str(ckpt), "--out", str(out)]) == 0
    assert {l.split(",")[0] for l in out.read_text().splitlines()[1:]} == {"decoder_corr"}


def test_cli_train_flow_finetune_and_match_with_head(tmp_path, ckpt, manifest):
    cfg = tmp_path / "head.cfg"
    cfg.write_text("compressed_dim=16\nhidden_dim=8\nn_heads=2\nwindow_size=2\nguide_layers=1,0\n"
                   "n_agg_blocks=1\nbatch_size=4\n")
    head = tmp_path / "head.ckpt"
    assert cli_main(["train-flow", "--config", str(cfg), "--ckpt", str(ckpt), "--manifest", str(manifest),
                     "--stage1-epochs", "1", "--stage2-epochs", "1", "--out", str(head)]) == 0
    p = make_pair(0, 0, 32, tier=2)
    save_image(tmp_path / "a.png", p.source)
    save_image(tmp_path / "b.png", p.target)
    assert cli_main(["match", "--source", str(tmp_path / "a.png"), "--target", str(tmp_path / "b.png"),
                     "--ckpt", str(ckpt), "--head", str(head), "--out", str(tmp_path / "h.flo")]) == 0
    assert read_flo(tmp_path / "h.flo")[0].shape == (32, 32)
    assert cli_main(["finetune", "--ckpt", str(ckpt), "--manifest", str(manifest), "--steps", "1",
                     "--out", str(tmp_path / "ft.ckpt")]) == 0


def test_cli_visualize(tmp_path, ckpt):
    p = make_pair(0, 0, 32, tier=2)
    save_image(tmp_path / "a.png", p.source)
    save_image(tmp_path / "b.png", p.target)
    assert cli_main(["visualize", "--ckpt", str(ckpt), "--source", str(tmp_path / "a.png"), "--target",
                     str(tmp_path / "b.png"), "--query", "5,6", "--out", str(tmp_path / "viz")]) == 0
    assert (tmp_path / "viz" / "flow.png").exists()
