"""Command-line interface: exit codes, artifacts, and rerun stability."""

import subprocess
import sys

import numpy as np
import pytest

from liftview.cli import main
from liftview.imageio import save_pfm

TINY = (
    "resolution = 16\n"
    "n_scenes = 2\n"
    "views_per_scene = 4\n"
    "gt_samples = 4\n"
    "feature_channels = 8\n"
    "volume_dim = 8\n"
    "upsample_factor = 0\n"
    "decoder_hidden = 16\n"
    "render_samples = 8\n"
    "recon_steps = 8\n"
    "val_interval = 0\n"
    "embed_dim = 4\n"
    "denoiser_base = 4\n"
    "t_dim = 4\n"
    "diffusion_steps = 20\n"
    "diff_steps = 4\n"
    "ddim_steps = 2\n"
    "n_iters = 1\n"
)


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny end-to-end run shared by the read-only CLI tests."""
    ws = tmp_path_factory.mktemp("cli")
    cfg = ws / "tiny.cfg"
    cfg.write_text(TINY)
    c = ["--config", str(cfg)]
    assert main(["gen-data", *c, "--out", str(ws / "data")]) == 0
    data = [*c, "--data", str(ws / "data" / "manifest.txt")]
    assert main(["train-recon", *data, "--out", str(ws / "recon")]) == 0
    recon = str(ws / "recon" / "checkpoints" / "recon.ckpt")
    assert main(["precompute-cond", *data, "--recon", recon,
                 "--out", str(ws / "cond")]) == 0
    assert main(["train-diff", *c, "--cond", str(ws / "cond" / "conditions.ckpt"),
                 "--out", str(ws / "diff")]) == 0
    return ws, cfg, recon


def test_gen_data_is_reproducible(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    for out in ("a", "b"):
        assert main(["gen-data", "--config", str(cfg),
                     "--out", str(tmp_path / out)]) == 0
    ta, tb = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert ta.keys() == tb.keys() and all(ta[k] == tb[k] for k in ta)


def test_run_dirs_snapshot_config(workspace):
    ws, _, _ = workspace
    for run in ("data", "recon", "cond", "diff"):
        snap = ws / run / "config.txt"
        assert snap.is_file()
        assert "resolution = 16" in snap.read_text()


def test_infer_det_rerun_is_byte_identical(workspace, tmp_path):
    ws, cfg, recon = workspace
    base = ["infer", "--config", str(cfg), "--data",
            str(ws / "data" / "manifest.txt"), "--recon", recon,
            "--inputs", "0,1", "--mode", "det"]
    for out in ("a", "b"):
        assert main([*base, "--out", str(tmp_path / out)]) == 0
    ta, tb = _tree_bytes(tmp_path / "a"), _tree_bytes(tmp_path / "b")
    assert ta.keys() == tb.keys() and all(ta[k] == tb[k] for k in ta)
    assert "renders/final.png" in ta and "renders/final.pfm" in ta


def test_infer_prog_writes_intermediates(workspace, tmp_path):
    ws, cfg, recon = workspace
    code = main(["infer", "--config", str(cfg), "--data",
                 str(ws / "data" / "manifest.txt"), "--recon", recon,
                 "--diff", str(ws / "diff" / "checkpoints" / "diff.ckpt"),
                 "--mode", "prog", "--iters", "2",
                 "--out", str(tmp_path / "p")])
    assert code == 0
    tree = _tree_bytes(tmp_path / "p")
    assert "renders/final.pfm" in tree
    assert "renders/intermediate_00.pfm" in tree
    assert "renders/intermediate_01.pfm" in tree


def test_infer_prog_zero_iters_matches_det(workspace, tmp_path):
    ws, cfg, recon = workspace
    base = ["infer", "--config", str(cfg), "--data",
            str(ws / "data" / "manifest.txt"), "--recon", recon]
    assert main([*base, "--mode", "det", "--out", str(tmp_path / "d")]) == 0
    assert main([*base, "--mode", "prog", "--iters", "0",
                 "--out", str(tmp_path / "p")]) == 0
    det = (tmp_path / "d" / "renders" / "final.pfm").read_bytes()
    prog = (tmp_path / "p" / "renders" / "final.pfm").read_bytes()
    assert det == prog


def test_eval_rerun_is_byte_identical(workspace, tmp_path):
    ws, cfg, recon = workspace
    base = ["eval", "--config", str(cfg), "--data",
            str(ws / "data" / "manifest.txt"), "--recon", recon,
            "--split", "train"]
    for out in ("a", "b"):
        assert main([*base, "--out", str(tmp_path / out)]) == 0
    ma = (tmp_path / "a" / "metrics.tsv").read_bytes()
    assert ma == (tmp_path / "b" / "metrics.tsv").read_bytes()
    lines = ma.decode().splitlines()
    assert all(len(row.split("\t")) == 3 for row in lines)
    assert lines[-1].startswith("mean\t")


def test_oracle_check(tmp_path):
    assert main(["oracle-check", "--out", str(tmp_path / "o")]) == 0
    report = (tmp_path / "o" / "oracle_check.txt").read_text()
    assert "pass" in report and "fail" not in report


def test_usage_errors_exit_one(tmp_path):
    assert main(["no-such-command"]) == 1
    assert main(["gen-data", "--bogus-flag"]) == 1
    assert main(["train-recon", "--out", str(tmp_path / "r")]) == 1  # no --data
    assert main(["gen-data", "--config", str(tmp_path / "missing.cfg"),
                 "--out", str(tmp_path / "d")]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("resolution = sixteen\n")
    assert main(["gen-data", "--config", str(bad),
                 "--out", str(tmp_path / "d2")]) == 1


def test_help_exits_zero():
    assert main(["--help"]) == 0
    assert main(["infer", "--help"]) == 0


def test_numerical_failure_exits_two(workspace, tmp_path):
    ws, cfg, _ = workspace
    assert main(["gen-data", "--config", str(cfg),
                 "--out", str(tmp_path / "data")]) == 0
    victim = next((tmp_path / "data" / "scenes").rglob("view_000.pfm"))
    poison = np.full((3, 16, 16), np.nan)
    save_pfm(victim, poison)
    code = main(["train-recon", "--config", str(cfg), "--data",
                 str(tmp_path / "data" / "manifest.txt"),
                 "--out", str(tmp_path / "run")])
    assert code == 2


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "liftview.cli", "--help"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert "gen-data" in out.stdout
