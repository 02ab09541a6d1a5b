"""Acceptance gate: one test per shipped guarantee, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v`. Criteria 5, 7, and 8 train
models and dominate the runtime (roughly an hour on one CPU core); everything
else finishes in seconds. Pilot-derived thresholds and sizings live in the
constants just below, each with the measurement that justifies it.
"""

import dataclasses
import logging
import math
import os
import time

import numpy as np
import pytest

from liftview import gradsuite
from liftview import tensor as T
from liftview.camera import azimuth_elevation_radius, look_at, orbit_pose, \
    pixel_to_ray, project
from liftview.cli import main as cli_main
from liftview.config import Config
from liftview.dataset import generate_dataset, load_dataset, orbit_intrinsics
from liftview.diffusion import Denoiser, ViewEncoder, ddim_sample, \
    diffusion_loss, linear_schedule
from liftview.losses import psnr
from liftview.optim import Adam
from liftview.oracles import compositing_error, ddim_inversion_error, \
    guidance_collapse_exact
from liftview.pipeline import infer_deterministic, infer_progressive, \
    load_conditions, load_reconstructor, precompute_conditions, \
    train_reconstructor
from liftview.renderer import composite
from liftview.tensor import Tensor


def report(criterion: int, ok: bool, detail: str) -> None:
    # Emitted through live logging (log_cli in pyproject.toml) so the line is
    # visible under a plain `pytest -v`, where stdout capture would hide it.
    logging.getLogger("acceptance").info(
        "criterion %d: %s %s", criterion, "PASS" if ok else "FAIL", detail)
    assert ok, f"criterion {criterion}: {detail}"


# Overfit floors (criterion 5). The pilot on this hardware measured
# ~29.7 dB held-in and ~26.2 dB held-out under the exact protocol below at
# the default config (1500 steps, ~250 ms/step), so these floors carry
# several dB of margin.
HELD_IN_DB = 25.0
HELD_OUT_DB = 18.0

# Criterion 7 arms run a slimmed model on the same overfit scene so that ten
# 3000-step runs stay affordable; sizes are pilot-derived.
TREND_MODEL = dict(feature_channels=8, volume_dim=16, decoder_hidden=32,
                   render_samples=16, val_interval=0)
RES_TREND_STEPS = 600


@pytest.fixture(scope="module")
def overfit_scene(tmp_path_factory):
    """The criterion-5 scene: 24 posed 32x32 views of synthetic scene 0."""
    root = tmp_path_factory.mktemp("overfit")
    manifest = generate_dataset(root, n_scenes=1, views_per_scene=24,
                                resolution=32, seed=0, gt_samples=128)
    return load_dataset(manifest)[0]


def _eval_views(scene, k: int = 6, n_targets: int = 3):
    """Azimuth-stratified input views plus held-in targets disjoint from them."""
    az = [azimuth_elevation_radius(p)[0] for p in scene.poses]
    order = list(np.argsort(az))
    n = len(order)
    ids = [order[int(round(j * n / k)) % n] for j in range(k)]
    targets = [t for t in order[::5] if t not in ids][:n_targets]
    return ids, targets


def _held_in_psnr(model, scene) -> float:
    ids, targets = _eval_views(scene)
    inputs = [(scene.images[i], scene.poses[i]) for i in ids]
    return float(np.mean([
        psnr(infer_deterministic(inputs, scene.poses[t], model).image.data,
             scene.images[t]) for t in targets]))


# ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.time()
    results = gradsuite.run_cases(gradsuite.primitive_cases(), tol=1e-4)
    results += gradsuite.run_cases(gradsuite.composite_cases())
    elapsed = time.time() - t0
    bad = [(n, s) for n, s, r in results if not r.passed]
    seeds = {n: len({s for m, s, _ in results if m == n}) for n, _, _ in results}
    ok = not bad and all(v >= 5 for v in seeds.values()) and elapsed < 300.0
    report(1, ok, f"{len(results)} checks over {len(seeds)} cases, "
                  f"5 seeds each, {elapsed:.1f}s (failures: {bad})")


def test_criterion_2_compositing_oracle():
    err = compositing_error(n_configs=100, seed=0)

    # opaque limit: a saturating first sample must produce exactly its color
    sigma = Tensor(np.array([[1e6, 3.0]]))
    rgb = Tensor(np.array([[[0.2, 0.5, 0.8], [0.9, 0.1, 0.4]]]))
    deltas = np.array([[1.0, 1.0]])
    color, _, wsum = composite(sigma, rgb, None, deltas, (0.0, 0.0, 0.0))
    opaque_ok = float(wsum.data[0]) == 1.0 and \
        np.array_equal(color.data[0], np.array([0.2, 0.5, 0.8]))

    # transparent limit: zero density must return exactly the background
    sigma0 = Tensor(np.zeros((1, 2)))
    color0, _, wsum0 = composite(sigma0, rgb, None, deltas, (0.3, 0.6, 0.9))
    transparent_ok = float(wsum0.data[0]) == 0.0 and \
        np.array_equal(color0.data[0], np.array([0.3, 0.6, 0.9]))

    ok = err < 1e-9 and opaque_ok and transparent_ok
    report(2, ok, f"oracle max err {err:.3e}, opaque exact {opaque_ok}, "
                  f"transparent exact {transparent_ok}")


def test_criterion_3_camera_round_trip():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        center = rng.uniform(-2.0, 2.0, 3)
        while np.linalg.norm(center) < 0.5:
            center = rng.uniform(-2.0, 2.0, 3)
        pose = look_at(center, fx=rng.uniform(80, 200), fy=rng.uniform(80, 200),
                       cx=63.5, cy=63.5, width=128, height=128)
        for _ in range(20):  # 50 poses x 20 = 1000 pixels
            u, v = rng.uniform(0, 127, 2)
            ray = pixel_to_ray(pose, u, v)
            t = rng.uniform(0.2, 5.0)
            uv = project(pose, ray.at(t))
            worst = max(worst, abs(uv[0] - u), abs(uv[1] - v))
    report(3, worst < 1e-9, f"max round-trip error {worst:.3e} "
                            "over 1000 pixels, 50 poses")


def test_criterion_4_ddim_inversion():
    err = ddim_inversion_error(n_pairs=20, seed=0)
    collapse = guidance_collapse_exact(seed=0)
    ok = err < 1e-9 and collapse
    report(4, ok, f"inversion max err {err:.3e} over 20 pairs, "
                  f"w=1 bitwise-equals conditional: {collapse}")


def test_criterion_5_overfit_reconstruction(overfit_scene, tmp_path):
    from liftview.scenes import generate_scene, render_ground_truth

    cfg = Config()
    t0 = time.time()
    ckpt = train_reconstructor([overfit_scene], cfg, tmp_path / "run")
    train_time = time.time() - t0
    model = load_reconstructor(cfg, ckpt)

    held_in = _held_in_psnr(model, overfit_scene)
    pose_out = orbit_pose(2.0, 0.25, 1.3, **orbit_intrinsics(32))
    gt_out = render_ground_truth(generate_scene(0), pose_out,
                                 n_samples=128, seed=0)
    ids, _ = _eval_views(overfit_scene)
    inputs = [(overfit_scene.images[i], overfit_scene.poses[i]) for i in ids]
    held_out = psnr(infer_deterministic(inputs, pose_out, model).image.data,
                    gt_out)

    ok = held_in > HELD_IN_DB and held_out > HELD_OUT_DB and train_time < 600.0
    report(5, ok, f"held-in {held_in:.2f} dB (floor {HELD_IN_DB}), "
                  f"held-out {held_out:.2f} dB (floor {HELD_OUT_DB}), "
                  f"{cfg.recon_steps} steps in {train_time:.0f}s")


def test_criterion_6_progressive_consistency(overfit_scene, tmp_path):
    cfg = dataclasses.replace(Config(), **TREND_MODEL, recon_steps=600)
    ckpt = train_reconstructor([overfit_scene], cfg, tmp_path / "run")
    model = load_reconstructor(cfg, ckpt)
    scene = overfit_scene
    ids, targets = _eval_views(scene)
    views = [(scene.images[i], scene.poses[i]) for i in ids]
    target_idx = targets[0]
    target_pose = scene.poses[target_idx]
    gt = scene.images[target_idx]

    det = infer_deterministic(views, target_pose, model)
    prog0 = infer_progressive(views, target_pose, 0, model)
    bit_exact = np.array_equal(det.image.data, prog0.final.image.data)

    growth_ok = True
    echo = lambda out, pose, i: out.image.data
    for n in (1, 2, 3):
        res = infer_progressive(views, target_pose, n, model, sample_fn=echo)
        growth_ok &= len(res.buffer) == len(views) + n
        growth_ok &= res.buffer.provenance == \
            ["input"] * len(views) + ["generated"] * n

    # PSNR comparison at the shipped default iteration count
    det_psnr = psnr(det.image.data, gt)
    echo_psnr = psnr(infer_progressive(views, target_pose, Config().n_iters,
                                       model, sample_fn=echo).final.image.data,
                     gt)
    gap = abs(det_psnr - echo_psnr)

    ok = bit_exact and growth_ok and gap < 0.5
    report(6, ok, f"0-iter bit-exact {bit_exact}, buffer growth {growth_ok}, "
                  f"echo-stub gap {gap:.3f} dB (det {det_psnr:.2f}, "
                  f"echo {echo_psnr:.2f})")


def _tail_mean_loss(run_dir, k=10) -> float:
    with open(os.path.join(run_dir, "logs", "loss.tsv")) as fh:
        rows = fh.read().splitlines()[1:]
    return float(np.mean([float(r.split("\t")[1]) for r in rows[-k:]]))


def test_criterion_7_ablation_trends(overfit_scene, tmp_path):
    scene = overfit_scene

    # (a) learned vs bicubic upsampling, training loss after 3000 steps;
    # both arms share the per-step sample draws, so the comparison is paired
    upsampler_wins = []
    for seed in range(5):
        tail = {}
        for mode in ("learned", "bicubic"):
            cfg = Config(**TREND_MODEL, seed=seed, recon_steps=3000,
                         upsample_factor=1, upsample_mode=mode)
            run = tmp_path / f"a_{mode}_{seed}"
            train_reconstructor([scene], cfg, run)
            tail[mode] = _tail_mean_loss(run)
        upsampler_wins.append(tail["learned"] <= tail["bicubic"])
        print(f"  7a seed {seed}: learned {tail['learned']:.6f} "
              f"bicubic {tail['bicubic']:.6f} -> {upsampler_wins[-1]}")

    # (b) tri-plane resolution 64 vs 16 at equal steps, held-in PSNR
    res_wins = []
    for seed in range(5):
        score = {}
        for factor, label in ((2, "res64"), (0, "res16")):
            cfg = Config(**TREND_MODEL, seed=seed, recon_steps=RES_TREND_STEPS,
                         upsample_factor=factor, upsample_mode="bicubic")
            run = tmp_path / f"b_{label}_{seed}"
            ckpt = train_reconstructor([scene], cfg, run)
            score[label] = _held_in_psnr(load_reconstructor(cfg, ckpt), scene)
        res_wins.append(score["res64"] >= score["res16"])
        print(f"  7b seed {seed}: res64 {score['res64']:.2f} dB "
              f"res16 {score['res16']:.2f} dB -> {res_wins[-1]}")

    ok = sum(upsampler_wins) >= 4 and sum(res_wins) >= 4
    report(7, ok, f"learned<=bicubic {sum(upsampler_wins)}/5, "
                  f"res64>=res16 {sum(res_wins)}/5")


def test_criterion_8_diffusion_trend(tmp_path):
    cfg = Config(seed=0, resolution=16, n_scenes=4, views_per_scene=6,
                 gt_samples=32, feature_channels=8, volume_dim=8,
                 upsample_factor=0, decoder_hidden=16, render_samples=8,
                 recon_steps=300, val_interval=0, embed_dim=8,
                 denoiser_base=8, t_dim=8, diffusion_steps=100, diff_lr=1e-3)
    manifest = generate_dataset(tmp_path / "data", n_scenes=cfg.n_scenes,
                                views_per_scene=cfg.views_per_scene,
                                resolution=cfg.resolution, seed=cfg.seed,
                                gt_samples=cfg.gt_samples)
    scenes = load_dataset(manifest)
    ckpt = train_reconstructor(scenes, cfg, tmp_path / "recon")
    model = load_reconstructor(cfg, ckpt)
    precompute_conditions(scenes, model, cfg, tmp_path / "cond.ckpt")
    records = load_conditions(tmp_path / "cond.ckpt")
    schedule = linear_schedule(cfg.diffusion_steps)

    hits = []
    last = None  # (denoiser, record) kept for the diversity check
    for seed in range(5):
        rng = np.random.default_rng([seed, 4])
        denoiser = Denoiser(cond_channels=cfg.feature_channels,
                            embed_dim=cfg.embed_dim, base=cfg.denoiser_base,
                            t_dim=cfg.t_dim, rng=np.random.default_rng([seed, 3]))
        encoder = ViewEncoder(cfg.embed_dim, rng=np.random.default_rng([seed, 3]))
        params = {f"d.{k}": v for k, v in denoiser.params().items()}
        params.update({f"e.{k}": v for k, v in encoder.params().items()})
        opt = Adam(params, lr=cfg.diff_lr)
        losses, hit, initial = [], None, None
        for step in range(1, 3001):
            rec = records[int(rng.integers(len(records)))]
            with T.Tape() as tape:
                emb = encoder(Tensor(rec["input"]))
                loss = diffusion_loss(Tensor(rec["target"]),
                                      Tensor(rec["feature"]), emb, denoiser,
                                      schedule, rng, cfg.p_uncond)
                opt.zero_grad()
                tape.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            if step == 100:
                initial = float(np.mean(losses))
            if step > 100 and float(np.mean(losses[-100:])) < 0.9 * initial:
                hit = step
                break
        hits.append(hit)
        print(f"  8 seed {seed}: initial MA {initial:.4f}, "
              f"0.9x reached at step {hit}")
        last = (denoiser, encoder, records[0])

    denoiser, encoder, rec = last
    with T.no_grad():
        emb = encoder(Tensor(rec["input"]))
    samples = [ddim_sample(Tensor(rec["feature"]), emb, denoiser, schedule,
                           n_steps=10, guidance_w=2.0, seed=s).data
               for s in (0, 1)]
    l2 = float(math.sqrt(np.sum((samples[0] - samples[1]) ** 2)))

    ok = sum(h is not None for h in hits) >= 4 and l2 > 0.0
    report(8, ok, f"loss dropped below 0.9x initial MA for "
                  f"{sum(h is not None for h in hits)}/5 seeds "
                  f"(steps {hits}), seed-diversity L2 {l2:.4f}")


def test_criterion_9_cli_determinism(tmp_path):
    tiny = (
        "resolution = 16\nn_scenes = 2\nviews_per_scene = 4\ngt_samples = 4\n"
        "feature_channels = 8\nvolume_dim = 8\nupsample_factor = 0\n"
        "decoder_hidden = 16\nrender_samples = 8\nrecon_steps = 8\n"
        "val_interval = 0\nembed_dim = 4\ndenoiser_base = 4\nt_dim = 4\n"
        "diffusion_steps = 20\ndiff_steps = 4\nddim_steps = 2\nn_iters = 1\n"
    )
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(tiny)

    def tree(root):
        return {str(p.relative_to(root)): p.read_bytes()
                for p in sorted(root.rglob("*")) if p.is_file()}

    def run_twice(label, argv_fn):
        outs = []
        for rep in ("x", "y"):
            out = tmp_path / label / rep
            code = cli_main(argv_fn(str(out)))
            assert code == 0, f"{label} exited {code}"
            outs.append(tree(out))
        same = outs[0].keys() == outs[1].keys() and \
            all(outs[0][k] == outs[1][k] for k in outs[0])
        print(f"  9 {label}: byte-identical {same}")
        return same

    c = ["--config", str(cfg_path)]
    results = {}
    results["gen-data"] = run_twice(
        "gen-data", lambda o: ["gen-data", *c, "--out", o])
    data = [*c, "--data", str(tmp_path / "gen-data" / "x" / "manifest.txt")]
    results["train-recon"] = run_twice(
        "train-recon", lambda o: ["train-recon", *data, "--out", o])
    recon = str(tmp_path / "train-recon" / "x" / "checkpoints" / "recon.ckpt")
    results["precompute-cond"] = run_twice(
        "precompute-cond",
        lambda o: ["precompute-cond", *data, "--recon", recon, "--out", o])
    cond = str(tmp_path / "precompute-cond" / "x" / "conditions.ckpt")
    results["train-diff"] = run_twice(
        "train-diff", lambda o: ["train-diff", *c, "--cond", cond, "--out", o])
    diff = str(tmp_path / "train-diff" / "x" / "checkpoints" / "diff.ckpt")
    results["infer-det"] = run_twice(
        "infer-det",
        lambda o: ["infer", *data, "--recon", recon, "--mode", "det",
                   "--inputs", "0,1", "--out", o])
    results["infer-prog"] = run_twice(
        "infer-prog",
        lambda o: ["infer", *data, "--recon", recon, "--diff", diff,
                   "--mode", "prog", "--iters", "1", "--out", o])
    results["eval"] = run_twice(
        "eval", lambda o: ["eval", *data, "--recon", recon,
                           "--split", "train", "--out", o])
    results["grad-check"] = run_twice(
        "grad-check", lambda o: ["grad-check", "--out", o])
    results["oracle-check"] = run_twice(
        "oracle-check", lambda o: ["oracle-check", "--out", o])

    bad = [k for k, v in results.items() if not v]
    report(9, not bad, f"{len(results)} subcommands rerun byte-identical "
                       f"(failures: {bad})")
