"""Two-stage training and inference orchestration.

Stage 1 trains the feed-forward reconstructor (lift, aggregate, tri-plane,
render) on posed views. Stage 2 precomputes conditional rendering records
and trains the diffusion model on them. Inference is either a single
deterministic reconstruction or the progressive loop that alternates
reconstruction with diffusion sampling along an interpolated camera path.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from . import tensor as T
from .camera import CameraPose, interpolate_poses
from .checkpoint import load_tensors, save_tensors
from .config import Config
from .dataset import SceneRecord
from .diffusion import Denoiser, NoiseSchedule, ViewEncoder, ddim_sample, \
    diffusion_loss, linear_schedule
from .lifting import FeatureExtractor, ViewAggregator, aggregate_views, \
    extract_features, lift_view
from .losses import LossConfig, psnr, recon_loss
from .nn import Module
from .optim import Adam
from .renderer import FieldDecoder, RenderOutput, render
from .tensor import Tape, Tensor, as_tensor, no_grad
from .triplane import PlaneProjector, PlaneUpsampler, TriPlane, upsample_planes


class NonFiniteLossError(ArithmeticError):
    """Training aborted on a NaN/inf loss; diagnostics are on disk."""


# ---------------------------------------------------------------------------
# Model


class Reconstructor(Module):
    """Stage-1 model: posed images -> feature volume -> tri-plane -> field."""

    def __init__(self, cfg: Config, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        c = cfg.feature_channels
        self.extractor = FeatureExtractor(c_feat=c, c_mid=c, rng=rng)
        self.aggregator = ViewAggregator(c, cfg.volume_dim, rng=rng)
        self.projector = PlaneProjector(c)
        self.upsampler = PlaneUpsampler(c, cfg.upsample_factor, rng)
        self.decoder = FieldDecoder(in_channels=c, hidden=cfg.decoder_hidden,
                                    feature_channels=c, rng=rng)
        self.volume_dim = cfg.volume_dim
        self.triplane_resolution = cfg.triplane_resolution
        self.upsample_mode = cfg.upsample_mode
        self.render_samples = cfg.render_samples

    def reconstruct(self, views: list[tuple[object, CameraPose]]) -> TriPlane:
        """Lift and fuse the given (image, pose) views into a tri-plane."""
        if not views:
            raise ValueError("Reconstructor: need at least one input view")
        dims = (self.aggregator.channels, self.volume_dim,
                self.volume_dim, self.volume_dim)
        vols = []
        for image, pose in views:
            feats = extract_features(as_tensor(image), self.extractor)
            vols.append(lift_view(feats, pose, dims))
        volume = aggregate_views(vols, self.aggregator)
        tp = self.projector(volume.data)
        if self.triplane_resolution != self.volume_dim:
            tp = upsample_planes(tp, self.triplane_resolution,
                                 mode=self.upsample_mode, upsampler=self.upsampler)
        return tp

    def render_view(self, tp: TriPlane, pose: CameraPose,
                    seed: int | None = None) -> RenderOutput:
        return render(tp, self.decoder, pose, n_samples=self.render_samples,
                      seed=seed)


def load_reconstructor(cfg: Config, checkpoint_path) -> Reconstructor:
    model = Reconstructor(cfg)
    model.load_state(load_tensors(checkpoint_path))
    return model


# ---------------------------------------------------------------------------
# Training samples and the inference buffer


@dataclasses.dataclass
class TrainSample:
    """1-3 posed input views plus one posed target view."""

    input_views: list[tuple[np.ndarray, CameraPose]]
    target_view: tuple[np.ndarray, CameraPose]

    def __post_init__(self):
        if not 1 <= len(self.input_views) <= 3:
            raise ValueError(
                f"TrainSample: need 1-3 input views, got {len(self.input_views)}")


class SceneBuffer:
    """Append-only store of posed views: the inputs, then generated ones."""

    def __init__(self, input_views: list[tuple[object, CameraPose]]):
        if not input_views:
            raise ValueError("SceneBuffer: need at least one input view")
        self._entries = list(input_views)
        self._provenance = ["input"] * len(input_views)

    def append_generated(self, image, pose: CameraPose) -> None:
        self._entries.append((image, pose))
        self._provenance.append("generated")

    def views(self) -> list[tuple[object, CameraPose]]:
        return list(self._entries)

    @property
    def provenance(self) -> list[str]:
        return list(self._provenance)

    def __len__(self) -> int:
        return len(self._entries)


def sample_train_example(scene: SceneRecord, rng: np.random.Generator,
                         strategy: str = "uniform") -> TrainSample:
    """Draw 1-3 input views uniformly, then a target view per strategy.

    "uniform" draws the target uniformly over all views; "anchored" uses the
    first input view with probability 0.8, else a uniform draw.
    """
    v = scene.view_count
    n_in = int(rng.integers(1, min(3, v) + 1))
    idx = [int(i) for i in rng.choice(v, size=n_in, replace=False)]
    if strategy == "anchored" and rng.random() < 0.8:
        t_idx = idx[0]
    else:
        t_idx = int(rng.integers(0, v))
    inputs = [(scene.images[i], scene.poses[i]) for i in idx]
    return TrainSample(inputs, (scene.images[t_idx], scene.poses[t_idx]))


# ---------------------------------------------------------------------------
# Run-directory plumbing


def _run_paths(run_dir) -> dict[str, str]:
    run_dir = str(run_dir)
    paths = {
        "checkpoints": os.path.join(run_dir, "checkpoints"),
        "logs": os.path.join(run_dir, "logs"),
        "renders": os.path.join(run_dir, "renders"),
    }
    for p in paths.values():
        os.makedirs(p, exist_ok=True)
    return paths


class _LossLog:
    def __init__(self, path):
        self._fh = open(path, "w")
        self._fh.write("step\tloss\tpsnr\n")

    def row(self, step: int, loss: float, psnr_db: float) -> None:
        self._fh.write(f"{step}\t{loss:.8f}\t{psnr_db:.4f}\n")

    def close(self) -> None:
        self._fh.close()


def _pose_arrays(prefix: str, pose: CameraPose) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.rotation": pose.rotation,
        f"{prefix}.translation": pose.translation,
        f"{prefix}.intrinsics": np.array([pose.fx, pose.fy, pose.cx, pose.cy,
                                          float(pose.width), float(pose.height)]),
    }


def _dump_batch(path, step: int, sample: TrainSample) -> None:
    arrays: dict[str, object] = {"step": np.array(float(step))}
    arrays["target.image"] = np.asarray(sample.target_view[0])
    arrays.update(_pose_arrays("target", sample.target_view[1]))
    for i, (img, pose) in enumerate(sample.input_views):
        arrays[f"input{i}.image"] = np.asarray(img)
        arrays.update(_pose_arrays(f"input{i}", pose))
    save_tensors(path, arrays)


# ---------------------------------------------------------------------------
# Stage-1 training


def _validate_recon(model: Reconstructor, scenes: list[SceneRecord]) -> float:
    """Mean PSNR rendering each scene's last view from its first two views."""
    scores = []
    with no_grad():
        for scene in scenes:
            n_in = min(2, scene.view_count - 1) or 1
            views = [(scene.images[i], scene.poses[i]) for i in range(n_in)]
            tp = model.reconstruct(views)
            out = model.render_view(tp, scene.poses[-1])
            scores.append(psnr(out.image, scene.images[-1]))
    return float(np.mean(scores))


def train_reconstructor(scenes: list[SceneRecord], cfg: Config, run_dir,
                        val_scenes: list[SceneRecord] | None = None) -> str:
    """Optimize the reconstructor; returns the checkpoint path.

    Samples a 1-3 view TrainSample per step, renders the target pose, and
    steps recon_loss with Adam. Validation PSNR is checked every
    cfg.val_interval steps and training stops early after cfg.patience
    checks without improvement. A non-finite loss aborts after dumping the
    offending batch next to the logs.
    """
    if not scenes:
        raise ValueError("train_reconstructor: dataset is empty")
    paths = _run_paths(run_dir)
    model = Reconstructor(cfg)
    opt = Adam(model.params(), lr=cfg.recon_lr)
    rng = np.random.default_rng([cfg.seed, 1])
    loss_cfg = LossConfig(lambda_perc=cfg.loss_lambda)
    log = _LossLog(os.path.join(paths["logs"], "loss.tsv"))
    best_val = -np.inf
    stall = 0
    try:
        for step in range(1, cfg.recon_steps + 1):
            scene = scenes[int(rng.integers(len(scenes)))]
            sample = sample_train_example(scene, rng, cfg.target_strategy)
            with Tape() as tape:
                tp = model.reconstruct(sample.input_views)
                out = model.render_view(tp, sample.target_view[1], seed=step)
                loss = recon_loss(out.image, Tensor(sample.target_view[0]), loss_cfg)
                value = float(loss.data)
                if not np.isfinite(value):
                    dump = os.path.join(paths["logs"], "diagnostic_batch.ckpt")
                    _dump_batch(dump, step, sample)
                    raise NonFiniteLossError(
                        f"reconstructor loss {value} at step {step}; "
                        f"batch dumped to {dump}")
                opt.zero_grad()
                tape.backward(loss)
            opt.step()
            if step % 10 == 0 or step == 1:
                log.row(step, value, psnr(out.image, sample.target_view[0]))
            if val_scenes and cfg.val_interval > 0 and step % cfg.val_interval == 0:
                score = _validate_recon(model, val_scenes)
                if score > best_val:
                    best_val = score
                    stall = 0
                else:
                    stall += 1
                    if stall >= cfg.patience:
                        break
    finally:
        log.close()
    ckpt = os.path.join(paths["checkpoints"], "recon.ckpt")
    save_tensors(ckpt, model.state_arrays())
    return ckpt


# ---------------------------------------------------------------------------
# Stage-2 data and training


def precompute_conditions(scenes: list[SceneRecord], model: Reconstructor,
                          cfg: Config, out_path) -> str:
    """Render one conditional record per (scene, target view).

    Each record stores the ground-truth view, the feature map rendered at
    its pose from a single other input view, and that input view. Fully
    deterministic given the checkpoint and cfg.seed.
    """
    rng = np.random.default_rng([cfg.seed, 2])
    arrays: dict[str, object] = {}
    idx = 0
    with no_grad():
        for scene in scenes:
            for t_idx in range(scene.view_count):
                if scene.view_count > 1:
                    offset = 1 + int(rng.integers(scene.view_count - 1))
                    in_idx = (t_idx + offset) % scene.view_count
                else:
                    in_idx = t_idx
                tp = model.reconstruct([(scene.images[in_idx], scene.poses[in_idx])])
                out = model.render_view(tp, scene.poses[t_idx], seed=0)
                arrays[f"rec{idx:05d}.target"] = scene.images[t_idx]
                arrays[f"rec{idx:05d}.feature"] = out.feature.data
                arrays[f"rec{idx:05d}.input"] = scene.images[in_idx]
                idx += 1
    arrays["meta.count"] = np.array(float(idx))
    save_tensors(out_path, arrays)
    return str(out_path)


def load_conditions(path) -> list[dict[str, np.ndarray]]:
    arrays = load_tensors(path)
    count = int(arrays["meta.count"])
    records = []
    for i in range(count):
        records.append({
            "target": arrays[f"rec{i:05d}.target"],
            "feature": arrays[f"rec{i:05d}.feature"],
            "input": arrays[f"rec{i:05d}.input"],
        })
    return records


def _denoise_probe(denoiser: Denoiser, encoder: ViewEncoder,
                   record: dict[str, np.ndarray], schedule: NoiseSchedule,
                   eps: np.ndarray) -> float:
    """PSNR of the one-step clean-image estimate at the schedule midpoint."""
    t = max(1, schedule.steps // 2)
    a = schedule.signal_fraction(t)
    with no_grad():
        x_t = np.sqrt(a) * record["target"] + np.sqrt(1.0 - a) * eps
        emb = encoder(Tensor(record["input"]))
        e_hat = denoiser(Tensor(x_t), t, Tensor(record["feature"]), emb).data
    x0_hat = np.clip((x_t - np.sqrt(1.0 - a) * e_hat) / np.sqrt(a), 0.0, 1.0)
    return psnr(x0_hat, record["target"])


def train_diffusion(cond_path, cfg: Config, run_dir) -> str:
    """Optimize denoiser + view encoder on precomputed condition records."""
    records = load_conditions(cond_path)
    if not records:
        raise ValueError("train_diffusion: no condition records")
    paths = _run_paths(run_dir)
    init_rng = np.random.default_rng([cfg.seed, 3])
    denoiser = Denoiser(cond_channels=cfg.feature_channels,
                        embed_dim=cfg.embed_dim, base=cfg.denoiser_base,
                        t_dim=cfg.t_dim, rng=init_rng)
    encoder = ViewEncoder(cfg.embed_dim, rng=init_rng)
    params = {f"denoiser.{k}": v for k, v in denoiser.params().items()}
    params.update({f"encoder.{k}": v for k, v in encoder.params().items()})
    opt = Adam(params, lr=cfg.diff_lr)
    schedule = linear_schedule(cfg.diffusion_steps)
    rng = np.random.default_rng([cfg.seed, 4])
    probe_eps = np.random.default_rng([cfg.seed, 5]).standard_normal(
        records[0]["target"].shape)
    log = _LossLog(os.path.join(paths["logs"], "loss.tsv"))
    try:
        for step in range(1, cfg.diff_steps + 1):
            rec = records[int(rng.integers(len(records)))]
            with Tape() as tape:
                emb = encoder(Tensor(rec["input"]))
                loss = diffusion_loss(Tensor(rec["target"]), Tensor(rec["feature"]),
                                      emb, denoiser, schedule, rng, cfg.p_uncond)
                value = float(loss.data)
                if not np.isfinite(value):
                    dump = os.path.join(paths["logs"], "diagnostic_batch.ckpt")
                    save_tensors(dump, {"step": np.array(float(step)), **rec})
                    raise NonFiniteLossError(
                        f"diffusion loss {value} at step {step}; "
                        f"batch dumped to {dump}")
                opt.zero_grad()
                tape.backward(loss)
            opt.step()
            if step % 50 == 0 or step == 1:
                log.row(step, value,
                        _denoise_probe(denoiser, encoder, records[0], schedule,
                                       probe_eps))
    finally:
        log.close()
    ckpt = os.path.join(paths["checkpoints"], "diff.ckpt")
    arrays = {f"denoiser.{k}": v for k, v in denoiser.state_arrays().items()}
    arrays.update({f"encoder.{k}": v for k, v in encoder.state_arrays().items()})
    save_tensors(ckpt, arrays)
    return ckpt


def load_diffusion(cfg: Config, checkpoint_path) -> tuple[Denoiser, ViewEncoder]:
    arrays = load_tensors(checkpoint_path)
    denoiser = Denoiser(cond_channels=cfg.feature_channels,
                        embed_dim=cfg.embed_dim, base=cfg.denoiser_base,
                        t_dim=cfg.t_dim)
    encoder = ViewEncoder(cfg.embed_dim)
    denoiser.load_state({k[len("denoiser."):]: v for k, v in arrays.items()
                         if k.startswith("denoiser.")})
    encoder.load_state({k[len("encoder."):]: v for k, v in arrays.items()
                        if k.startswith("encoder.")})
    return denoiser, encoder


# ---------------------------------------------------------------------------
# Inference


@dataclasses.dataclass
class ProgressiveResult:
    final: RenderOutput
    intermediates: list[np.ndarray]
    buffer: SceneBuffer


def _reconstruct_render(model: Reconstructor, views, pose: CameraPose) -> RenderOutput:
    with no_grad():
        tp = model.reconstruct(views)
        return model.render_view(tp, pose, seed=None)


def infer_deterministic(input_views, target_pose: CameraPose,
                        model: Reconstructor) -> RenderOutput:
    """Single reconstructor pass at the target pose; no diffusion."""
    return _reconstruct_render(model, input_views, target_pose)


def infer_progressive(input_views, target_pose: CameraPose, n_iters: int,
                      model: Reconstructor, denoiser: Denoiser | None = None,
                      encoder: ViewEncoder | None = None,
                      schedule: NoiseSchedule | None = None,
                      cfg: Config | None = None, seed: int = 0,
                      sample_fn=None) -> ProgressiveResult:
    """Alternate reconstruction and diffusion sampling along a pose path.

    Interpolates n_iters poses between the first input pose and the target,
    and at each one renders a feature map from everything in the buffer,
    samples an image conditioned on it, and appends the sample to the
    buffer. The final image is a plain reconstruction from the full buffer,
    so n_iters=0 reduces exactly to infer_deterministic. ``sample_fn(out,
    pose, i) -> image`` overrides DDIM sampling (used by consistency tests).
    """
    cfg = Config() if cfg is None else cfg
    buffer = SceneBuffer(input_views)
    if sample_fn is None:
        if n_iters > 0 and (denoiser is None or encoder is None):
            raise ValueError("infer_progressive: need a diffusion checkpoint "
                             "(or a sample_fn) when n_iters > 0")
        schedule = linear_schedule(cfg.diffusion_steps) if schedule is None else schedule

        def sample_fn(out: RenderOutput, pose: CameraPose, i: int):
            with no_grad():
                emb = encoder(as_tensor(input_views[0][0]))
            return ddim_sample(out.feature, emb, denoiser, schedule,
                               n_steps=cfg.ddim_steps, guidance_w=cfg.guidance,
                               seed=seed * 1009 + i).data

    poses = interpolate_poses(input_views[0][1], target_pose, n_iters)
    intermediates = []
    for i, pose in enumerate(poses):
        out = _reconstruct_render(model, buffer.views(), pose)
        image = sample_fn(out, pose, i)
        image = np.asarray(getattr(image, "data", image), dtype=np.float64)
        intermediates.append(image)
        buffer.append_generated(image, pose)
    final = _reconstruct_render(model, buffer.views(), target_pose)
    return ProgressiveResult(final, intermediates, buffer)
