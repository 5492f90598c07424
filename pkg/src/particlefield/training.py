"""Online training over a frame sequence.

One step: rebuild the spatial index for the current particle positions,
refresh the occupancy grid, sample a ray batch uniformly over the current
frame's cameras and pixels, render, backpropagate the photometric loss, and
apply the three updates (Adam on the MLP, Adam on the particle features, a
physics step on the particle positions) as the ablation mode allows.

The loop is strictly online: while a frame is being fitted only that frame's
images are ever read. Runs are bitwise reproducible under a fixed seed, and
a checkpoint written mid-run resumes to the same bits, because every step
draws from a fresh counter-based stream keyed by (seed, global step) and the
occupancy grid is recomputed rather than carried.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field as dataclass_field, replace
from pathlib import Path

import numpy as np

from .cameras import Frame, FrameSequence, generate_rays, read_image
from .encoding import (
    ParticleCloud,
    clip_position_gradients,
    init_particles,
)
from .errors import (
    CorruptCheckpointError,
    IncompatibleCheckpointError,
    InvalidInputError,
    WriteError,
)
from .neighbors import build_index
from .network import (
    AdamState,
    FieldParams,
    adam_init,
    adam_step,
    init_field_params,
    step_field,
)
from .physics import PhysicsConfig, pbd_step
from .rendering import (
    RenderConfig,
    density_probe,
    image_metrics,
    make_occupancy_grid,
    render_rays,
    render_view,
    update_occupancy,
)

MODES = ("both", "features_only", "positions_only")


@dataclass
class TrainConfig:
    """Everything that shapes a run; serialized verbatim into checkpoints."""

    particles: int = 20000
    search_radius: float = 0.05
    feature_dim: int = 4
    steps_per_frame: int = 5
    warmup_steps: int = 500
    batch: int = 4096
    mode: str = "both"
    seed: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-10
    grad_clip: float = None  # None: clip position grads to the search radius
    loss_mode: str = "squared"
    n_samples: int = 128
    near: float = 0.05
    background: tuple = (1.0, 1.0, 1.0)
    grid_resolution: int = 32
    # Absolute density cutoff for the occupancy bits.  Deliberately far below
    # the renderer's standalone default: early training passes through a
    # near-transparent phase, and a high cutoff can cull every cell at once,
    # which kills the gradient signal for good.
    occupancy_threshold: float = 0.01
    physics: PhysicsConfig = dataclass_field(default_factory=PhysicsConfig)

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["background"] = list(self.background)
        d["physics"] = {
            "damping": self.physics.damping,
            "dt": self.physics.dt,
            "min_dist": self.physics.min_dist,
            "gradient_scale": self.physics.gradient_scale,
        }
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        if "physics" in d and not isinstance(d["physics"], PhysicsConfig):
            d["physics"] = PhysicsConfig(**d["physics"])
        if "background" in d:
            d["background"] = tuple(d["background"])
        unknown = set(d) - set(cls().__dict__)
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def check_train_config(cfg: TrainConfig) -> None:
    if cfg.mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {cfg.mode!r}")
    if cfg.steps_per_frame < 1 or cfg.batch < 1:
        raise InvalidInputError("steps_per_frame and batch must be >= 1")
    if cfg.warmup_steps < 0 or cfg.particles < 1:
        raise InvalidInputError("warmup_steps must be >= 0, particles >= 1")
    if cfg.occupancy_threshold < 0:
        raise InvalidInputError("occupancy_threshold must be >= 0")


@dataclass
class TrainState:
    config: TrainConfig
    cloud: ParticleCloud
    params: FieldParams
    mlp_opt: AdamState
    feat_opt: AdamState
    grid: object
    step: int = 0
    image_cache: dict = dataclass_field(default_factory=dict, repr=False)


def init_state(config: TrainConfig) -> TrainState:
    check_train_config(config)
    cloud = init_particles(
        config.particles,
        config.feature_dim,
        seed=config.seed,
        search_radius=config.search_radius,
    )
    params = init_field_params(config.feature_dim, seed=config.seed)
    mlp_opt = adam_init(
        params.arrays(), config.lr, config.beta1, config.beta2, config.eps
    )
    feat_opt = adam_init(
        [cloud.features], config.lr, config.beta1, config.beta2, config.eps
    )
    grid = make_occupancy_grid(config.grid_resolution, config.occupancy_threshold)
    return TrainState(config, cloud, params, mlp_opt, feat_opt, grid)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Counter-based stream for one step; resume-safe by construction."""
    return np.random.Generator(np.random.Philox(key=[seed, step]))


def _active_grid(state: TrainState):
    """The occupancy grid to sample against, or None while that is unsafe.

    The young field passes through a near-transparent phase where density
    sits below any useful threshold everywhere at once; culling against the
    grid then starves training of samples, and with no samples there are no
    gradients to ever lift density back over the threshold. So sampling is
    dense during warmup, and an all-empty grid is ignored outright so a
    transient collapse stays recoverable. The grid itself is still refreshed
    every step.
    """
    if state.step < state.config.warmup_steps:
        return None
    if not state.grid.occupied.any():
        return None
    return state.grid


def render_config(state: TrainState) -> RenderConfig:
    cfg = state.config
    return RenderConfig(
        n_samples=cfg.n_samples,
        near=cfg.near,
        background=cfg.background,
        grid=_active_grid(state),
        seed=cfg.seed,
    )


def _frame_images(state: TrainState, frame: Frame) -> np.ndarray:
    """Current frame's training images, stacked (cams, H, W, 3), cached."""
    cached = state.image_cache.get(frame.index)
    if cached is None:
        cached = np.stack([read_image(p) for p in frame.image_paths])
        state.image_cache = {frame.index: cached}  # only the live frame
    return cached


def _batch_rays(cameras, cam_idx, u, v, dtype):
    origins = np.empty((len(cam_idx), 3), dtype)
    dirs = np.empty((len(cam_idx), 3), dtype)
    for ci in np.unique(cam_idx):
        sel = np.nonzero(cam_idx == ci)[0]
        pixels = np.stack([u[sel] + 0.5, v[sel] + 0.5], axis=1)
        o, d = generate_rays(cameras[ci], pixels)
        origins[sel] = o
        dirs[sel] = d
    return origins, dirs


def refresh_occupancy(state: TrainState, index) -> None:
    dtype = state.cloud.positions.dtype

    def probe(points):
        return density_probe(
            state.cloud, index, state.params, points.astype(dtype)
        )

    update_occupancy(state.grid, probe)


def train_step(state: TrainState, frame: Frame, rng) -> float:
    """One optimization step on one frame. Returns the batch loss."""
    cfg = state.config
    cloud = state.cloud
    index = build_index(cloud.positions, cfg.search_radius)
    refresh_occupancy(state, index)

    images = _frame_images(state, frame)
    n_cams, height, width = images.shape[:3]
    cam_idx = rng.integers(0, n_cams, cfg.batch)
    pix = rng.integers(0, height * width, cfg.batch)
    v, u = np.divmod(pix, width)
    gt = images[cam_idx, v, u]
    dtype = cloud.positions.dtype
    origins, dirs = _batch_rays(frame.cameras, cam_idx, u, v, dtype)
    jitter = rng.random((cfg.batch, cfg.n_samples), np.float32).astype(dtype, copy=False)

    res = render_rays(
        cloud,
        index,
        state.params,
        origins,
        dirs,
        render_config(state),
        jitter=jitter,
        gt=gt,
        want_grads=True,
        loss_mode=cfg.loss_mode,
    )

    warmup = state.step < cfg.warmup_steps
    if cfg.mode != "positions_only" or warmup:
        step_field(state.params, state.mlp_opt, res.field_grads)
        adam_step(state.feat_opt, [cloud.features], [res.encoding_grads.d_features])
    if cfg.mode != "features_only":
        limit = cfg.grad_clip if cfg.grad_clip is not None else cfg.search_radius
        pos_grads = clip_position_gradients(res.encoding_grads.d_positions, limit)
        pbd_step(cloud, pos_grads, cfg.physics, index)
    state.step += 1
    return res.loss


def evaluate_frame(state: TrainState, eval_frame: Frame):
    """Render every held-out view of a frame; (view, psnr, ssim) rows."""
    index = build_index(state.cloud.positions, state.config.search_radius)
    refresh_occupancy(state, index)
    cfg = render_config(state)
    rows = []
    for view, (cam, path) in enumerate(
        zip(eval_frame.cameras, eval_frame.image_paths)
    ):
        img = render_view(state.cloud, index, state.params, cam, cfg)
        p, s = image_metrics(img, read_image(path))
        rows.append((view, p, s))
    return rows


@dataclass
class MetricsLog:
    """Loss per step and PSNR/SSIM per held-out view, in frame order."""

    losses: list = dataclass_field(default_factory=list)  # (frame, step, loss)
    evals: list = dataclass_field(default_factory=list)  # (frame, view, psnr, ssim)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "losses.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "step", "loss"])
            w.writerows(self.losses)
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "view", "psnr", "ssim"])
            w.writerows(self.evals)


def run_online_sequence(
    sequence: FrameSequence, config: TrainConfig, out_dir=None, state=None
) -> MetricsLog:
    """Warm up on frame 0, then fit each frame with a fixed step budget.

    Every frame ends with an evaluation pass over its held-out views. With
    `out_dir` set, metrics CSVs and a resumable checkpoint are written as the
    run progresses.
    """
    if state is None:
        state = init_state(config)
    log = MetricsLog()
    for frame in sequence.frames:
        steps = config.steps_per_frame
        if frame.index == 0:
            steps += config.warmup_steps
        for _ in range(steps):
            s = state.step
            loss = train_step(state, frame, step_rng(config.seed, s))
            log.losses.append((frame.index, s, loss))
        if sequence.eval_frames:
            for view, p, ssim_val in evaluate_frame(
                state, sequence.eval_frames[frame.index]
            ):
                log.evals.append((frame.index, view, p, ssim_val))
        if out_dir is not None:
            log.write(out_dir)
            save_checkpoint(state, Path(out_dir) / "checkpoint.bin")
    return log


# ---------------------------------------------------------------------------
# checkpointing

MAGIC = b"PNRF"
CHECKPOINT_VERSION = 1


def _state_arrays(state: TrainState):
    """(name, array) pairs in the fixed serialization order."""
    cloud, params = state.cloud, state.params
    pairs = [
        ("positions", cloud.positions),
        ("velocities", cloud.velocities),
        ("features", cloud.features),
    ]
    names = ["w1", "b1", "w2", "b2", "w3", "b3"]
    pairs += list(zip(names, params.arrays()))
    pairs += [(f"mlp_m_{n}", a) for n, a in zip(names, state.mlp_opt.m)]
    pairs += [(f"mlp_v_{n}", a) for n, a in zip(names, state.mlp_opt.v)]
    pairs += [
        ("feat_m", state.feat_opt.m[0]),
        ("feat_v", state.feat_opt.v[0]),
    ]
    return pairs


def save_checkpoint(state: TrainState, path) -> None:
    """Little-endian float32 arrays behind a JSON manifest; bit-exact."""
    pairs = _state_arrays(state)
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "mlp_t": state.mlp_opt.t,
        "feat_t": state.feat_opt.t,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in pairs],
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, arr in pairs:
        raw = np.ascontiguousarray(arr, "<f4").tobytes()
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    try:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(buf.getvalue())
    except OSError as exc:
        raise WriteError(f"cannot write checkpoint {path}: {exc}") from exc


def _take(view: memoryview, pos: int, n: int, what: str):
    if pos + n > len(view):
        raise CorruptCheckpointError(f"checkpoint truncated reading {what}")
    return view[pos : pos + n], pos + n


def load_checkpoint(path) -> TrainState:
    try:
        raw = memoryview(Path(path).read_bytes())
    except OSError as exc:
        raise CorruptCheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    head, pos = _take(raw, 0, 8, "header")
    if head[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic {bytes(head[:4])!r}")
    (version,) = struct.unpack("<I", head[4:8])
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    size, pos = _take(raw, pos, 8, "manifest length")
    blob, pos = _take(raw, pos, struct.unpack("<Q", size)[0], "manifest")
    try:
        meta = json.loads(bytes(blob))
        config = TrainConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"bad checkpoint manifest: {exc}") from exc

    arrays = {}
    for entry in meta["arrays"]:
        size, pos = _take(raw, pos, 8, entry["name"])
        data, pos = _take(raw, pos, struct.unpack("<Q", size)[0], entry["name"])
        arr = np.frombuffer(data, "<f4").astype(np.float32)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CorruptCheckpointError(f"array {entry['name']} has wrong size")
        arrays[entry["name"]] = arr.reshape(shape)

    names = ["w1", "b1", "w2", "b2", "w3", "b3"]
    needed = {"positions", "velocities", "features", *names}
    needed |= {f"mlp_m_{n}" for n in names} | {f"mlp_v_{n}" for n in names}
    needed |= {"feat_m", "feat_v"}
    missing = needed - set(arrays)
    if missing:
        raise CorruptCheckpointError(f"checkpoint missing arrays: {sorted(missing)}")

    cloud = ParticleCloud(
        arrays["positions"],
        arrays["velocities"],
        arrays["features"],
        config.search_radius,
    )
    params = FieldParams(*(arrays[n] for n in names))
    mlp_opt = AdamState(
        [arrays[f"mlp_m_{n}"] for n in names],
        [arrays[f"mlp_v_{n}"] for n in names],
        int(meta["mlp_t"]),
        config.lr,
        config.beta1,
        config.beta2,
        config.eps,
    )
    feat_opt = AdamState(
        [arrays["feat_m"]],
        [arrays["feat_v"]],
        int(meta["feat_t"]),
        config.lr,
        config.beta1,
        config.beta2,
        config.eps,
    )
    grid = make_occupancy_grid(config.grid_resolution, config.occupancy_threshold)
    return TrainState(
        config, cloud, params, mlp_opt, feat_opt, grid, int(meta["step"])
    )
