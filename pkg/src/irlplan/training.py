"""Dataset assembly and the optimization loop.

A training sample is one planning tick: the scene, its safety-filtered
candidate set, per-candidate feature bundles, and the index of the candidate
closest to the recorded expert (the demonstration label).  Training minimizes
the mean focal NLL of that label under the softmax over candidate rewards,
with zero-mean Gaussian perturbation of the ego initial state re-sampled
every epoch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import EgoState, SceneContext, Trajectory, project_to_route, wrap_angle
from .trajgen import GeneratorConfig, TrajectorySet, generate_trajectories
from .safety import SafetyConfig, filter_set
from .prediction import predict_agents
from .features import compute_bundles, zero_features
from .scorer import (ScorerConfig, ScorerParams, batch_loss_graph, focal_nll,
                     forward, init_params, softmax_distribution)

# longitudinal / lateral / heading / speed perturbation stds
AUG_STD_LOW = (1.2, 0.8, 0.1, 0.1)
AUG_STD_HIGH = (2.5, 1.5, 0.3, 0.2)


@dataclass
class TrainSample:
    scene: SceneContext
    trajectory_set: TrajectorySet  # post-safety-filter
    bundles: list
    demo_index: int
    tags: frozenset = frozenset()

    def __post_init__(self):
        if not 0 <= self.demo_index < len(self.trajectory_set):
            raise ValueError("demo_index out of range")
        if len(self.bundles) != len(self.trajectory_set):
            raise ValueError("bundles not aligned with trajectory set")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr_init: float = 1e-3
    lr_min: float = 1e-4
    restart_period: int = 7
    epochs: int = 20
    gamma: float = 2.0
    aug_std: tuple = AUG_STD_LOW
    seed: int = 0
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    drop_features: tuple = ()  # ablation: zero these feature tensors

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0 or self.restart_period <= 0:
            raise ValueError("batch_size, epochs, restart_period must be positive")
        if not 0 < self.lr_min < self.lr_init:
            raise ValueError("need 0 < lr_min < lr_init")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")


def project_expert(tset: TrajectorySet, expert: Trajectory) -> int:
    """Index of the candidate with smallest mean positional l2 to the expert.

    Waypoints are compared at shared timestamps (both sampled at the same
    dt); the expert may be longer than the candidates.  Ties break to the
    lowest index.  Heading is deliberately not part of the distance.
    """
    if len(tset) == 0:
        raise ValueError("empty trajectory set")
    exp_xy = expert.xy()
    lengths = {len(t.states) for t in tset.trajectories}
    if len(lengths) == 1:
        XY = np.stack([t.xy() for t in tset.trajectories])
        n = min(XY.shape[1], len(exp_xy))
        delta = XY[:, :n] - exp_xy[None, :n]
        dists = np.mean(np.hypot(delta[:, :, 0], delta[:, :, 1]), axis=1)
    else:
        dists = []
        for traj in tset.trajectories:
            xy = traj.xy()
            n = min(len(xy), len(exp_xy))
            dists.append(np.mean(np.linalg.norm(xy[:n] - exp_xy[:n], axis=1)))
    best, best_d = 0, math.inf
    for i, d in enumerate(dists):
        if d < best_d - 1e-15:
            best, best_d = i, float(d)
    return best


def augment_initial_state(scene: SceneContext, std, rng) -> SceneContext:
    """Perturb the ego initial state in the route frame.

    std = (longitudinal m, lateral m, heading rad, speed m/s).  Exactly four
    normal draws in that order, so results are reproducible for a given rng
    state.  Speed is clamped at zero.  Agents, route, and history are left
    untouched.
    """
    d_lon = float(rng.normal(0.0, std[0]))
    d_lat = float(rng.normal(0.0, std[1]))
    d_th = float(rng.normal(0.0, std[2]))
    d_v = float(rng.normal(0.0, std[3]))
    ego = scene.ego
    _, _, route_heading = project_to_route((ego.x, ego.y), scene.route)
    # move along the local route tangent / normal at the ego's projection
    c, si = math.cos(route_heading), math.sin(route_heading)
    x = ego.x + d_lon * c - d_lat * si
    y = ego.y + d_lon * si + d_lat * c
    new_ego = EgoState(x=x, y=y, theta=wrap_angle(ego.theta + d_th),
                       v=max(0.0, ego.v + d_v), a=ego.a, steering=ego.steering)
    return scene.with_ego(new_ego)


def build_sample(scene: SceneContext, expert: Trajectory,
                 tags=frozenset(),
                 gen_cfg: GeneratorConfig = GeneratorConfig(),
                 safety_cfg: SafetyConfig = SafetyConfig(),
                 drop_features=()) -> TrainSample:
    """Run generate -> filter -> features -> label for one scene."""
    tset = generate_trajectories(scene, gen_cfg)
    filtered, _ = filter_set(tset, scene, safety_cfg)
    predictions = predict_agents(scene, horizon=8.0)
    bundles = compute_bundles(filtered.trajectories, scene, predictions)
    if drop_features:
        bundles = [zero_features(b, drop_features) for b in bundles]
    demo = project_expert(filtered, expert)
    return TrainSample(scene=scene, trajectory_set=filtered, bundles=bundles,
                       demo_index=demo, tags=frozenset(tags))


def balance_dataset(samples, target_ratios: dict) -> list:
    """Upsample rare tags toward the requested ratios.

    Only integer duplication, never removal, so the output is a superset of
    the input.  Ratios are measured against the original set size; a tag
    already at or above its target is left alone.
    """
    out = list(samples)
    n = len(samples)
    if n == 0:
        return out
    for tag, target in sorted(target_ratios.items()):
        tagged = [s for s in samples if tag in s.tags]
        if not tagged:
            continue
        current = len(tagged) / n
        if current >= target:
            continue
        extra_copies = int(math.ceil(target / current)) - 1
        for _ in range(extra_copies):
            out.extend(tagged)
    return out


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Cosine annealing restarting every cfg.restart_period epochs."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    p = cfg.restart_period
    phase = math.fmod(epoch, p) / p
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * phase))


class Adam:
    """Standard Adam on the named-tensor parameter dict."""

    def __init__(self, params: ScorerParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(params.tensors[k]) for k in params.trainable_names()}
        self.v = {k: np.zeros_like(params.tensors[k]) for k in params.trainable_names()}

    def step(self, params: ScorerParams, grads: dict, lr: float) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k in self.m:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params.tensors[k] -= lr * (self.m[k] / b1t) / (np.sqrt(self.v[k] / b2t) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


def _mean_loss(samples, params: ScorerParams, gamma: float) -> float:
    losses = []
    for s in samples:
        rewards, _ = forward(s.bundles, params, mode="eval")
        losses.append(focal_nll(softmax_distribution(rewards), s.demo_index, gamma))
    return float(np.mean(losses))


def train(train_items, val_samples, cfg: TrainConfig,
          gen_cfg: GeneratorConfig = GeneratorConfig(),
          safety_cfg: SafetyConfig = SafetyConfig(),
          log_path=None):
    """Fit scorer parameters by maximum-entropy IRL with a focal loss.

    train_items: list of (TrainSample, expert Trajectory) pairs; the expert
    is kept so each epoch's augmented scene can be re-labeled against the
    original demonstration.  val_samples: plain TrainSamples, never
    augmented.  Returns (best-validation ScorerParams, list of EpochRecord).
    """
    if not train_items:
        raise ValueError("empty training set")
    for sample, _ in train_items:
        if len(sample.trajectory_set) < 2:
            raise ValueError("every training sample needs >= 2 trajectories")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.seed, cfg.scorer)
    opt = Adam(params)
    best_params = params.copy()
    best_val = math.inf
    history = []
    zero_noise = all(s == 0.0 for s in cfg.aug_std)

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(epoch - 1, cfg)
        # fresh augmentation draw every epoch; the pipeline (generation,
        # safety filter, features, label) is rebuilt from the perturbed scene
        if zero_noise:
            epoch_samples = [s for s, _ in train_items]
        else:
            epoch_samples = []
            for sample, expert in train_items:
                scene = augment_initial_state(sample.scene, cfg.aug_std, rng)
                try:
                    epoch_samples.append(
                        build_sample(scene, expert, sample.tags, gen_cfg,
                                     safety_cfg, cfg.drop_features))
                except Exception:
                    epoch_samples.append(sample)  # keep the clean tick
        order = rng.permutation(len(epoch_samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [epoch_samples[i] for i in order[start:start + cfg.batch_size]]
            loss, pvars = batch_loss_graph([s.bundles for s in batch],
                                           [s.demo_index for s in batch],
                                           params, cfg.gamma, train=True)
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                    f" (lr={lr:.2e}, batch size {len(batch)})")
            loss.backward()
            grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                     for k, v in pvars.items()}
            opt.step(params, grads, lr)
            losses.append(float(loss.data))
        val_loss = _mean_loss(val_samples, params, cfg.gamma) if val_samples else math.nan
        rec = EpochRecord(epoch=epoch, lr=lr, train_loss=float(np.mean(losses)),
                          val_loss=val_loss)
        history.append(rec)
        if val_samples:
            if val_loss < best_val:
                best_val = val_loss
                best_params = params.copy()
        else:
            best_params = params.copy()

    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "lr", "train_loss", "val_loss"])
            for r in history:
                w.writerow([r.epoch, f"{r.lr:.10g}", f"{r.train_loss:.10g}",
                            f"{r.val_loss:.10g}"])
    return best_params, history
