"""Training loop, optimizers, and the gradient verification harness.

Training is deliberately plain: draw one mini-batch of frame pairs per
step from a seeded generator, run the recurrent estimator, take the
exponentially weighted sequence loss, clip the global gradient norm, and
apply either plain gradient descent or Adam under a linearly decaying
learning rate. Everything is float64 numpy executed sequentially, so a
fixed seed reproduces every loss value and checkpoint byte for byte.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import tape
from .data import CorruptionSpec
from .fileio import read_depth_pgm, read_flo, read_manifest, read_mask_pgm, read_rgb_ppm
from .flow import FlowModel, ModelConfig, estimate_flow, sequence_loss
from .tape import Tensor, add, scale
from .weights import rng_for_path


class NumericError(RuntimeError):
    """A numeric failure (non-finite loss, failed gradient check)."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; architecture lives in ModelConfig."""

    steps: int = 2000
    lr: float = 1.25e-4
    optimizer: str = "adam"  # "adam" | "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0  # 0 disables clipping
    gamma: float = 0.8
    batch_size: int = 1
    checkpoint_every: int = 500
    augment: str = "none"  # per-step corruption of training RGB
    sigma: float = 35.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("betas must lie in [0, 1)")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be positive")
        if self.augment not in ("none", "agn", "dark"):
            raise ValueError(f"unknown augment kind {self.augment!r}")

    def learning_rate_at(self, step: int) -> float:
        """Linear decay from the initial rate toward zero."""
        return self.lr * (1.0 - step / self.steps)


# ---------------------------------------------------------------------------
# optimizers


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for key in sorted(grads):
        g = grads[key]
        total += float((g * g).sum())
    return float(np.sqrt(total))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint norm is at most
    ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for key in grads:
            grads[key] = grads[key] * factor
    return norm


class Sgd:
    """Plain gradient descent."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for key in sorted(self.params):
            self.params[key].data -= lr * grads[key]


class Adam:
    """Adam with bias correction; state is keyed by parameter path."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.adam_eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for key in sorted(self.params):
            g = grads[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            self.params[key].data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params: dict[str, Tensor], cfg: TrainConfig):
    return Adam(params, cfg) if cfg.optimizer == "adam" else Sgd(params, cfg)


# ---------------------------------------------------------------------------
# dataset loading


@dataclass
class TrainSample:
    """One fully loaded frame pair."""

    rgb1: np.ndarray
    depth1: np.ndarray
    rgb2: np.ndarray
    depth2: np.ndarray
    flow2d: np.ndarray
    flow3d: np.ndarray | None
    valid: np.ndarray


def load_sample(entry, base: str, with_flow3d: bool = False) -> TrainSample:
    from .fileio import read_flow3d

    files = entry.resolve(base)
    return TrainSample(
        rgb1=read_rgb_ppm(files.rgb1),
        depth1=read_depth_pgm(files.depth1),
        rgb2=read_rgb_ppm(files.rgb2),
        depth2=read_depth_pgm(files.depth2),
        flow2d=read_flo(files.flow2d),
        flow3d=read_flow3d(files.flow3d) if with_flow3d else None,
        valid=read_mask_pgm(files.mask),
    )


def load_dataset(manifest_path, with_flow3d: bool = False) -> list[TrainSample]:
    import os

    base = os.path.dirname(os.path.abspath(manifest_path))
    return [
        load_sample(e, base, with_flow3d) for e in read_manifest(manifest_path)
    ]


# ---------------------------------------------------------------------------
# training


@dataclass
class LogRow:
    step: int
    loss: float
    lr: float


def sample_loss(
    model: FlowModel, sample: TrainSample, gamma: float, rgb1=None, rgb2=None
) -> Tensor:
    preds = estimate_flow(
        model.params,
        model.cfg,
        sample.rgb1 if rgb1 is None else rgb1,
        sample.depth1,
        sample.rgb2 if rgb2 is None else rgb2,
        sample.depth2,
    )
    return sequence_loss(preds, sample.flow2d, sample.valid, gamma=gamma)


def train_model(
    model: FlowModel,
    samples: list[TrainSample],
    cfg: TrainConfig,
    checkpoint_cb=None,
) -> list[LogRow]:
    """Run the optimization loop; returns one log row per step.

    ``checkpoint_cb(step, params)`` fires with the weights in effect at
    ``step`` (before that step's update) whenever ``step`` is a multiple
    of ``checkpoint_every``, and once more after the final update with
    ``step == cfg.steps``. The logged loss at step 0 is therefore an
    exact forward pass of the step-0 checkpoint.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    order_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    augment = CorruptionSpec(kind=cfg.augment, sigma=cfg.sigma, seed=cfg.seed)
    optimizer = make_optimizer(model.params, cfg)
    leaves = [model.params[k] for k in sorted(model.params)]
    rows: list[LogRow] = []

    for step in range(cfg.steps):
        if checkpoint_cb is not None and step % cfg.checkpoint_every == 0:
            checkpoint_cb(step, model.params)
        lr = cfg.learning_rate_at(step)
        picks = order_rng.integers(0, len(samples), cfg.batch_size)
        losses = []
        for j, pick in enumerate(picks):
            sample = samples[int(pick)]
            rgb1, rgb2 = sample.rgb1, sample.rgb2
            if augment.kind != "none":
                s1, s2 = augment.seeds_for_pair(step * cfg.batch_size + j)
                rgb1 = augment.apply(rgb1, s1)
                rgb2 = augment.apply(rgb2, s2)
            losses.append(sample_loss(model, sample, cfg.gamma, rgb1, rgb2))
        loss = losses[0]
        for extra in losses[1:]:
            loss = add(loss, extra)
        if cfg.batch_size > 1:
            loss = scale(loss, 1.0 / cfg.batch_size)

        value = float(loss.data.reshape(()))
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value!r} at step {step}")
        rows.append(LogRow(step=step, loss=value, lr=lr))

        tape.backward(loss, leaves)
        grads = {k: model.params[k].grad for k in model.params}
        for leaf in leaves:
            leaf.grad = None
        clip_global_norm(grads, cfg.clip_norm)
        optimizer.step(grads, lr)

    if checkpoint_cb is not None:
        checkpoint_cb(cfg.steps, model.params)
    return rows


# ---------------------------------------------------------------------------
# gradient verification harness


@dataclass(frozen=True)
class GradCheckRow:
    group: str
    path: str
    max_rel_error: float
    passed: bool


H_LADDER = (1.0, 0.1, 0.01)  # step-size backoff factors on a failure
ALT_POINTS = 2  # independent evaluation points tried after the ladder
JITTER_STD = 0.05


def verify_gradients(
    model_cfg: ModelConfig,
    size: int = 8,
    seed: int = 0,
    coords_per_param: int = 2,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    inject_bug: bool = False,
) -> list[GradCheckRow]:
    """Compare analytic parameter gradients of the sequence loss against
    central finite differences, parameter tensor by parameter tensor.

    ``coords_per_param`` bounds the coordinates swept per tensor (0
    sweeps all of them). ``inject_bug`` enables a deliberate fault in
    one backward rule so the harness can demonstrate that it catches
    wrong gradients.

    Every parameter is jittered away from its training init first. The
    engineered init is a degenerate point: zero-initialized output
    layers make whole branches constant in their upstream parameters
    (both gradients exactly zero, so agreement is vacuous), and the
    zero initial flow puts every correlation lookup exactly on a
    bilinear knot. A generic point exercises all of them for real.

    The network is piecewise smooth (relu, max pooling, bilinear
    sampling, clamps), so a difference window can straddle a kink; the
    two-sided quotient then estimates the average of two one-sided
    slopes while the analytic gradient reports the branch actually
    taken. Such disagreement indicts the probe, not the gradients, and
    it is local: it vanishes once the window no longer crosses the
    kink. A tensor that fails is therefore retried with smaller steps
    and then at freshly jittered points; a genuinely wrong backward
    rule disagrees at every step size and every point and stays red.
    """
    if size % model_cfg.divisor:
        raise ValueError(
            f"size {size} must be a multiple of the model divisor {model_cfg.divisor}"
        )
    model = FlowModel.create(model_cfg, seed)
    jitter = np.random.default_rng(np.random.SeedSequence((seed, 3)))
    for path in sorted(model.params):
        t = model.params[path]
        t.data += jitter.normal(0.0, 0.05, t.shape)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
    z_hi = model_cfg.encoder.z_max * 0.9
    rgb1 = rng.random((3, size, size))
    rgb2 = rng.random((3, size, size))
    depth1 = rng.uniform(0.5, z_hi, (size, size))
    depth2 = rng.uniform(0.5, z_hi, (size, size))
    gt = rng.uniform(-1.5, 1.5, (2, size, size))
    valid = np.ones((size, size), dtype=bool)

    def loss_fn(_ignored: Tensor) -> Tensor:
        preds = estimate_flow(model.params, model_cfg, rgb1, depth1, rgb2, depth2)
        return sequence_loss(preds, gt, valid)

    def ladder(t: Tensor, coords) -> float:
        best = math.inf
        for factor in H_LADDER:
            best = min(
                best, float(tape.finite_diff_check(loss_fn, t, h=h * factor, coords=coords))
            )
            if best <= tolerance:
                break
        return best

    def check_tensor(t: Tensor, coords) -> float:
        err = ladder(t, coords)
        for attempt in range(1, ALT_POINTS + 1):
            if err <= tolerance:
                break
            saved = {p: q.data.copy() for p, q in model.params.items()}
            alt = np.random.default_rng(np.random.SeedSequence((seed, 4, attempt)))
            for p in sorted(model.params):
                model.params[p].data += alt.normal(0.0, JITTER_STD, model.params[p].shape)
            try:
                err = min(err, ladder(t, coords))
            finally:
                for p, d in saved.items():
                    model.params[p].data[...] = d
        return err

    fault = tape.gradient_fault() if inject_bug else contextlib.nullcontext()
    rows: list[GradCheckRow] = []
    with fault:
        for group in sorted(model.parameter_groups()):
            for path in model.parameter_groups()[group]:
                t = model.params[path]
                if coords_per_param and t.size > coords_per_param:
                    pick_rng = rng_for_path(seed, "fd." + path)
                    coords = sorted(
                        int(c)
                        for c in pick_rng.choice(
                            t.size, coords_per_param, replace=False
                        )
                    )
                else:
                    coords = None
                err = check_tensor(t, coords)
                rows.append(
                    GradCheckRow(
                        group=group,
                        path=path,
                        max_rel_error=err,
                        passed=err <= tolerance,
                    )
                )
    return rows


def group_summary(rows: list[GradCheckRow]) -> dict[str, tuple[float, bool]]:
    """Worst error and combined verdict per parameter group."""
    out: dict[str, tuple[float, bool]] = {}
    for row in rows:
        worst, ok = out.get(row.group, (0.0, True))
        out[row.group] = (max(worst, row.max_rel_error), ok and row.passed)
    return out
