"""Two-stage procedure planner.

Stage one classifies the task from (o_s, o_g) with a 4-layer MLP. Stage two
starts from noise in the action block of a plan matrix whose task and
observation blocks hold the conditions, and runs the reverse diffusion with a
denoiser that predicts x0 directly. The plan is the per-position argmax of
the final action block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .layout import ProblemDims, assemble_batch, decode_actions, impose_conditions
from .model import (Denoiser, DenoiserConfig, Layer, LayerNorm, Linear, load_parameters_into,
                    predict_x0, read_checkpoint, save_parameters, CheckpointError)
from .noise import MaskMode, NoiseStats, mask_values, q_sample, sample_inference_noise
from .schedule import NoiseSchedule
from .training import AdamW, NumericError, TrainingConfig, learning_rate

log = logging.getLogger(__name__)

CLASSIFIER_DEFAULTS = TrainingConfig(batch_size=64, epochs=20, steps_per_epoch=30, warmup_epochs=2,
                                     peak_lr=1e-3, decay_every=3, decay_last_k_epochs=6)


# --------------------------------------------------------------------------
# task classifier


class TaskClassifier(Layer):
    """Four fully connected layers on concat(o_s, o_g) producing task logits."""

    NUM_LAYERS = 4

    def __init__(self, observation_dim: int, num_classes: int, hidden: int = 128, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.observation_dim = observation_dim
        self.num_classes = num_classes
        self.hidden = hidden
        widths = [2 * observation_dim] + [hidden] * (self.NUM_LAYERS - 1) + [num_classes]
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [LayerNorm(w) for w in widths[1:-1]]

    def config(self) -> dict:
        return {"observation_dim": self.observation_dim, "num_classes": self.num_classes, "hidden": self.hidden}

    def logits(self, o_s, o_g) -> Tensor:
        o_s = np.atleast_2d(np.asarray(o_s, dtype=np.float64))
        o_g = np.atleast_2d(np.asarray(o_g, dtype=np.float64))
        if o_s.shape[-1] != self.observation_dim or o_g.shape[-1] != self.observation_dim:
            raise ValueError(f"observation dims {o_s.shape[-1]}/{o_g.shape[-1]} != {self.observation_dim}")
        h = Tensor(np.concatenate([o_s, o_g], axis=-1))
        for layer, norm in zip(self.layers[:-1], self.norms):
            h = ad.mish(norm(layer(h)))
        return self.layers[-1](h)

    def save(self, path, extra: dict | None = None):
        return save_parameters(path, self, "task_classifier", self.config(), extra)

    @classmethod
    def load(cls, path) -> "TaskClassifier":
        config, params, _ = read_checkpoint(path, "task_classifier")
        try:
            model = cls(**config)
        except (TypeError, ValueError) as e:
            raise CheckpointError(f"{path}: invalid config echo ({e})") from None
        load_parameters_into(model, params, path)
        return model


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_tasks(model: TaskClassifier, o_s, o_g) -> tuple[np.ndarray, np.ndarray]:
    """Batched (labels, probabilities)."""
    probs = _softmax(model.logits(o_s, o_g).data)
    return np.argmax(probs, axis=-1), probs


def predict_task(model: TaskClassifier, o_s, o_g) -> tuple[int, np.ndarray]:
    labels, probs = predict_tasks(model, np.asarray(o_s)[None], np.asarray(o_g)[None])
    return int(labels[0]), probs[0]


def train_task_classifier(train, cfg: TrainingConfig = CLASSIFIER_DEFAULTS, hidden: int = 128):
    """Cross-entropy training on ground-truth task labels.

    Returns ``(model, log)`` where ``log`` holds per-epoch mean loss and
    training accuracy.
    """
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    dims = train.dims
    model = TaskClassifier(dims.O, dims.C, hidden=hidden, seed=cfg.seed)
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for step in range(cfg.steps_per_epoch):
            idx = rng.integers(0, len(train), cfg.batch_size)
            with Tape() as tape:
                loss = ad.cross_entropy(model.logits(train.o_s[idx], train.o_g[idx]), train.tasks[idx])
            if not np.isfinite(loss.item()):
                raise NumericError(f"classifier loss became non-finite at epoch {epoch}")
            opt.step(tape.backward(loss), learning_rate(cfg, epoch, step))
            losses.append(loss.item())
        pred, _ = predict_tasks(model, train.o_s, train.o_g)
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)),
                        "accuracy": float(np.mean(pred == train.tasks))})
    return model, history


# --------------------------------------------------------------------------
# denoiser training


def default_denoiser_config(dims: ProblemDims, attention: bool = True, **kw) -> DenoiserConfig:
    return DenoiserConfig(input_width=dims.width, horizon=dims.T, attention_enabled=attention, **kw)


def train_denoiser(train, schedule: NoiseSchedule, mode, cfg: TrainingConfig = TrainingConfig(),
                   model_config: DenoiserConfig | None = None, callback=None):
    """Regress the denoiser output onto x0 from masked forward samples.

    Each example gets its own uniformly drawn step n in 1..N and is built
    with its ground-truth task. Returns ``(model, log)`` with per-epoch mean
    loss and learning rate.
    """
    if len(train) == 0:
        raise ValueError("cannot train on an empty dataset")
    mode = MaskMode.parse(mode)
    dims = train.dims
    model_config = model_config or default_denoiser_config(dims)
    if model_config.input_width != dims.width or model_config.horizon != dims.T:
        raise ValueError(f"model config ({model_config.horizon}, {model_config.input_width}) "
                         f"does not match data ({dims.T}, {dims.width})")
    model = Denoiser(model_config, seed=cfg.seed)
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    table = train.mask_table()
    masks_all = mask_values(train.actions, table, mode)
    x0_all = assemble_batch(train.tasks, train.actions, train.o_s, train.o_g, dims)
    rng = np.random.default_rng(cfg.seed + 1)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for step in range(cfg.steps_per_epoch):
            lr = learning_rate(cfg, epoch, step)
            idx = rng.integers(0, len(train), cfg.batch_size)
            n = rng.integers(1, schedule.N + 1, cfg.batch_size)
            x0 = x0_all[idx]
            xn = q_sample(x0, n, schedule, masks_all[idx], dims, rng=rng)
            with Tape() as tape:
                loss = ad.mse(model(Tensor(xn), n), Tensor(x0))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"denoiser loss became non-finite at epoch {epoch + 1}, step {step}")
            opt.step(tape.backward(loss), lr)
            losses.append(value)
        entry = {"epoch": epoch + 1, "lr": lr, "loss": float(np.mean(losses))}
        history.append(entry)
        log.info("denoiser epoch %d/%d loss %.5f lr %.2e", epoch + 1, cfg.epochs, entry["loss"], lr)
        if callback is not None:
            callback(entry)
    return model, history


# --------------------------------------------------------------------------
# reverse process


@dataclass(frozen=True)
class ReverseStepParams:
    coef_x0: float
    coef_xn: float
    posterior_std: float


def reverse_coefficients(schedule: NoiseSchedule, n: int) -> ReverseStepParams:
    """Posterior q(x_{n-1} | x_n, x0) of the unmasked forward process."""
    if not 1 <= n <= schedule.N:
        raise ValueError(f"step {n} outside [1, {schedule.N}]")
    if n == 1:
        # alpha_bar[0] = 1: the posterior collapses onto x0
        return ReverseStepParams(1.0, 0.0, 0.0)
    abar, abar_prev, beta = schedule.alpha_bar[n], schedule.alpha_bar[n - 1], schedule.beta[n]
    denom = 1.0 - abar
    return ReverseStepParams(
        coef_x0=float(np.sqrt(abar_prev) * beta / denom),
        coef_xn=float(np.sqrt(1.0 - beta) * (1.0 - abar_prev) / denom),
        posterior_std=float(np.sqrt(beta * (1.0 - abar_prev) / denom)),
    )


def _standard_normal(rng, shape) -> np.ndarray:
    """Draw from one Generator, or one Generator per batch entry."""
    if isinstance(rng, (list, tuple)):
        if len(rng) != shape[0]:
            raise ValueError(f"{len(rng)} rng streams for a batch of {shape[0]}")
        return np.stack([g.standard_normal(shape[1:]) for g in rng])
    return rng.standard_normal(shape)


def reverse_step(x_n, x0_hat, n: int, schedule: NoiseSchedule, tasks, o_s, o_g, dims: ProblemDims, rng=None):
    """One denoising step on a batch (B, T, W); returns x_{n-1}.

    The action block of ``x0_hat`` is clamped to [-1, 1] before use; task and
    observation blocks of the result are reset to the conditions.
    """
    p = reverse_coefficients(schedule, n)
    x_n = np.asarray(x_n, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    if not np.all(np.isfinite(x0_hat)):
        raise NumericError(f"non-finite x0 estimate at step {n}")
    a = dims.action_slice
    act0 = np.clip(x0_hat[..., a], -1.0, 1.0)
    out = np.empty_like(x_n)
    act = p.coef_x0 * act0 + p.coef_xn * x_n[..., a]
    if p.posterior_std > 0.0:
        act = act + p.posterior_std * _standard_normal(rng, act.shape)
    out[..., a] = act
    return impose_conditions(out, tasks, o_s, o_g, dims)


def initial_plan_matrix(tasks, o_s, o_g, stats: NoiseStats, dims: ProblemDims, rng,
                        use_fitted_mean: bool = False) -> np.ndarray:
    bsz = len(np.atleast_1d(tasks))
    x = np.zeros((bsz, dims.T, dims.width))
    impose_conditions(x, tasks, o_s, o_g, dims)
    if isinstance(rng, (list, tuple)):
        noise = np.stack([sample_inference_noise(stats, dims.A, use_fitted_mean, g) for g in rng])
    else:
        noise = sample_inference_noise(stats, dims.A, use_fitted_mean, rng, size=bsz)
    x[..., dims.action_slice] = noise
    return x


def sample_plans(denoiser: Denoiser, tasks, o_s, o_g, stats: NoiseStats, schedule: NoiseSchedule,
                 dims: ProblemDims, rng, use_fitted_mean: bool = False, trace=None) -> np.ndarray:
    """Run the full reverse chain for given task labels; returns the final x0 batch."""
    o_s = np.atleast_2d(np.asarray(o_s, dtype=np.float64))
    o_g = np.atleast_2d(np.asarray(o_g, dtype=np.float64))
    x = initial_plan_matrix(tasks, o_s, o_g, stats, dims, rng, use_fitted_mean)
    for n in range(schedule.N, 0, -1):
        x0_hat = predict_x0(denoiser, x, n)
        x = reverse_step(x, x0_hat, n, schedule, tasks, o_s, o_g, dims, rng)
        if trace is not None:
            trace(n, x0_hat, x)
    return x


def infer_plans(denoiser: Denoiser, classifier: TaskClassifier, o_s, o_g, stats: NoiseStats,
                schedule: NoiseSchedule, dims: ProblemDims, rng, use_fitted_mean: bool = False):
    """Batched planning from observations only; returns (plans (B, T), predicted tasks (B,))."""
    o_s = np.atleast_2d(np.asarray(o_s, dtype=np.float64))
    o_g = np.atleast_2d(np.asarray(o_g, dtype=np.float64))
    if o_s.shape[-1] != dims.O or o_g.shape[-1] != dims.O:
        raise ValueError(f"observation dims {o_s.shape[-1]}/{o_g.shape[-1]} != O={dims.O}")
    if denoiser.config.input_width != dims.width or denoiser.config.horizon != dims.T:
        raise ValueError("denoiser config does not match problem dims")
    tasks, _ = predict_tasks(classifier, o_s, o_g)
    x = sample_plans(denoiser, tasks, o_s, o_g, stats, schedule, dims, rng, use_fitted_mean)
    return decode_actions(x, dims), tasks


def infer_plan(denoiser: Denoiser, classifier: TaskClassifier, o_s, o_g, stats: NoiseStats,
               schedule: NoiseSchedule, dims: ProblemDims, rng, use_fitted_mean: bool = False) -> list[int]:
    plans, _ = infer_plans(denoiser, classifier, np.asarray(o_s)[None], np.asarray(o_g)[None], stats,
                           schedule, dims, rng, use_fitted_mean)
    return [int(a) for a in plans[0]]


def sample_streams(seed: int, indices) -> list[np.random.Generator]:
    """Independent per-sample generators keyed by (seed, sample index)."""
    return [np.random.default_rng([int(seed), int(i)]) for i in indices]


def plan_dataset(denoiser: Denoiser, classifier: TaskClassifier, data, stats: NoiseStats,
                 schedule: NoiseSchedule, seed: int = 0, batch_size: int = 512,
                 use_fitted_mean: bool = False):
    """Plan every window of ``data``; returns (plans, predicted tasks)."""
    plans, tasks = [], []
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(len(data), lo + batch_size))
        p, t = infer_plans(denoiser, classifier, data.o_s[idx], data.o_g[idx], stats, schedule, data.dims,
                           sample_streams(seed, idx), use_fitted_mean)
        plans.append(p)
        tasks.append(t)
    if not plans:
        return np.zeros((0, data.dims.T), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(plans), np.concatenate(tasks)
