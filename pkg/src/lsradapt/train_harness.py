"""Desk-scale training loop over planted synthetic regression tasks.

A task freezes a base weight W, plants a known true update, and asks an
adapter to recover it from (input, target) pairs.  Because the adapter
holds the same frozen W, the base weight cancels out of the residual and
the optimization is purely about the update, which makes the recovery
error ||alpha * delta_hat - delta_star||_F / ||delta_star||_F an exact
quality measure.

Plants:

* ``DensePlant``          -- unstructured Gaussian update,
* ``LowRankPlant(r)``     -- rank-r update,
* ``KronSumPlant(...)``   -- sum of full Kronecker products (generically
  full rank, so NOT representable by a rank-limited adapter; useful as a
  mismatched control),
* ``LsrProductPlant(...)``-- product of two Kronecker sums, the exact
  structure a factored adapter materializes; the matched-recovery case.
"""

import math
import time
from dataclasses import dataclass

import numpy as np

from . import adapter
from .adapter import LoraLayer, LsrAdaptLayer, ShapePlan
from .kron_core import Matrix, Shape, kron
from .rng import rng_stream


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


@dataclass(frozen=True)
class DensePlant:
    pass


@dataclass(frozen=True)
class LowRankPlant:
    r: int


@dataclass(frozen=True)
class KronSumPlant:
    s: int
    left: Shape
    right: Shape


@dataclass(frozen=True)
class LsrProductPlant:
    s: int
    plan: ShapePlan


@dataclass(eq=False)
class SyntheticTask:
    W: Matrix
    delta_star: Matrix
    inputs: np.ndarray   # (n, w2)
    targets: np.ndarray  # (n, w1)
    noise_std: float
    seed: int

    def __post_init__(self):
        if self.delta_star.shape != self.W.shape:
            raise ValueError("delta_star shape must match W")
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have equal length")

    @property
    def n_samples(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-2
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    steps: int = 1000
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1/beta2 must be in (0, 1)")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass
class TrainReport:
    loss_curve: list[float]
    final_loss: float
    recovery_error: float
    trainable_params: int
    wall_time_seconds: float


@dataclass
class CompareReport:
    lora: TrainReport
    lsr: TrainReport
    param_ratio: float


def _plant_delta(plant, w1: int, w2: int, rng) -> Matrix:
    if isinstance(plant, DensePlant):
        return rng.normal(size=(w1, w2))
    if isinstance(plant, LowRankPlant):
        if not 1 <= plant.r <= min(w1, w2):
            raise ValueError(f"plant rank {plant.r} out of range")
        return rng.normal(size=(w1, plant.r)) @ rng.normal(size=(plant.r, w2))
    if isinstance(plant, KronSumPlant):
        lr, lc = plant.left
        rr, rc = plant.right
        if lr * rr != w1 or lc * rc != w2:
            raise ValueError(
                f"plant shapes {lr}x{lc} (x) {rr}x{rc} do not give {w1}x{w2}")
        delta = np.zeros((w1, w2))
        for _ in range(plant.s):
            delta += kron(rng.normal(size=(lr, lc)), rng.normal(size=(rr, rc)))
        return delta
    if isinstance(plant, LsrProductPlant):
        p = plant.plan
        if p.w1 != w1 or p.w2 != w2:
            raise ValueError(f"plan is {p.w1}x{p.w2}, task wants {w1}x{w2}")
        a_sum = np.zeros((p.w1, p.r))
        b_sum = np.zeros((p.r, p.w2))
        for _ in range(plant.s):
            a_sum += kron(rng.normal(size=(p.a1, p.r1)),
                          rng.normal(size=(p.a2, p.r2)))
            b_sum += kron(rng.normal(size=(p.r1, p.b1)),
                          rng.normal(size=(p.r2, p.b2)))
        return a_sum @ b_sum
    raise ValueError(f"unknown plant {plant!r}")


def gen_task(w1: int, w2: int, plant, n_samples: int, noise_std: float,
             seed: int) -> SyntheticTask:
    """Seeded task: Gaussian W, planted update scaled to unit Frobenius
    norm, Gaussian inputs, targets (W + delta_star) x plus noise."""
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    W = rng_stream(seed, "task-base").normal(size=(w1, w2))
    delta = _plant_delta(plant, w1, w2, rng_stream(seed, "task-plant"))
    norm = np.linalg.norm(delta)
    if norm > 0:
        delta = delta / norm
    inputs = rng_stream(seed, "task-inputs").normal(size=(n_samples, w2))
    targets = inputs @ (W + delta).T
    if noise_std != 0.0:
        targets = targets + noise_std * rng_stream(seed, "task-noise").normal(
            size=(n_samples, w1))
    return SyntheticTask(W=W, delta_star=delta, inputs=inputs,
                         targets=targets, noise_std=float(noise_std),
                         seed=int(seed))


# ---------------------------------------------------------------- training


def _layer_params(layer) -> dict[str, np.ndarray]:
    if isinstance(layer, LsrAdaptLayer):
        return {"A1": layer.A1, "A2": layer.A2, "B1": layer.B1, "B2": layer.B2}
    if isinstance(layer, LoraLayer):
        return {"A": layer.A, "B": layer.B}
    raise TypeError(f"unsupported layer type {type(layer)!r}")


def _forward(layer, x):
    if isinstance(layer, LsrAdaptLayer):
        return adapter.forward(layer, x)
    return adapter.lora_forward(layer, x)


def _grads(layer, x, g) -> dict[str, np.ndarray]:
    if isinstance(layer, LsrAdaptLayer):
        gb = adapter.backward(layer, x, g)
        return {"A1": gb.dA1, "A2": gb.dA2, "B1": gb.dB1, "B2": gb.dB2}
    dA, dB, _ = adapter.lora_backward(layer, x, g)
    return {"A": dA, "B": dB}


def trainable_param_count(layer) -> int:
    if isinstance(layer, LsrAdaptLayer):
        return adapter.count_params_lsr(layer.plan, layer.s)
    return adapter.count_params_lora(layer.W.shape[0], layer.W.shape[1],
                                     layer.r)


def effective_delta(layer) -> Matrix:
    """The update the trained layer actually adds to W (alpha included)."""
    if isinstance(layer, LsrAdaptLayer):
        return layer.alpha * adapter.materialize_delta(layer)
    return layer.alpha * (layer.A @ layer.B)


def recovery_error(layer, task: SyntheticTask) -> float:
    denom = np.linalg.norm(task.delta_star)
    if denom == 0.0:
        return float("nan")
    return float(np.linalg.norm(effective_delta(layer) - task.delta_star)
                 / denom)


def _dataset_loss(layer, task: SyntheticTask) -> float:
    total = 0.0
    for x, t in zip(task.inputs, task.targets):
        resid = _forward(layer, x) - t
        total += 0.5 * float(resid @ resid)
    return total / task.n_samples


class _Optimizer:
    def __init__(self, config: OptimizerConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.t = 0
        if config.kind == "sgd":
            self.velocity = {k: np.zeros_like(p) for k, p in params.items()}
        else:
            self.m = {k: np.zeros_like(p) for k, p in params.items()}
            self.v = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, params, grads):
        c = self.config
        self.t += 1
        if c.kind == "sgd":
            for k, p in params.items():
                vel = self.velocity[k]
                vel *= c.momentum
                vel += grads[k]
                p -= c.learning_rate * vel
        else:
            bc1 = 1.0 - c.beta1**self.t
            bc2 = 1.0 - c.beta2**self.t
            for k, p in params.items():
                m, v = self.m[k], self.v[k]
                m *= c.beta1
                m += (1.0 - c.beta1) * grads[k]
                v *= c.beta2
                v += (1.0 - c.beta2) * grads[k] ** 2
                p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps_hat)


class _BatchSampler:
    """Sequential wrap-around over a seeded shuffle, reshuffled each epoch."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng_stream(seed, "shuffle")
        self.order = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        out = []
        count = 0
        while count < self.batch_size:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            take = min(self.batch_size - count, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + take])
            self.pos += take
            count += take
        return np.concatenate(out)


def train(layer, task: SyntheticTask, config: OptimizerConfig) -> TrainReport:
    """Minimize mean squared error over the adapter parameters (W frozen).

    The per-batch loss is mean_i 0.5 * ||forward(x_i) - t_i||^2; the loss
    curve records the full-dataset value of the same quantity, at step 0
    and roughly every steps/100 steps thereafter.
    """
    if layer.W.shape != task.W.shape:
        raise ValueError("layer and task disagree on the base weight shape")
    if task.n_samples == 0:
        raise ValueError("cannot train on an empty task")
    params = _layer_params(layer)
    opt = _Optimizer(config, params)
    sampler = _BatchSampler(task.n_samples, config.batch_size, config.seed)
    log_every = max(1, config.steps // 100)

    t0 = time.perf_counter()
    loss_curve = [_dataset_loss(layer, task)]
    for step in range(config.steps):
        idx = sampler.next()
        grads = None
        batch_loss = 0.0
        for i in idx:
            x = task.inputs[i]
            resid = _forward(layer, x) - task.targets[i]
            sample_loss = 0.5 * float(resid @ resid)
            if not math.isfinite(sample_loss):
                raise DivergenceError(step)
            batch_loss += sample_loss
            g = _grads(layer, x, resid)
            if grads is None:
                grads = g
            else:
                for k in grads:
                    grads[k] += g[k]
        scale = 1.0 / len(idx)
        if not math.isfinite(batch_loss * scale):
            raise DivergenceError(step)
        for k in grads:
            grads[k] *= scale
        opt.step(params, grads)
        if (step + 1) % log_every == 0 or step == config.steps - 1:
            loss = _dataset_loss(layer, task)
            if not math.isfinite(loss):
                raise DivergenceError(step)
            loss_curve.append(loss)
    wall = time.perf_counter() - t0
    return TrainReport(loss_curve=loss_curve, final_loss=loss_curve[-1],
                       recovery_error=recovery_error(layer, task),
                       trainable_params=trainable_param_count(layer),
                       wall_time_seconds=wall)


def compare(task: SyntheticTask, lora_r: int, lsr_plan: ShapePlan,
            lsr_s: int, config: OptimizerConfig,
            alpha: float = 1.0) -> CompareReport:
    """Train the baseline and the factored adapter from their standard
    inits on the identical task and config."""
    lora = adapter.lora_init(task.W, lora_r, alpha=alpha, seed=config.seed)
    lsr = adapter.init(task.W, lsr_plan, lsr_s, alpha=alpha, seed=config.seed)
    lora_report = train(lora, task, config)
    lsr_report = train(lsr, task, config)
    ratio = lsr_report.trainable_params / lora_report.trainable_params
    return CompareReport(lora=lora_report, lsr=lsr_report, param_ratio=ratio)
