"""AdamW training loop with linear warmup + cosine annealing.

An epoch is one pass of ceil(n / (2 * batch_size)) steps over a fresh
shuffle, each step consuming the next 2 * batch_size rows as disjoint
pairs (a trailing chunk with fewer rows forms fewer pairs; a chunk with
fewer than 2 rows falls back to one i.i.d. pair draw so step accounting
stays exact). When 2 * batch_size > n, every step draws i.i.d. pairs.

Defaults are tuned for the shallow residual adapter at desk scale: the
lr that full-encoder fine-tuning protocols use with AdamW (around 1e-5)
is far too small for a 200-epoch run on a small cached corpus, so the
default lr is 4e-3 with 150 warmup steps. Betas and weight decay keep
the conventional (0.9, 0.999) / 1e-4 values. eps = 1e-3: near the
identity point the regularizer's gradient feedback makes the eps-regime
of AdamW linearly unstable for eps below roughly lr * kappa / 40, which
shows up as a sustained parameter oscillation that never settles; 1e-3
clears that threshold for the default lr with a wide margin.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterParams, identity_params
from .kernels import KernelSpec
from .objective import (LossBreakdown, GradientBundle,
                        feature_alignment_loss_and_grad, total_loss_and_grad)
from .store import PairBatch, PairedEmbeddings, sample_pair_batch


class TrainerError(RuntimeError):
    """Configuration or numerical failure during training.

    Carries the partial TrainReport (history up to the failing step)
    in the `report` attribute when training had started.
    """

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


SCHEDULERS = ("cosine", "constant")
OBJECTIVES = ("kernel", "feature")


@dataclass
class TrainConfig:
    w: float = 0.5
    lr: float = 4e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-3
    batch_size: int = 128
    epochs: int = 200
    warmup_steps: int = 150
    scheduler: str = "cosine"
    seed: int = 0
    objective: str = "kernel"
    k2_spec: KernelSpec | None = None
    k1_init: KernelSpec | None = None

    def __post_init__(self) -> None:
        if not self.w > 0:
            raise TrainerError(f"w must be > 0, got {self.w}")
        if not self.lr > 0:
            raise TrainerError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise TrainerError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name, beta in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0 < beta < 1:
                raise TrainerError(f"{name} must be in (0, 1), got {beta}")
        if not self.eps > 0:
            raise TrainerError(f"eps must be > 0, got {self.eps}")
        if self.batch_size < 1:
            raise TrainerError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise TrainerError(f"epochs must be >= 1, got {self.epochs}")
        if self.warmup_steps < 0:
            raise TrainerError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.scheduler not in SCHEDULERS:
            raise TrainerError(f"scheduler must be one of {SCHEDULERS}, "
                               f"got {self.scheduler!r}")
        if self.objective not in OBJECTIVES:
            raise TrainerError(f"objective must be one of {OBJECTIVES}, "
                               f"got {self.objective!r}")
        if self.seed < 0:
            raise TrainerError(f"seed must be >= 0, got {self.seed}")

    def to_json(self) -> dict:
        obj = dataclasses.asdict(self)
        obj["k2_spec"] = None if self.k2_spec is None else self.k2_spec.to_json()
        obj["k1_init"] = None if self.k1_init is None else self.k1_init.to_json()
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        kwargs = dict(obj)
        for key in ("k2_spec", "k1_init"):
            if kwargs.get(key) is not None:
                kwargs[key] = KernelSpec.from_json(kwargs[key])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise TrainerError(f"bad config: {exc}") from None


@dataclass
class TrainReport:
    history: list[LossBreakdown]
    final_params: AdapterParams
    wall_steps: int
    config: TrainConfig
    lr_history: list[float] = field(default_factory=list)
    gamma_history: list[float] = field(default_factory=list)
    coef0_history: list[float] = field(default_factory=list)
    final_R: np.ndarray | None = None

    def log_records(self) -> list[dict]:
        """One JSON-ready dict per step, the training-log line format."""
        out = []
        for step, bd in enumerate(self.history):
            out.append({"step": step, "alignment": bd.alignment,
                        "regularization": bd.regularization, "total": bd.total,
                        "lr": self.lr_history[step],
                        "gamma": self.gamma_history[step],
                        "coef0": self.coef0_history[step]})
        return out


def lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Scheduled lr at a 0-based step index."""
    if total_steps <= config.warmup_steps:
        raise TrainerError(f"total steps ({total_steps}) must exceed "
                           f"warmup_steps ({config.warmup_steps})")
    if not 0 <= step <= total_steps:
        raise TrainerError(f"step {step} outside [0, {total_steps}]")
    if step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    if config.scheduler == "constant":
        return config.lr
    progress = (step - config.warmup_steps) / (total_steps - config.warmup_steps)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    """First/second-moment accumulators, one slot per parameter block."""
    m: dict
    v: dict

    @classmethod
    def init(cls, params: AdapterParams, R: np.ndarray | None = None) -> "AdamState":
        m = {"W": np.zeros_like(params.W), "b": np.zeros_like(params.b),
             "log_gamma": 0.0, "coef0": 0.0}
        v = {k: (np.zeros_like(val) if isinstance(val, np.ndarray) else 0.0)
             for k, val in m.items()}
        if R is not None:
            m["R"] = np.zeros_like(R)
            v["R"] = np.zeros_like(R)
        return cls(m=m, v=v)


def _adam_delta(state: AdamState, key: str, grad, step_index: int,
                config: TrainConfig):
    state.m[key] = config.beta1 * state.m[key] + (1 - config.beta1) * grad
    state.v[key] = config.beta2 * state.v[key] + (1 - config.beta2) * grad ** 2
    bc1 = 1 - config.beta1 ** step_index
    bc2 = 1 - config.beta2 ** step_index
    return (state.m[key] / bc1) / (np.sqrt(state.v[key] / bc2) + config.eps)


def adamw_step(params: AdapterParams, grads: GradientBundle, state: AdamState,
               step_index: int, lr_now: float, config: TrainConfig,
               ) -> tuple[AdapterParams, AdamState]:
    """One decoupled-weight-decay Adam update, in place.

    Weight decay applies to W and b only; coef0 is clamped to >= 0 after
    the step.
    """
    if step_index < 1:
        raise TrainerError(f"step_index must be >= 1, got {step_index}")
    wd = config.weight_decay
    new_W = params.W - lr_now * (_adam_delta(state, "W", grads.dW, step_index, config)
                                 + wd * params.W)
    new_b = params.b - lr_now * (_adam_delta(state, "b", grads.db, step_index, config)
                                 + wd * params.b)
    new_lg = params.log_gamma - lr_now * _adam_delta(
        state, "log_gamma", grads.dlog_gamma, step_index, config)
    new_c0 = params.coef0 - lr_now * _adam_delta(
        state, "coef0", grads.dcoef0, step_index, config)
    for name, val in (("W", new_W), ("b", new_b),
                      ("log_gamma", new_lg), ("coef0", new_c0)):
        if not np.all(np.isfinite(val)):
            raise TrainerError(f"non-finite update in block {name}")
    params.W[...] = new_W
    params.b[...] = new_b
    params.log_gamma = float(new_lg)
    params.coef0 = max(float(new_c0), 0.0)
    return params, state


def _epoch_batches(rng: np.random.Generator, paired: PairedEmbeddings,
                   config: TrainConfig, steps_per_epoch: int):
    """Yield one epoch's PairBatch sequence under the epoch definition."""
    n = paired.n
    two_b = 2 * config.batch_size
    if two_b > n:
        for _ in range(steps_per_epoch):
            yield sample_pair_batch(paired, config.batch_size, rng)
        return
    perm = rng.permutation(n)
    for s in range(steps_per_epoch):
        chunk = perm[s * two_b:(s + 1) * two_b]
        b = len(chunk) // 2
        if b < 1:
            yield sample_pair_batch(paired, 1, rng)
            continue
        pairs = np.stack([chunk[:b], chunk[b:2 * b]], axis=1).astype(np.int64)
        yield PairBatch(pairs=pairs, batch_size=b)


def train(paired: PairedEmbeddings, config: TrainConfig,
          step_callback=None) -> TrainReport:
    """Run the full schedule and return params + per-step history.

    step_callback(steps_done, params), when given, runs after each update
    with the 1-based count of completed steps (checkpointing hook); it
    must not mutate params.
    """
    n, d = paired.source.n, paired.source.d
    if n < 2:
        raise TrainerError(f"need at least 2 paired rows, got {n}")
    k2 = config.k2_spec or KernelSpec(gamma=1.0 / paired.target.d)
    k1_init = config.k1_init or KernelSpec(gamma=1.0 / d)
    params = identity_params(d, log_gamma=float(np.log(k1_init.gamma)),
                             coef0=k1_init.coef0)
    R = np.zeros((d, paired.target.d)) if config.objective == "feature" else None
    state = AdamState.init(params, R)
    rng = np.random.default_rng(config.seed)

    steps_per_epoch = math.ceil(n / (2 * config.batch_size))
    total_steps = config.epochs * steps_per_epoch
    if total_steps <= config.warmup_steps:
        raise TrainerError(f"total steps ({total_steps}) must exceed "
                           f"warmup_steps ({config.warmup_steps})")

    report = TrainReport(history=[], final_params=params, wall_steps=0,
                         config=config, final_R=R)
    t = 0
    for _ in range(config.epochs):
        for batch in _epoch_batches(rng, paired, config, steps_per_epoch):
            lr_now = lr_at(config, t, total_steps)
            try:
                if config.objective == "kernel":
                    breakdown, grads = total_loss_and_grad(
                        params, paired, batch, config.w, k2, k1_template=k1_init)
                    params, state = adamw_step(params, grads, state, t + 1,
                                               lr_now, config)
                else:
                    rows = np.concatenate([batch.pairs[:, 0], batch.pairs[:, 1]])
                    breakdown, fgrads = feature_alignment_loss_and_grad(
                        params, R, paired, rows, config.w)
                    bundle = GradientBundle(dW=fgrads.dW, db=fgrads.db,
                                            dlog_gamma=0.0, dcoef0=0.0)
                    params, state = adamw_step(params, bundle, state, t + 1,
                                               lr_now, config)
                    R -= lr_now * (_adam_delta(state, "R", fgrads.dR, t + 1, config)
                                   + config.weight_decay * R)
                    if not np.isfinite(R).all():
                        raise TrainerError("non-finite update in block R")
            except Exception as exc:
                if isinstance(exc, TrainerError) and exc.report is not None:
                    raise
                raise TrainerError(f"step {t}: {exc}", report=report) from exc
            report.history.append(breakdown)
            report.lr_history.append(lr_now)
            report.gamma_history.append(params.gamma)
            report.coef0_history.append(params.coef0)
            report.wall_steps = t = t + 1
            if step_callback is not None:
                step_callback(t, params)
    return report
