"""Joint two-pass training: AdamW, warmup + linear-decay schedule, gradient
aggregation into a single backward, and the overfit sanity harness.

A step encodes the image batch once, runs the contrastive and generative
passes over the shared decoder, combines both objectives into one scalar
(so gradients aggregate on the tape), then clips and applies one optimizer
update. All per-step randomness is a pure function of (seed, step), which
makes checkpoint resume bit-exact.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import tensor as T
from .data import Batch, SceneConfig, Vocabulary, make_batch
from .model import Mammut

_BATCH_SALT = 0xBA7C
_CROP_SALT = 0xC401
_CPE_SALT = 0xC93E


class NanGradientError(RuntimeError):
    """A parameter gradient came out non-finite."""


class DivergenceError(RuntimeError):
    """Training loss exceeded the divergence bound."""


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    total_steps: int
    peak_lr: float

    def __post_init__(self):
        if not (0 < self.warmup_steps < self.total_steps):
            raise ValueError(
                f"need 0 < warmup {self.warmup_steps} < total {self.total_steps}")


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear 0 -> peak over warmup, then linear peak -> 0 at total_steps."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    return schedule.peak_lr * (schedule.total_steps - step) / span


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Decay applies to matrices and embeddings (ndim >= 2); biases, gains,
    gates, and the temperature are exempt. Moments and the gathered gradient
    live in flat arenas so the update runs as a handful of fused array ops
    instead of one pass per parameter.
    """

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.names = list(params)
        dtype = next(iter(params.values())).data.dtype if params else np.float32
        total = 0
        self.slices: dict[str, slice] = {}
        for n in self.names:
            size = params[n].data.size
            self.slices[n] = slice(total, total + size)
            total += size
        self.m = np.zeros(total, dtype=dtype)
        self.v = np.zeros(total, dtype=dtype)
        self._g = np.zeros(total, dtype=dtype)
        self._scratch = np.empty(total, dtype=dtype)
        self.decay_mask = np.zeros(total, dtype=dtype)
        for n in self.names:
            if self.decayed(n):
                self.decay_mask[self.slices[n]] = 1.0

    def decayed(self, name: str) -> bool:
        return self.params[name].data.ndim >= 2

    def _gather_grads(self) -> np.ndarray:
        g = self._g
        for n in self.names:
            p = self.params[n]
            seg = g[self.slices[n]]
            if p.grad is None:
                seg[:] = 0.0
            else:
                seg[:] = p.grad.reshape(-1)
        if not np.isfinite(g).all():
            for n in self.names:
                pg = self.params[n].grad
                if pg is not None and not np.isfinite(pg).all():
                    raise NanGradientError(f"non-finite gradient in {n!r}")
            raise NanGradientError("non-finite gradient")
        return g

    def step(self, lr: float) -> None:
        """One update from the grads currently stored on the parameters."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        g = self._gather_grads()
        m, v, upd = self.m, self.v, self._scratch
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        g *= g
        g *= 1.0 - self.beta2
        v += g
        # update = lr * (m / c1) / (sqrt(v / c2) + eps)
        np.sqrt(v, out=upd)
        upd /= np.sqrt(c2)
        upd += self.eps
        np.divide(m, upd, out=upd)
        upd *= lr / c1
        decay = lr * self.weight_decay
        for n in self.names:
            p = self.params[n]
            sl = self.slices[n]
            if decay and self.decay_mask[sl.start]:
                p.data *= 1.0 - decay
            p.data -= upd[sl].reshape(p.data.shape)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.names:
            sl = self.slices[n]
            shape = self.params[n].data.shape
            out[f"m.{n}"] = self.m[sl].reshape(shape).copy()
            out[f"v.{n}"] = self.v[sl].reshape(shape).copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        for n in self.names:
            sl = self.slices[n]
            self.m[sl] = arrays[f"m.{n}"].reshape(-1).astype(self.m.dtype)
            self.v[sl] = arrays[f"v.{n}"].reshape(-1).astype(self.v.dtype)
        self.step_count = step


def clip_gradients(params: dict, max_norm: float = 1.0) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            flat = p.grad.reshape(-1)
            total += float(flat @ flat)
    norm = float(np.sqrt(total))
    if norm > max_norm:
        s = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= s
    return norm


@dataclass
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 20_000
    warmup_steps: int = 500
    peak_lr: float = 3e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0
    use_focal: bool = True  # False falls back to the softmax contrastive loss
    aggregation: str = "joint"  # or "alternating": one backward per objective
    cpe_enabled: bool = False
    cpe_upsample: int = 0  # 0 -> 2 * patch_grid
    checkpoint_every: int = 1000

    def schedule(self) -> Schedule:
        return Schedule(self.warmup_steps, self.total_steps, self.peak_lr)


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss_total: float
    loss_cap: float
    loss_focal: float
    tau: float
    grad_norm: float

    CSV_HEADER = "step,lr,loss_total,loss_cap,loss_focal,tau,grad_norm"

    def csv(self) -> str:
        return (f"{self.step},{self.lr:.8g},{self.loss_total:.8g},"
                f"{self.loss_cap:.8g},{self.loss_focal:.8g},"
                f"{self.tau:.8g},{self.grad_norm:.8g}")


class MetricsWriter:
    """One CSV line per step, streamed to a file and optionally stdout."""

    def __init__(self, path=None, echo: bool = True):
        self._fh = open(path, "a") if path else None
        self._echo = echo
        self._wrote_header = False

    def write(self, m: StepMetrics) -> None:
        if not self._wrote_header:
            self._emit(StepMetrics.CSV_HEADER)
            self._wrote_header = True
        self._emit(m.csv())

    def _emit(self, line: str) -> None:
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()
        if self._echo:
            sys.stdout.write(line + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


@dataclass
class TrainCorpus:
    """Accepted train-split seeds plus object-count buckets for batching."""

    seeds: np.ndarray
    buckets: dict[int, np.ndarray]

    @classmethod
    def build(cls, scene_cfg: SceneConfig, size: int) -> "TrainCorpus":
        from .data import seeds_by_object_count, split_seeds

        seeds = np.asarray(split_seeds("train", scene_cfg, size))
        return cls(seeds=seeds, buckets=seeds_by_object_count(seeds, scene_cfg))


def batch_seeds_for_step(corpus: TrainCorpus, batch_size: int, seed: int,
                         step: int, mix_every: int = 4) -> np.ndarray:
    """Stateless with-replacement sampling, a pure function of (seed, step).

    Most steps draw from one object-count bucket (shorter captions run a
    shorter decoder); every mix_every-th step draws from the full corpus so
    contrastive batches also contain cross-length negatives.
    """
    rng = np.random.default_rng([seed, step, _BATCH_SALT])
    if mix_every and (step + 1) % mix_every == 0:
        return corpus.seeds[rng.integers(0, len(corpus.seeds), size=batch_size)]
    counts = sorted(corpus.buckets)
    sizes = np.array([len(corpus.buckets[n]) for n in counts], dtype=np.float64)
    n = counts[int(rng.choice(len(counts), p=sizes / sizes.sum()))]
    bucket = corpus.buckets[n]
    return bucket[rng.integers(0, len(bucket), size=batch_size)]


def training_batch(scene_cfg: SceneConfig, vocab: Vocabulary,
                   corpus: TrainCorpus, cfg: TrainConfig, step: int) -> Batch:
    seeds = batch_seeds_for_step(corpus, cfg.batch_size, cfg.seed, step)
    crop_rng = np.random.default_rng([cfg.seed, step, _CROP_SALT])
    return make_batch(scene_cfg, vocab, seeds, max_text_len=None, rng=crop_rng)


def _forward_terms(model: Mammut, batch: Batch, weights: losses.LossWeights,
                   use_focal: bool, pos_grid=None):
    vis, v = model.encode_and_pool(batch.patches, pos_grid)
    l, logits = model.joint_passes(batch.tokens, vis)
    cap = losses.captioning_loss(logits, batch.tokens)
    tau = model.temperature()
    if use_focal:
        con = losses.focal_contrastive_loss(v, l, tau, weights.gamma)
    else:
        con = losses.contrastive_loss(v, l, tau)
    return cap, con


def _cpe_grid(model: Mammut, cfg: TrainConfig, step: int):
    from .data import cropped_positional_embedding, sample_crop_rect

    g = model.config.patch_grid
    up = cfg.cpe_upsample or 2 * g
    rng = np.random.default_rng([cfg.seed, step, _CPE_SALT])
    rect = sample_crop_rect(up, rng)
    return cropped_positional_embedding(model.params["enc.pos_grid"], up, rect, g)


def train_step(model: Mammut, batch: Batch, weights: losses.LossWeights,
               optimizer: AdamW, schedule: Schedule, step: int,
               cfg: TrainConfig | None = None) -> StepMetrics:
    """One optimizer update from both objectives on a shared image encoding."""
    if batch.tokens.batch < 2:
        raise ValueError("training needs batch size >= 2 (contrastive negatives)")
    cfg = cfg or TrainConfig(total_steps=schedule.total_steps,
                             warmup_steps=schedule.warmup_steps,
                             peak_lr=schedule.peak_lr)
    lr = lr_at(min(step + 1, schedule.total_steps), schedule)
    pos_grid = _cpe_grid(model, cfg, step) if cfg.cpe_enabled else None

    model.zero_grad()
    cap, con = _forward_terms(model, batch, weights, cfg.use_focal, pos_grid)
    if cfg.aggregation == "alternating":
        # study mode: independent backward per objective, still one update
        T.backward(T.scale(con, weights.focal))
        T.backward(T.scale(cap, weights.caption))
        total_val = (weights.caption * cap.item() + weights.focal * con.item())
    else:
        total = losses.total_loss(cap, con, weights)
        T.backward(total)
        total_val = total.item()
    norm = clip_gradients(model.params, cfg.clip_norm)
    optimizer.step(lr)
    return StepMetrics(step=step, lr=lr, loss_total=total_val,
                       loss_cap=cap.item(), loss_focal=con.item(),
                       tau=float(np.exp(model.params["log_tau"].data)),
                       grad_norm=norm)


def overfit_single_batch(model: Mammut, batch: Batch, steps: int,
                         weights: losses.LossWeights | None = None,
                         lr: float = 1e-2,
                         use_focal: bool = True) -> list[StepMetrics]:
    """Drive one fixed batch of <= 8 pairs to convergence; returns the loss
    trajectory. Aborts if the total ever exceeds 10x its initial value."""
    if batch.tokens.batch > 8:
        raise ValueError("overfit harness expects a batch of at most 8 pairs")
    weights = weights or losses.LossWeights()
    # near-constant learning rate: short warmup, decay stretched far out
    schedule = Schedule(warmup_steps=max(1, steps // 20),
                        total_steps=max(20 * steps, 40), peak_lr=lr)
    optimizer = AdamW(model.params)
    cfg = TrainConfig(total_steps=schedule.total_steps,
                      warmup_steps=schedule.warmup_steps, peak_lr=lr,
                      use_focal=use_focal)
    trajectory: list[StepMetrics] = []
    initial = None
    for step in range(steps):
        m = train_step(model, batch, weights, optimizer, schedule, step, cfg)
        trajectory.append(m)
        if initial is None:
            initial = m.loss_total
        elif initial > 0 and m.loss_total > 10 * initial:
            raise DivergenceError(
                f"loss {m.loss_total:.4g} exceeded 10x initial {initial:.4g} "
                f"at step {step}")
    return trajectory


def focal_loss_floor(batch_size: int, gamma: float) -> float:
    """Analytic minimum of the focal contrastive term: saturated logits
    drive every pair probability to 1, so the floor is exactly 0."""
    return 0.0
