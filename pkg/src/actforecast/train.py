"""Mini-batch Adam on the combined loss, with early stopping and resumable state."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensor as tn
from .data import PROTOCOL_PQ, DatasetManifest, FeatureSequence, Sample, collate, split_observation
from .errors import ConfigError
from .model import ModelConfig, ModelParams, forward_full, init_params, params_from_arrays

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    clip_norm: float | None = 5.0
    pq_schedule: tuple[tuple[int, int], ...] = PROTOCOL_PQ
    fixed_pq: tuple[int, int] | None = None  # train one model for a single (p, q)
    # feed ground truth to the decoder while training; off by default because a
    # teacher-forced decoder learns to copy its previous input and then drifts
    # when it has to consume its own greedy predictions
    teacher_forcing: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.lr < 0 or self.patience < 1 or self.max_epochs < 0:
            raise ConfigError(f"invalid training config: batch={self.batch_size} lr={self.lr} patience={self.patience}")

    @property
    def schedule(self) -> tuple[tuple[int, int], ...]:
        return (self.fixed_pq,) if self.fixed_pq is not None else tuple(self.pq_schedule)


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    best_val: float = float("inf")
    since_best: int = 0
    best: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: ModelParams) -> TrainState:
        named = params.named()
        return cls(
            params,
            {k: np.zeros_like(t.data) for k, t in named.items()},
            {k: np.zeros_like(t.data) for k, t in named.items()},
            best={k: t.data.copy() for k, t in named.items()},
        )

    def best_params(self, cfg: ModelConfig) -> ModelParams:
        return params_from_arrays(cfg, self.best)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for k, t in self.params.named().items():
            out[f"param/{k}"] = t.data
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
            out[f"best/{k}"] = self.best[k]
        out["state/step"] = np.array(self.step, dtype=np.float64)
        out["state/epoch"] = np.array(self.epoch, dtype=np.float64)
        out["state/best_val"] = np.array(self.best_val)
        out["state/since_best"] = np.array(self.since_best, dtype=np.float64)
        return out

    @classmethod
    def from_arrays(cls, cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> TrainState:
        def section(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        params = params_from_arrays(cfg, section("param/"))
        names = params.named()
        m, v, best = section("adam_m/"), section("adam_v/"), section("best/")
        for k, t in names.items():
            for label, buf in (("adam_m", m), ("adam_v", v), ("best", best)):
                if k not in buf or buf[k].shape != t.shape:
                    raise tn.ShapeError(f"state tensor {label}/{k!r} missing or mis-shaped")
        try:
            return cls(params, m, v, int(arrays["state/step"]), int(arrays["state/epoch"]),
                       float(arrays["state/best_val"]), int(arrays["state/since_best"]), best)
        except KeyError as exc:
            raise checkpoint.CheckpointError(f"state checkpoint lacks {exc.args[0]!r}") from exc


def save_checkpoint(path, state: TrainState) -> None:
    checkpoint.save(path, state.to_arrays())


def load_checkpoint(path, cfg: ModelConfig) -> TrainState:
    return TrainState.from_arrays(cfg, checkpoint.load(path))


def save_params(path, params: ModelParams) -> None:
    checkpoint.save(path, {k: t.data for k, t in params.named().items()})


def load_params(path, cfg: ModelConfig) -> ModelParams:
    return params_from_arrays(cfg, checkpoint.load(path))


# --- optimizer --------------------------------------------------------------------------


def adam_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> TrainState:
    """Bias-corrected Adam on every parameter, in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {k!r}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for k, t in state.params.named().items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# --- training loop --------------------------------------------------------------------------


class SampleCache:
    """Observation splits per (sequence, protocol pair), computed once."""

    def __init__(self, seqs: list[FeatureSequence], cfg: ModelConfig):
        self.seqs = seqs
        self.cfg = cfg
        self._cache: dict[tuple[int, tuple[int, int]], Sample] = {}

    def get(self, i: int, pq: tuple[int, int]) -> Sample:
        key = (i, pq)
        if key not in self._cache:
            try:
                self._cache[key] = split_observation(self.seqs[i], pq[0], pq[1], self.cfg.T_fixed, self.cfg.n_f)
            except ConfigError as exc:
                raise ConfigError(f"{self.seqs[i].id}: {exc}") from exc
        return self._cache[key]


def dataset_loss(params: ModelParams, cfg: ModelConfig, cache: SampleCache, schedule, batch_size: int = 64) -> float:
    """Mean per-sample total loss in inference mode, greedy decoding, over every (sequence, pair)."""
    keys = [(i, pq) for i in range(len(cache.seqs)) for pq in schedule]
    total = 0.0
    for start in range(0, len(keys), batch_size):
        chunk = keys[start:start + batch_size]
        with tn.no_grad():
            _, loss = forward_full(collate([cache.get(i, pq) for i, pq in chunk]), params, cfg, training=False)
        total += float(loss.data) * len(chunk)
    return total / len(keys)


@dataclass
class TrainResult:
    state: TrainState
    history: list[dict[str, float]]
    stopped_early: bool

    def best_params(self, cfg: ModelConfig) -> ModelParams:
        return self.state.best_params(cfg)


def format_log_line(rec: dict[str, float]) -> str:
    return f"epoch={rec['epoch']} train_loss={rec['train_loss']:.6f} val_loss={rec['val_loss']:.6f} lr={rec['lr']:g}"


def train(train_seqs: list[FeatureSequence], val_seqs: list[FeatureSequence], model_cfg: ModelConfig,
          train_cfg: TrainConfig, out_dir=None, state: TrainState | None = None,
          on_epoch: Callable[[dict[str, float]], None] | None = None) -> TrainResult:
    """Train until ``max_epochs`` or ``patience`` epochs without validation improvement.

    Every random draw is keyed by (seed, epoch, batch), so a run resumed from
    a saved state replays the uninterrupted trajectory exactly. With no
    validation sequences the training loss drives early stopping.
    """
    if not train_seqs:
        raise ConfigError("empty train split")
    schedule = train_cfg.schedule
    cache = SampleCache(train_seqs, model_cfg)
    val_cache = SampleCache(val_seqs, model_cfg) if val_seqs else None
    if state is None:
        state = TrainState.fresh(init_params(model_cfg, train_cfg.seed))
    params = state.params
    named = params.named()
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train.log"
        # keep only lines for epochs already in the state: a fresh run starts a new log
        kept = log_path.read_text().splitlines(keepends=True)[:state.epoch] if log_path.exists() else []
        log_path.write_text("".join(kept))
    history: list[dict[str, float]] = []
    stopped = False
    n = len(train_seqs)
    while state.epoch < train_cfg.max_epochs:
        epoch = state.epoch
        rng = np.random.default_rng([train_cfg.seed, epoch])
        order = rng.permutation(n)
        pair_idx = rng.integers(len(schedule), size=n)
        running = 0.0
        for b, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            batch = collate([cache.get(int(i), schedule[pair_idx[i]]) for i in idx])
            _, loss = forward_full(batch, params, model_cfg, np.random.default_rng([train_cfg.seed, epoch, b]),
                                   training=True, teacher_forcing=train_cfg.teacher_forcing)
            params.zero_grad()
            tn.backward(loss)
            grads = {k: t.grad for k, t in named.items()}
            clip_global_norm(grads, train_cfg.clip_norm)
            adam_step(state, grads, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            running += float(loss.data) * len(idx)
        train_loss = running / n
        val_loss = dataset_loss(params, model_cfg, val_cache, schedule) if val_cache else train_loss
        state.epoch = epoch + 1
        if val_loss < state.best_val:
            state.best_val = val_loss
            state.since_best = 0
            state.best = {k: t.data.copy() for k, t in named.items()}
        else:
            state.since_best += 1
        rec = {"epoch": state.epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": train_cfg.lr}
        history.append(rec)
        log.debug(format_log_line(rec))
        if on_epoch is not None:
            on_epoch(rec)
        if out_dir is not None:
            with open(log_path, "a") as f:
                f.write(format_log_line(rec) + "\n")
            save_checkpoint(out_dir / "state.fafc", state)
            if state.since_best == 0:
                checkpoint.save(out_dir / "best.fafc", state.best)
        if state.since_best >= train_cfg.patience:
            stopped = True
            break
    return TrainResult(state, history, stopped)


def train_manifest(manifest: DatasetManifest, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None,
                   state: TrainState | None = None) -> TrainResult:
    train_seqs, val_seqs = manifest.train_val()
    return train(train_seqs, val_seqs, model_cfg, train_cfg, out_dir, state)
