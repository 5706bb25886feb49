"""Finite-difference gradient suite over every primitive and a tiny full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .data import Sample
from .layers import FeatureAttnParams, GruParams, attention_block, bigru_encode
from .model import ModelConfig, forward_full, init_params
from .tensor import Tensor

TOLERANCE = 1e-4

TINY_MODEL = ModelConfig(d=6, d_h=4, T_fixed=4, heads=2, d_ff=5, n_classes=3, k_e=3, n_f=3,
                         dropout=0.0, mask_pct=0.0)


@dataclass
class CheckResult:
    name: str
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def _away_from_zero(rng, shape, margin=0.1):
    v = rng.standard_normal(shape)
    return np.sign(v) * (margin + np.abs(v))


def _primitive_cases(rng) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    def leaf(v):
        return Tensor(v, requires_grad=True)

    a, b = leaf(rng.standard_normal((2, 3, 4))), leaf(rng.standard_normal((4, 5)))
    row = leaf(rng.standard_normal(4))
    x = leaf(rng.standard_normal((3, 4)))
    k = leaf(_away_from_zero(rng, (3, 4)))
    gain, bias = leaf(rng.standard_normal(4)), leaf(rng.standard_normal(4))
    distinct = leaf(rng.permutation(12).reshape(2, 3, 2) * 0.1 + 0.01 * rng.standard_normal((2, 3, 2)))
    scores, labels = leaf(rng.standard_normal((2, 3, 5))), rng.integers(5, size=(2, 3))
    table, idx = leaf(rng.standard_normal((6, 3))), rng.integers(6, size=(2, 4))
    cases = {
        "add": (lambda: a + row, {"a": a, "row": row}),
        "sub": (lambda: x - row, {"x": x, "row": row}),
        "mul": (lambda: a * row, {"a": a, "row": row}),
        "matmul": (lambda: a @ b, {"a": a, "b": b}),
        "matmul_vector": (lambda: row @ b, {"row": row, "b": b}),
        "transpose": (lambda: tn.transpose(a), {"a": a}),
        "reshape": (lambda: tn.reshape(a, (6, 4)), {"a": a}),
        "sigmoid": (lambda: tn.sigmoid(x * 3.0), {"x": x}),
        "tanh": (lambda: tn.tanh(x), {"x": x}),
        "relu": (lambda: tn.relu(k), {"k": k}),
        "softmax_rows": (lambda: tn.softmax_rows(a), {"a": a}),
        "layer_norm": (lambda: tn.layer_norm(a, gain, bias), {"a": a, "gain": gain, "bias": bias}),
        "concat": (lambda: tn.concat([x, k], axis=-1), {"x": x, "k": k}),
        "stack": (lambda: tn.stack([x, k], axis=0), {"x": x, "k": k}),
        "getitem": (lambda: x[np.array([0, 2, 2]), 1:3], {"x": x}),
        "sum": (lambda: tn.sum(a * a), {"a": a}),
        "max_over_time": (lambda: tn.max_over_time(distinct), {"distinct": distinct}),
        "cross_entropy": (lambda: tn.cross_entropy(scores, labels) * 1.0, {"scores": scores}),
        "embed": (lambda: tn.embed(table, idx), {"table": table}),
    }
    gru_f, gru_b = GruParams.init(3, 2, 0, "f"), GruParams.init(3, 2, 1, "b")
    for p in (gru_f, gru_b):
        for t in p.named("g").values():
            t.data[...] = 0.6 * rng.standard_normal(t.shape)
    seq = leaf(rng.standard_normal((2, 4, 3)))
    cases["bigru"] = (lambda: bigru_encode(seq, gru_f, gru_b).H,
                      {"X": seq, **gru_f.named("fwd"), **gru_b.named("bwd")})
    attn = FeatureAttnParams.init(4, 2, 5, seed=2)
    for t in attn.named().values():
        t.data[...] += 0.3 * rng.standard_normal(t.shape)
    z = leaf(rng.standard_normal((2, 3, 4)))
    cases["attention_block"] = (lambda: attention_block(z, attn)[0], {"Z": z, **attn.named()})
    return cases


def check_primitives(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 1])
    results = []
    for name, (fn, params) in _primitive_cases(rng).items():
        # random linear read-out so every output element contributes
        weights = Tensor(np.random.default_rng([seed, 2]).standard_normal(fn().shape))
        results.append(CheckResult(name, tn.gradcheck(lambda: tn.sum(fn() * weights), params)))
    return results


def tiny_model_sample(cfg: ModelConfig, rng: np.random.Generator, batch: int = 2) -> Sample:
    return Sample(
        rng.standard_normal((batch, cfg.T_fixed, cfg.d)),
        rng.integers(cfg.n_classes, size=(batch, cfg.T_fixed)),
        rng.integers(cfg.n_classes, size=(batch, cfg.n_f)),
        [(0, 0)] * batch,
        [np.zeros(0, dtype=np.int64)] * batch,
    )


def check_model(seed: int = 0, cfg: ModelConfig = TINY_MODEL) -> CheckResult:
    """Full forward pass and combined loss of a tiny model, teacher-forced so
    the loss is smooth in every parameter."""
    rng = np.random.default_rng([seed, 3])
    params = init_params(cfg, seed)
    for t in params.named().values():
        t.data[...] += 0.3 * rng.standard_normal(t.shape)
    sample = tiny_model_sample(cfg, rng)
    errors = tn.gradcheck(lambda: forward_full(sample, params, cfg, training=False, teacher_forcing=True)[1],
                          params.named())
    return CheckResult(f"tiny_model(seed={seed}, {params.n_parameters()} params)", errors)


def run_suite(seed: int = 0) -> list[CheckResult]:
    return check_primitives(seed) + [check_model(seed)]
