"""The forecaster: masking -> (bi-GRU | self-attention) -> observed classifier
-> recurrent future decoder -> combined loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tn
from .data import Sample
from .errors import ConfigError
from .layers import (
    FeatureAttnParams,
    GruParams,
    bigru_encode,
    dropout_apply,
    embed_labels,
    feature_attention_encode,
    gru_cell_step,
    init_matrix,
    param_rng,
    temporal_attention_encode,
)
from .tensor import Tensor

# ablation component switches: (feature_attn, observed_classifier, masking, temporal_attn)
VARIANTS: dict[str, tuple[bool, bool, bool, bool]] = {
    "gru": (False, False, False, False),
    "gru+feat_att": (True, False, False, False),
    "gru+feat_att+obs": (True, True, False, False),
    "gru+feat_att+obs+mask": (True, True, True, False),
    "gru+temp_att+obs": (False, True, False, True),
}


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    d_h: int = 32
    T_fixed: int = 32
    heads: int = 2
    d_ff: int = 64
    n_classes: int = 8
    k_e: int = 16
    mask_pct: float = 10.0
    beta: float = 0.5
    dropout: float = 0.5
    n_f: int = 32
    feature_attn: bool = True
    observed_classifier: bool = True
    masking: bool = True
    temporal_attn: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_h % 2:
            raise ConfigError(f"d_h must be even (split across directions), got {self.d_h}")
        if self.feature_attn and self.temporal_attn:
            raise ConfigError("feature_attn and temporal_attn are mutually exclusive")
        if self.n_f < 1 or self.T_fixed < 1 or self.n_classes < 1:
            raise ConfigError(f"n_f, T_fixed, n_classes must be >= 1 ({self.n_f}, {self.T_fixed}, {self.n_classes})")
        if not 0 <= self.mask_pct < 100:
            raise ConfigError(f"mask percentage must be in [0, 100), got {self.mask_pct}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def uses_attention(self) -> bool:
        return self.feature_attn or self.temporal_attn

    @property
    def effective_mask(self) -> float:
        return self.mask_pct if self.masking else 0.0

    @property
    def effective_beta(self) -> float:
        return self.beta if self.observed_classifier else 0.0

    def variant(self, name: str) -> ModelConfig:
        fa, oc, mk, ta = VARIANTS[name]
        return replace(self, feature_attn=fa, observed_classifier=oc, masking=mk, temporal_attn=ta)

    @classmethod
    def published(cls, n_classes: int = 48, T_fixed: int = 32, **kw) -> ModelConfig:
        """Published sizes: I3D d=1024, d_h=512, 5 heads, d_ff=2048, 512-d label embedding."""
        base = dict(d=1024, d_h=512, T_fixed=T_fixed, heads=5, d_ff=2048, n_classes=n_classes, k_e=512,
                    mask_pct=10.0, beta=0.5, dropout=0.5)
        base.update(kw)
        return cls(**base)


@dataclass
class ModelParams:
    enc_fwd: GruParams
    enc_bwd: GruParams
    attn: FeatureAttnParams | None
    P_c: Tensor | None  # d x d_h context projection
    W_obs: Tensor  # 2 d_h x N
    dec: GruParams  # k_e -> 2 d_h
    W_fut: Tensor  # 2 d_h x N
    embedding: Tensor  # (N + 1) x k_e, last row is SOS

    def named(self) -> dict[str, Tensor]:
        out = {**self.enc_fwd.named("enc_fwd"), **self.enc_bwd.named("enc_bwd")}
        if self.attn is not None:
            out.update(self.attn.named("attn"))
            out["P_c"] = self.P_c
        out["W_obs"] = self.W_obs
        out.update(self.dec.named("dec"))
        out["W_fut"] = self.W_fut
        out["embedding"] = self.embedding
        return out

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.named().values()))

    def zero_grad(self) -> None:
        tn.zero_grads(self.named().values())


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    half = cfg.d_h // 2
    attn = P_c = None
    if cfg.feature_attn:
        attn = FeatureAttnParams.init(cfg.T_fixed, cfg.heads, cfg.d_ff, seed)
    elif cfg.temporal_attn:
        attn = FeatureAttnParams.init(cfg.d, cfg.heads, cfg.d_ff, seed)
    if attn is not None:
        P_c = init_matrix(seed, "P_c", (cfg.d, cfg.d_h))
    emb = Tensor(param_rng(seed, "embedding").uniform(-1.0, 1.0, size=(cfg.n_classes + 1, cfg.k_e)), requires_grad=True)
    return ModelParams(
        enc_fwd=GruParams.init(cfg.d, half, seed, "enc_fwd"),
        enc_bwd=GruParams.init(cfg.d, half, seed, "enc_bwd"),
        attn=attn,
        P_c=P_c,
        W_obs=init_matrix(seed, "W_obs", (2 * cfg.d_h, cfg.n_classes)),
        dec=GruParams.init(cfg.k_e, 2 * cfg.d_h, seed, "dec"),
        W_fut=init_matrix(seed, "W_fut", (2 * cfg.d_h, cfg.n_classes)),
        embedding=emb,
    )


def params_from_arrays(cfg: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelParams:
    """Build params for ``cfg`` and fill them from ``arrays``, checking every shape."""
    params = init_params(cfg)
    named = params.named()
    missing = [k for k in named if k not in arrays]
    if missing:
        raise tn.ShapeError(f"checkpoint lacks tensor {missing[0]!r}")
    for k, t in named.items():
        if arrays[k].shape != t.shape:
            raise tn.ShapeError(f"tensor {k!r}: checkpoint shape {arrays[k].shape} != model shape {t.shape}")
        t.data[...] = arrays[k]
    return params


# --- forward pieces -----------------------------------------------------------------


def mask_features(X: np.ndarray, m: float, rng: np.random.Generator | None, training: bool) -> np.ndarray:
    """Zero the full feature rows of floor(m*T/100) random distinct frames.

    Works on ``T x d`` or ``B x T x d`` (each sample drawn independently).
    """
    X = np.asarray(X)
    T = X.shape[-2]
    k = math.floor(m * T / 100)
    if not training or k == 0:
        return X
    out = X.copy()
    flat = out.reshape(-1, T, X.shape[-1])
    for b in range(flat.shape[0]):
        flat[b, rng.choice(T, size=k, replace=False)] = 0.0
    return out


@dataclass
class ObservedOutput:
    scores: Tensor  # (..., T, N)
    H: Tensor
    C_proj: Tensor | None
    h_last: Tensor
    c_max: Tensor
    attention: list[Tensor] = field(default_factory=list)


def forward_observed(X_masked, params: ModelParams, cfg: ModelConfig, rng: np.random.Generator | None = None,
                     training: bool = False) -> ObservedOutput:
    X = tn.as_tensor(X_masked)
    if X.shape[-2:] != (cfg.T_fixed, cfg.d):
        raise tn.ShapeError(f"observed input {X.shape} must end in (T_fixed={cfg.T_fixed}, d={cfg.d})")
    enc = bigru_encode(dropout_apply(X, cfg.dropout, rng, training), params.enc_fwd, params.enc_bwd)
    attention: list[Tensor] = []
    if cfg.uses_attention:
        encode = feature_attention_encode if cfg.feature_attn else temporal_attention_encode
        C, attention = encode(X, params.attn, return_attention=True, eps=cfg.ln_eps)
        C_proj = C @ params.P_c
        c_max = tn.max_over_time(C_proj)
        classifier_in = tn.concat([enc.H, C_proj], axis=-1)
    else:
        C_proj = None
        c_max = Tensor(np.zeros(enc.h_last.shape))
        classifier_in = tn.concat([enc.H, Tensor(np.zeros(enc.H.shape))], axis=-1)
    scores = classifier_in @ params.W_obs
    return ObservedOutput(scores, enc.H, C_proj, enc.h_last, c_max, attention)


def decode_future(h_last: Tensor, c_max: Tensor, params: ModelParams, cfg: ModelConfig, teacher_labels=None,
                  rng: np.random.Generator | None = None, training: bool = False) -> tuple[Tensor, np.ndarray]:
    """Unroll the decoder for ``n_f`` steps starting from SOS.

    With ``teacher_labels`` the step inputs are SOS followed by the ground
    truth; otherwise each step feeds back its own argmax.
    """
    batch_shape = h_last.shape[:-1]
    if teacher_labels is not None:
        teacher_labels = np.asarray(teacher_labels)
        if teacher_labels.shape[-1] != cfg.n_f:
            raise ConfigError(f"teacher labels have length {teacher_labels.shape[-1]}, decoder runs n_f={cfg.n_f} steps")
    h = tn.concat([h_last, c_max], axis=-1)
    prev = np.full(batch_shape, cfg.n_classes, dtype=np.intp)
    scores, labels = [], []
    for t in range(cfg.n_f):
        inp = dropout_apply(embed_labels(prev, params.embedding), cfg.dropout, rng, training)
        h = gru_cell_step(inp, h, params.dec)
        s = h @ params.W_fut
        step_labels = np.argmax(s.data, axis=-1)
        scores.append(s)
        labels.append(step_labels)
        prev = teacher_labels[..., t] if teacher_labels is not None else step_labels
    return tn.stack(scores, axis=-2), np.stack(labels, axis=-1)


def total_loss(observed_scores: Tensor | None, future_scores: Tensor, observed_labels, future_labels, beta: float) -> Tensor:
    """Sum of future CE plus ``beta`` times summed observed CE, per sample;
    averaged over the batch when the scores carry a batch axis."""
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    loss = tn.cross_entropy(future_scores, future_labels)
    if observed_scores is not None:
        loss = loss + tn.cross_entropy(observed_scores, observed_labels) * beta
    if future_scores.ndim == 3:
        loss = loss * (1.0 / future_scores.shape[0])
    return loss


@dataclass
class ForecastOutput:
    observed_scores: np.ndarray
    future_scores: np.ndarray
    future_labels: np.ndarray


def forward_full(sample: Sample, params: ModelParams, cfg: ModelConfig, rng: np.random.Generator | None = None,
                 training: bool = False, teacher_forcing: bool | None = None) -> tuple[ForecastOutput, Tensor]:
    """Masking, encoders, observed classifier, decoder and loss in one pass.

    ``teacher_forcing`` defaults to ``training``. Masking, encoder dropout and
    decoder dropout draw from separate child streams of ``rng``.
    """
    if teacher_forcing is None:
        teacher_forcing = training
    if training and rng is None:
        raise ValueError("training forward needs an rng")
    mask_rng, enc_rng, dec_rng = rng.spawn(3) if rng is not None else (None, None, None)
    X = mask_features(sample.X_obs, cfg.effective_mask, mask_rng, training)
    obs = forward_observed(X, params, cfg, enc_rng, training)
    fut_scores, fut_labels = decode_future(obs.h_last, obs.c_max, params, cfg,
                                           sample.fut_labels if teacher_forcing else None, dec_rng, training)
    loss = total_loss(obs.scores if cfg.observed_classifier else None, fut_scores,
                      sample.obs_labels, sample.fut_labels, cfg.effective_beta)
    return ForecastOutput(obs.scores.data, fut_scores.data, fut_labels), loss
