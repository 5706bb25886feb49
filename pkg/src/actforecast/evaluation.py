"""Mean per-class accuracy over the p%/q% protocol, ablations and sweeps."""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .data import PROTOCOL_PQ, FeatureSequence, Sample, collate, resample_labels, split_observation
from .model import VARIANTS, ModelConfig, ModelParams, forward_full
from .train import TrainConfig, train

Predictor = Callable[[Sample], np.ndarray]


def confusion_counts(pred, gt, n_classes: int) -> np.ndarray:
    """``N x N`` counts, rows indexed by ground truth."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction length {pred.size} != ground-truth length {gt.size}")
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def per_class_from_confusion(conf: np.ndarray) -> tuple[float, np.ndarray]:
    counts = conf.sum(axis=1)
    present = counts > 0
    acc = np.full(conf.shape[0], np.nan)
    acc[present] = np.diag(conf)[present] / counts[present]
    return (float(acc[present].mean()) if present.any() else float("nan")), acc


def mean_per_class_accuracy(pred, gt, n_classes: int) -> tuple[float, np.ndarray]:
    """Mean over ground-truth classes of frame accuracy; absent classes are NaN and excluded."""
    return per_class_from_confusion(confusion_counts(pred, gt, n_classes))


@dataclass
class EvalReport:
    n_classes: int
    cells: dict[tuple[int, int], float]
    cell_confusion: dict[tuple[int, int], np.ndarray]

    @property
    def confusion(self) -> np.ndarray:
        return sum(self.cell_confusion.values())

    @property
    def per_class(self) -> np.ndarray:
        return per_class_from_confusion(self.confusion)[1]

    @property
    def mean_over_cells(self) -> float:
        return float(np.mean(list(self.cells.values())))

    def to_csv(self) -> str:
        lines = ["p,q,mean_per_class_acc"] + [f"{p},{q},{acc:.6f}" for (p, q), acc in self.cells.items()]
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        obs = sorted({p for p, _ in self.cells})
        pred = sorted({q for _, q in self.cells})
        buf = io.StringIO()
        buf.write("observation (%) " + "".join(f"| {p}%".ljust(8 * len(pred) + 2) for p in obs) + "\n")
        buf.write("prediction  (%) " + "".join("| " + "".join(f"{q}%".rjust(7) + " " for q in pred) for _ in obs) + "\n")
        row = ""
        for p in obs:
            row += "| " + "".join(
                (f"{100 * self.cells[(p, q)]:7.2f} " if (p, q) in self.cells else "      - ") for q in pred)
        buf.write("accuracy        " + row + "\n")
        buf.write(f"mean over all %: {100 * self.mean_over_cells:.2f}\n")
        return buf.getvalue()


def model_predictor(params: ModelParams, cfg: ModelConfig) -> Predictor:
    def predict(batch: Sample) -> np.ndarray:
        with tn.no_grad():
            out, _ = forward_full(batch, params, cfg, training=False)
        return out.future_labels

    return predict


def evaluate(predictor: Predictor, seqs: Sequence[FeatureSequence], cfg: ModelConfig,
             pq_list: Sequence[tuple[int, int]] = PROTOCOL_PQ, batch_size: int = 64, workers: int = 1) -> EvalReport:
    """Pool confusion counts over every test sequence for each (p, q) cell.

    Step predictions are spread over the future frames by nearest-step lookup.
    Cells run concurrently when ``workers > 1``; results merge in cell order.
    """

    def cell(pq):
        conf = np.zeros((cfg.n_classes, cfg.n_classes), dtype=np.int64)
        samples = [split_observation(s, pq[0], pq[1], cfg.T_fixed, cfg.n_f) for s in seqs]
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            steps = np.asarray(predictor(collate(chunk)))
            for s, st in zip(chunk, steps):
                conf += confusion_counts(resample_labels(st, s.fut_frame_labels.size), s.fut_frame_labels, cfg.n_classes)
        return conf

    pq_list = [tuple(pq) for pq in pq_list]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            confs = list(pool.map(cell, pq_list))
    else:
        confs = [cell(pq) for pq in pq_list]
    cell_conf = dict(zip(pq_list, confs))
    cells = {pq: per_class_from_confusion(c)[0] for pq, c in cell_conf.items()}
    return EvalReport(cfg.n_classes, cells, cell_conf)


def evaluate_model(params: ModelParams, cfg: ModelConfig, seqs, pq_list=PROTOCOL_PQ, workers: int = 1) -> EvalReport:
    return evaluate(model_predictor(params, cfg), seqs, cfg, pq_list, workers=workers)


# --- ablation and sweeps ----------------------------------------------------------------

COMPONENT_ROWS = (
    ("GRU Encoder-Decoder", lambda c: True),
    ("Feat Self Att.", lambda c: c.feature_attn),
    ("Observed Classifier", lambda c: c.observed_classifier),
    ("Masking", lambda c: c.masking),
    ("Temporal Self Att.", lambda c: c.temporal_attn),
)


@dataclass
class AblationResult:
    configs: dict[str, ModelConfig]
    reports: dict[str, EvalReport]

    def to_csv(self) -> str:
        lines = ["variant,p,q,acc"]
        for name, rep in self.reports.items():
            lines += [f"{name},{p},{q},{acc:.6f}" for (p, q), acc in rep.cells.items()]
        return "\n".join(lines) + "\n"

    def table(self, dataset: str = "synthetic") -> str:
        names = list(self.reports)
        width = 8
        out = [f"{'Component':<28}" + "".join(f"{i + 1:^{width}}" for i in range(len(names)))]
        for label, active in COMPONENT_ROWS:
            out.append(f"{label:<28}" + "".join(f"{'x' if active(self.configs[n]) else '':^{width}}" for n in names))
        out.append(f"{dataset + ' (mean over all %)':<28}" + "".join(
            f"{100 * self.reports[n].mean_over_cells:^{width}.2f}" for n in names))
        out.append("")
        for i, n in enumerate(names):
            out.append(f"[{i + 1}] {n}")
            out.append(self.reports[n].table())
        return "\n".join(out)


def run_ablation(train_seqs, val_seqs, test_seqs, base_cfg: ModelConfig, train_cfg: TrainConfig,
                 variants: Sequence[str] = tuple(VARIANTS), pq_list=PROTOCOL_PQ) -> AblationResult:
    """Train and evaluate each variant with identical data and seed."""
    configs, reports = {}, {}
    for name in variants:
        cfg = base_cfg.variant(name)
        result = train(train_seqs, val_seqs, cfg, train_cfg)
        configs[name] = cfg
        reports[name] = evaluate_model(result.best_params(cfg), cfg, test_seqs, pq_list)
    return AblationResult(configs, reports)


SWEEP_GRIDS = {
    "mask": (0.0, 5.0, 10.0, 15.0, 20.0),
    "beta": (0.0, 0.1, 0.5, 1.0, 5.0),
}


@dataclass
class SweepResult:
    parameter: str
    values: list[float]
    reports: list[EvalReport]

    def to_csv(self) -> str:
        lines = [f"{self.parameter},mean_per_class_acc"]
        lines += [f"{v:g},{r.mean_over_cells:.6f}" for v, r in zip(self.values, self.reports)]
        return "\n".join(lines) + "\n"


def sweep(parameter: str, train_seqs, val_seqs, test_seqs, base_cfg: ModelConfig, train_cfg: TrainConfig,
          values: Sequence[float] | None = None, pq_list=PROTOCOL_PQ) -> SweepResult:
    """Retrain the full model at each grid point of the masking percentage or beta."""
    if parameter not in SWEEP_GRIDS:
        raise ValueError(f"unknown sweep parameter {parameter!r}; choose from {sorted(SWEEP_GRIDS)}")
    values = list(SWEEP_GRIDS[parameter] if values is None else values)
    field_name = "mask_pct" if parameter == "mask" else "beta"
    reports = []
    for v in values:
        cfg = replace(base_cfg, **{field_name: float(v)})
        result = train(train_seqs, val_seqs, cfg, train_cfg)
        reports.append(evaluate_model(result.best_params(cfg), cfg, test_seqs, pq_list))
    return SweepResult(parameter, values, reports)
