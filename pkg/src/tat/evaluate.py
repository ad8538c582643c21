"""Open-set inference, per-class reports, multi-seed aggregation and TAG export."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tat.data import CLASS_INDEX, CLASSES, normalize
from tat.model import TagState, TatModel, forward

DEFAULT_TAU = 0.8


@dataclass
class OpenSetPrediction:
    probs: np.ndarray  # [p_CN, p_MCI]
    entropy: float  # base 2, in [0, 1]
    predicted: str


def entropy2(probs: np.ndarray) -> np.ndarray:
    """Base-2 Shannon entropy along the last axis with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def open_set_labels(probs: np.ndarray, tau: float) -> np.ndarray:
    """Class indices (0 CN, 1 MCI, 2 LBD): LBD iff entropy > tau, else argmax."""
    h = entropy2(probs)
    pred = np.argmax(probs, axis=-1)
    return np.where(h > tau, CLASS_INDEX["LBD"], pred)


def predict_open_set(logits, tau: float = DEFAULT_TAU) -> OpenSetPrediction:
    if not (0.0 <= tau <= 1.0 or math.isinf(tau)):
        raise ValueError(f"tau must lie in [0, 1] (or be infinite), got {tau}")
    probs = _softmax(np.asarray(logits, dtype=np.float64).reshape(-1))
    h = float(entropy2(probs))
    label = CLASSES[int(open_set_labels(probs[None, :], tau)[0])]
    return OpenSetPrediction(probs, h, label)


@dataclass
class RunReport:
    """Per-class accuracy in percent (``nan`` when the class is absent)."""

    accuracy: dict[str, float]
    confusion: np.ndarray  # 3 x 3, rows = true class, columns = predicted
    seed: int = 0
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def known_mean(self) -> float:
        """Mean of the CN and MCI per-class accuracies."""
        return float(np.mean([self.accuracy["CN"], self.accuracy["MCI"]]))

    @property
    def combined_mean(self) -> float:
        """Mean of the CN, MCI and LBD per-class accuracies."""
        return float(np.mean([self.accuracy[c] for c in CLASSES]))


def report_from_predictions(true_idx, pred_idx, seed=0, config_hash="") -> RunReport:
    true_idx = np.asarray(true_idx, dtype=np.int64)
    pred_idx = np.asarray(pred_idx, dtype=np.int64)
    conf = np.zeros((3, 3), dtype=np.int64)
    np.add.at(conf, (true_idx, pred_idx), 1)
    acc = {}
    for c, name in enumerate(CLASSES):
        n = conf[c].sum()
        acc[name] = 100.0 * conf[c, c] / n if n else float("nan")
    return RunReport(acc, conf, seed, config_hash)


def predict_probs(model: TatModel, tag_state: TagState, samples, batch_size: int = 64):
    """Softmax class probabilities and transferability scores for ``samples``."""
    dt = model.config.np_dtype
    probs, scores = [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        x = np.stack([normalize(s.matrix) for s in chunk]).astype(dt)
        out = forward(model, tag_state, x)
        probs.append(_softmax(out.logits.data))
        scores.append(np.asarray(out.scores, dtype=np.float64))
    return np.concatenate(probs), np.concatenate(scores)


def evaluate(model: TatModel, tag_state: TagState, target_samples, tau: float = DEFAULT_TAU, seed=0, config_hash="") -> RunReport:
    """Score open-set predictions on labelled target samples."""
    labelled = [s for s in target_samples if s.label in CLASS_INDEX]
    if not labelled:
        raise ValueError("evaluation needs target samples with ground-truth labels")
    probs, _ = predict_probs(model, tag_state, labelled)
    pred = open_set_labels(probs, tau)
    true = [CLASS_INDEX[s.label] for s in labelled]
    return report_from_predictions(true, pred, seed, config_hash)


def config_hash(payload: dict) -> str:
    """Stable short hash of a config dict, ignoring the seed."""
    clean = {k: v for k, v in payload.items() if k != "seed"}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Summary:
    mean: dict[str, float]
    std: dict[str, float]
    n_runs: int
    config_hash: str

    def format_row(self) -> list[str]:
        return [format_mean_std(self.mean[c], self.std[c]) for c in CLASSES]


def format_mean_std(mean: float, std: float) -> str:
    if math.isnan(mean):
        return "N/A"
    return f"{mean:.1f} ± {std:.1f}"


def aggregate_runs(reports: list[RunReport]) -> Summary:
    """Per-class mean and sample standard deviation (n - 1) over runs."""
    if len(reports) < 2:
        raise ValueError("aggregation needs at least two runs")
    hashes = {r.config_hash for r in reports}
    if len(hashes) != 1:
        raise ValueError(f"cannot aggregate runs with different configs: {sorted(hashes)}")
    mean, std = {}, {}
    for c in CLASSES:
        vals = np.array(sorted(r.accuracy[c] for r in reports), dtype=np.float64)
        mean[c] = float(vals.mean())
        std[c] = float(vals.std(ddof=1))
    return Summary(mean, std, len(reports), hashes.pop())


def write_summary_csv(path, summary: Summary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "mean", "std", "n_runs"])
        for c in CLASSES:
            w.writerow([c, repr(float(summary.mean[c])), repr(float(summary.std[c])), summary.n_runs])


def write_report_csv(path, report: RunReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "accuracy", "count"])
        for i, c in enumerate(CLASSES):
            w.writerow([c, repr(float(report.accuracy[c])), int(report.confusion[i].sum())])


def write_confusion_csv(path, report: RunReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(CLASSES))
        for i, c in enumerate(CLASSES):
            w.writerow([c] + [int(v) for v in report.confusion[i]])


# --------------------------------------------------------------------------
# TAG export
# --------------------------------------------------------------------------


def export_tag(tag_state: TagState, path_prefix) -> tuple[Path, Path]:
    """Write ``A.csv`` (``%.17g``) and ``A.pgm`` (binary P5, ``round(255 A)``)."""
    prefix = Path(path_prefix)
    prefix.mkdir(parents=True, exist_ok=True)
    a = np.asarray(tag_state.a, dtype=np.float64)
    csv_path = prefix / "A.csv"
    pgm_path = prefix / "A.pgm"
    np.savetxt(csv_path, a, fmt="%.17g", delimiter=",")
    pixels = np.clip(np.rint(255.0 * a), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    pgm_path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return csv_path, pgm_path


def read_tag_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def pair_means(a: np.ndarray, transferable: set[int]) -> tuple[float, float]:
    """Mean adjacency over transferable-transferable pairs and over shifted-shifted pairs."""
    p = a.shape[0]
    t = np.zeros(p, dtype=bool)
    t[sorted(transferable)] = True
    return float(a[np.ix_(t, t)].mean()), float(a[np.ix_(~t, ~t)].mean())
