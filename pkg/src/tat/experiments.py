"""Multi-seed experiment runner with an on-disk cache of training runs.

A *run* is one training job (synthetic config + train config incl. seed). Its
cached record keeps the target-domain class probabilities, so any number of
entropy thresholds can be scored without retraining. A *cell* is a run
configuration plus a threshold, evaluated over several seeds.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from tat.data import CLASS_INDEX, SyntheticConfig, generate_synthetic, split_domains
from tat.evaluate import RunReport, aggregate_runs, config_hash, open_set_labels, predict_probs, report_from_predictions
from tat.train import TrainConfig, train

DEFAULT_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class Cell:
    name: str
    overrides: dict = field(default_factory=dict)
    tau: float = 0.8


# Rows of the loss-weight/threshold sweep and of the component ablation.
SWEEP_CELLS = (
    Cell("a1.0_b0.1_t0.8", {"alpha": 1.0, "beta": 0.1}, 0.8),
    Cell("a0.1_b0.01_t0.8", {"alpha": 0.1, "beta": 0.01}, 0.8),
    Cell("a1.0_b0.01_t0.7", {"alpha": 1.0, "beta": 0.01}, 0.7),
)
ABLATION_CELLS = (
    Cell("tat", {}, 0.8),
    Cell("wo_gd", {"alpha": 0.0}, 0.8),
    Cell("wo_ld", {"beta": 0.0, "use_local": False}, 0.8),
)
BASELINE_CELL = Cell("source_only", {"alpha": 0.0, "beta": 0.0, "use_local": False}, math.inf)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def run_key(syn: SyntheticConfig, tc: TrainConfig) -> str:
    payload = {"synthetic": asdict(syn), "train": tc.to_dict()}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:20]


def patch_score_ranking(scores: np.ndarray, transferable: set[int]) -> dict:
    """Compare per-patch mean scores on transferable vs shifted patches."""
    per_patch = scores.mean(axis=0)
    ind = np.zeros(per_patch.size)
    ind[sorted(transferable)] = 1.0
    if np.ptp(per_patch) == 0:
        rho = float("nan")
    else:
        rho = float(spearmanr(per_patch, ind).statistic)
    return {
        "score_transferable": float(per_patch[ind == 1].mean()),
        "score_shifted": float(per_patch[ind == 0].mean()),
        "spearman": rho,
    }


def execute_run(syn: SyntheticConfig, tc: TrainConfig) -> dict:
    """Train once and summarise everything later cells need."""
    samples, truth = generate_synthetic(syn)
    _, tgt = split_domains(samples)
    labelled = [s for s in tgt if s.label in CLASS_INDEX]
    t0 = time.perf_counter()
    res = train(tc, samples, patch_size=syn.patch_size)
    probs, scores = predict_probs(res.model, res.tag_state, labelled)
    elapsed = time.perf_counter() - t0
    tail = res.log[-100:]
    a = res.tag_state.a
    t = np.zeros(a.shape[0], dtype=bool)
    t[sorted(truth)] = True
    return {
        "key": run_key(syn, tc),
        "synthetic": asdict(syn),
        "train": tc.to_dict(),
        "true": [CLASS_INDEX[s.label] for s in labelled],
        "probs": probs.tolist(),
        **patch_score_ranking(scores, truth),
        "tag_transferable": float(a[np.ix_(t, t)].mean()),
        "tag_shifted": float(a[np.ix_(~t, ~t)].mean()),
        "loss_pat_tail": float(np.mean([r["loss_pat"] for r in tail])),
        "loss_clc_tail": float(np.mean([r["loss_clc"] for r in tail])),
        "loss_dis_tail": float(np.mean([r["loss_dis"] for r in tail])),
        "seconds": elapsed,
    }


def _cached_run(args) -> dict:
    cache_dir, syn, tc = args
    path = Path(cache_dir) / f"run_{run_key(syn, tc)}.json"
    if path.exists():
        return json.loads(path.read_text())
    record = execute_run(syn, tc)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record, default=_json_default))
    tmp.replace(path)
    return record


def run_many(jobs: list[tuple[SyntheticConfig, TrainConfig]], cache_dir, n_workers: int = 1) -> list[dict]:
    """Run (or load) every job; the cache makes reruns free."""
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    args = [(str(cache_dir), s, t) for s, t in jobs]
    if n_workers <= 1:
        return [_cached_run(a) for a in args]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_cached_run, args))


def report_for(record: dict, tau: float, seed: int, chash: str) -> RunReport:
    probs = np.asarray(record["probs"], dtype=np.float64)
    pred = open_set_labels(probs, tau)
    return report_from_predictions(record["true"], pred, seed, chash)


@dataclass
class CellResult:
    cell: Cell
    reports: list[RunReport]
    records: list[dict]

    @property
    def summary(self):
        return aggregate_runs(self.reports)

    def mean_of(self, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.reports]))

    def record_mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.records]))


def run_cells(cells, syn: SyntheticConfig, base: TrainConfig, seeds=DEFAULT_SEEDS, cache_dir="tat_cache", n_workers=1):
    """Evaluate each cell over ``seeds``; identical training configs are shared."""
    jobs, index = [], {}
    for cell in cells:
        for seed in seeds:
            tc = replace(base, **cell.overrides, seed=seed)
            key = run_key(syn, tc)
            if key not in index:
                index[key] = len(jobs)
                jobs.append((syn, tc))
    records = run_many(jobs, cache_dir, n_workers)
    out = {}
    for cell in cells:
        reps, recs = [], []
        tc0 = replace(base, **cell.overrides)
        chash = config_hash({**tc0.to_dict(), "tau": repr(cell.tau), "synthetic": asdict(syn)})
        for seed in seeds:
            rec = records[index[run_key(syn, replace(base, **cell.overrides, seed=seed))]]
            reps.append(report_for(rec, cell.tau, seed, chash))
            recs.append(rec)
        out[cell.name] = CellResult(cell, reps, recs)
    return out
