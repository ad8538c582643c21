"""``tat`` command-line entry point.

Configuration is one JSON file with optional ``seed``, ``synthetic``,
``train`` and ``eval`` sections; flags override it. Seed precedence is
``--seed``, then the file's ``seed``, then ``$TAT_SEED``, then 0. Section
seeds that are not given explicitly inherit that root seed.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from tat import autodiff as ad
from tat.data import DataError, SyntheticConfig, generate_synthetic, load_dataset, split_domains, write_dataset
from tat.evaluate import (
    evaluate,
    export_tag,
    write_confusion_csv,
    write_report_csv,
    write_summary_csv,
)
from tat.experiments import ABLATION_CELLS, BASELINE_CELL, SWEEP_CELLS, Cell, run_cells
from tat.layers import ConfigError
from tat.model import CheckpointError, ModelConfig, TagState, TatModel, forward, load_checkpoint, save_checkpoint
from tat.train import TrainConfig, TrainingDiverged, loss_clc, loss_dis, loss_pat, total_loss, train, write_log

log = logging.getLogger("tat")

GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


def _section_fields(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(cfg) - {"seed", "synthetic", "train", "eval"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def root_seed(cfg: dict, flag) -> int:
    if flag is not None:
        return int(flag)
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("TAT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"TAT_SEED must be an integer, got {env!r}") from exc
    return 0


def resolve(cfg: dict, seed_flag=None) -> dict:
    """Fill every section with defaults so the stored config is complete."""
    seed = root_seed(cfg, seed_flag)
    syn_in = dict(cfg.get("synthetic", {}))
    tr_in = dict(cfg.get("train", {}))
    for name, section, cls in (("synthetic", syn_in, SyntheticConfig), ("train", tr_in, TrainConfig)):
        unknown = set(section) - _section_fields(cls)
        if unknown:
            raise UsageError(f"unknown {name} keys: {sorted(unknown)}")
    syn_in.setdefault("seed", seed)
    tr_in.setdefault("seed", seed)
    try:
        syn = SyntheticConfig(**syn_in)
        syn.validate()
        tr = TrainConfig(**tr_in)
    except (DataError, ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    ev = {"tau": 0.8, **cfg.get("eval", {})}
    return {"seed": seed, "synthetic": asdict(syn), "train": tr.to_dict(), "eval": ev}


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _tau(value) -> float:
    if isinstance(value, str):
        value = float(value)
    tau = float(value)
    if not (math.isinf(tau) or 0.0 <= tau <= 1.0):
        raise UsageError(f"tau must lie in [0, 1] or be inf, got {value}")
    return tau


def _load_samples(path):
    try:
        return load_dataset(path)
    except DataError as exc:
        raise UsageError(str(exc)) from exc


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    resolved = resolve(load_config(args.config), args.seed)
    syn = SyntheticConfig(**resolved["synthetic"])
    samples, truth = generate_synthetic(syn)
    out = Path(args.out)
    write_dataset(out, samples, truth, syn)
    _write_json(out / "config.json", resolved)
    n_src = sum(s.domain == "source" for s in samples)
    print(f"wrote {n_src} source + {len(samples) - n_src} target matrices to {out}")
    return 0


def cmd_train(args) -> int:
    resolved = resolve(load_config(args.config), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved)
    tc = TrainConfig(**resolved["train"])
    if args.data:
        samples = _load_samples(args.data)
        patch = resolved["synthetic"]["patch_size"]
    else:
        syn = SyntheticConfig(**resolved["synthetic"])
        samples, _ = generate_synthetic(syn)
        patch = syn.patch_size
    t0 = time.perf_counter()
    try:
        res = train(tc, samples, patch_size=patch, progress_every=args.progress)
    except TrainingDiverged as exc:
        _write_json(out / "diverged.json", exc.diagnostics)
        raise
    write_log(out / "log.csv", res.log)
    save_checkpoint(
        out / "model.ckpt", res.model, res.tag_state, res.optimizer.velocities, res.optimizer.step,
        extra={"config": resolved},
    )
    _write_json(out / "meta.json", {"seconds": time.perf_counter() - t0, "finished": time.strftime("%Y-%m-%dT%H:%M:%S")})
    last = res.log[-1]
    print(f"trained {tc.total_steps} steps: final loss {last['loss_total']:.4f}, checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    tau = _tau(args.tau if args.tau is not None else ckpt.extra.get("config", {}).get("eval", {}).get("tau", 0.8))
    samples = _load_samples(args.data)
    _, tgt = split_domains(samples)
    report = evaluate(ckpt.model, ckpt.tag_state, tgt, tau)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(out / "report.csv", report)
    write_confusion_csv(out / "confusion.csv", report)
    acc = report.accuracy
    print(f"tau={tau}: CN {acc['CN']:.1f}  MCI {acc['MCI']:.1f}  LBD {acc['LBD']:.1f}  (known {report.known_mean:.1f})")
    return 0


def _parse_cells(grid: dict) -> list[Cell]:
    cells = []
    for row in grid.get("cells", []):
        row = dict(row)
        name = row.pop("name")
        tau = _tau(row.pop("tau", 0.8))
        unknown = set(row) - _section_fields(TrainConfig)
        if unknown:
            raise UsageError(f"cell {name}: unknown keys {sorted(unknown)}")
        cells.append(Cell(name, row, tau))
    return cells


def cmd_ablate(args) -> int:
    if args.grid:
        try:
            grid = json.loads(Path(args.grid).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read grid {args.grid}: {exc}") from exc
    else:
        grid = {}
    resolved = resolve({k: v for k, v in grid.items() if k in ("seed", "synthetic", "train")}, args.seed)
    sweep = _parse_cells({"cells": grid["sweep"]}) if "sweep" in grid else list(SWEEP_CELLS)
    ablation = _parse_cells({"cells": grid["ablation"]}) if "ablation" in grid else list(ABLATION_CELLS)
    seeds = [int(s) for s in grid.get("seeds", args.seeds.split(","))]
    if len(seeds) < 2:
        raise UsageError("ablate needs at least two seeds")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", {**resolved, "seeds": seeds,
                                      "sweep": [asdict(c) for c in sweep], "ablation": [asdict(c) for c in ablation]})
    syn = SyntheticConfig(**resolved["synthetic"])
    base = TrainConfig(**resolved["train"])
    cache = Path(args.cache) if args.cache else out / "cache"
    results = run_cells(sweep + ablation + [BASELINE_CELL], syn, base, seeds, cache, args.jobs)

    for fname, group in (("sweep.csv", sweep), ("ablation.csv", ablation + [BASELINE_CELL])):
        if not group:
            continue
        with open(out / fname, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cell", "alpha", "beta", "tau", "CN", "MCI", "LBD", "known_mean", "combined_mean"])
            for cell in group:
                r = results[cell.name]
                s = r.summary
                tc = {**base.to_dict(), **cell.overrides}
                w.writerow([cell.name, tc["alpha"], tc["beta"], cell.tau, *s.format_row(),
                            f"{r.mean_of('known_mean'):.1f}", f"{r.mean_of('combined_mean'):.1f}"])
    for name, r in results.items():
        write_summary_csv(out / f"summary_{name}.csv", r.summary)
    tat, wo_gd, wo_ld = (results[c.name] for c in ablation[:3]) if len(ablation) >= 3 else (None, None, None)
    if tat is not None:
        print(f"combined accuracy: full {tat.mean_of('combined_mean'):.1f}, "
              f"w/o GD {wo_gd.mean_of('combined_mean'):.1f}, w/o LD {wo_ld.mean_of('combined_mean'):.1f}")
    else:
        print(f"wrote {len(results)} cells to {out}")
    return 0


def micro_gradcheck(seed: int = 0, step: float = 1e-5) -> float:
    """Max relative gradient error of the full loss on a micro model.

    The oracle is the objective the analytic gradient actually descends:
    scores are held at their base-point values (they are stop-gradient), and
    for parameters upstream of a reversal node the discriminator terms enter
    with weight ``-lambda``.
    """
    cfg = ModelConfig(n_nodes=8, patch_size=4, d_model=8, n_heads=2, d_head=4, depth=3, mlp_ratio=2, seed=seed)
    model = TatModel(cfg)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 8, 8))
    x = 0.5 * (x + x.transpose(0, 2, 1))
    a = rng.uniform(0.5, 1.0, (cfg.n_patches, cfg.n_patches))
    tag = TagState(0.5 * (a + a.T), 0.9)
    # push D_l away from 0.5 so the score path is exercised
    for p in model.local_disc.parameters():
        p.data = rng.normal(0.0, 0.5, p.shape)
    macro = np.array([1.0, 0.0])
    labels = np.array([0])
    alpha, beta, lam = 1.0, 0.01, cfg.grl_lambda
    scores = forward(model, tag, x).scores

    def losses():
        out = forward(model, tag, x, fixed_scores=scores)
        return (loss_clc(out.logits[:1], labels), loss_dis(out.global_probs, macro), loss_pat(out.patch_probs, macro))

    model.zero_grad()
    total_loss(*losses(), alpha, beta).backward()
    disc = {f"local_disc.{k}" for k, _ in model.local_disc.named_parameters()}
    disc |= {f"global_disc.{k}" for k, _ in model.global_disc.named_parameters()}

    worst = 0.0
    for name, p in model.named_parameters():
        sign = 1.0 if name in disc else -lam

        def objective():
            l_c, l_d, l_p = losses()
            return float(l_c.data) + sign * (alpha * float(l_d.data) + beta * float(l_p.data))

        g = p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            worst = max(worst, abs(g[i] - num) / max(1.0, abs(g[i])))
    return worst


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    err = micro_gradcheck(args.seed or 0)
    ok = err < GRADCHECK_TOL
    print(f"gradcheck max rel err {err:.3e} ({'ok' if ok else 'FAIL'}, tol {GRADCHECK_TOL:g}, {time.perf_counter() - t0:.1f}s)")
    return 0 if ok else 1


def cmd_export_tag(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    csv_path, pgm_path = export_tag(ckpt.tag_state, args.out)
    print(f"wrote {csv_path} and {pgm_path}")
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tat", description="Transferability-aware transformer for open-set SC adaptation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic two-site dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory; omitted = generate from the synthetic section")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--progress", type=int, default=0, help="log every N steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="open-set evaluation on the target domain")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--tau")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="multi-seed loss-weight sweep and component ablation")
    a.add_argument("--grid", help="JSON with optional seed/synthetic/train/seeds/sweep/ablation")
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--seed", type=int)
    a.add_argument("--cache", help="run cache directory (default: OUT/cache)")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-tag", help="write the learned adjacency as CSV and PGM")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_tag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "progress", 0) else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"tat {args.command}: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, ad.NumericError, FloatingPointError) as exc:
        print(f"tat {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
