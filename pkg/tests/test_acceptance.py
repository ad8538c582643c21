"""Acceptance suite: one PASS/FAIL line per criterion.

Lines are printed as each check finishes and repeated in the pytest terminal
summary. The synthetic benchmark behind criteria 6 and 7 trains 12 models;
finished runs are cached (see the ``benchmark`` fixture in conftest), so only
the first invocation pays for training.
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest

from tat import autodiff as ad
from tat.autodiff import Tensor
from tat.cli import GRADCHECK_TOL, main, micro_gradcheck
from tat.data import SyntheticConfig, generate_synthetic
from tat.evaluate import entropy2, open_set_labels, predict_open_set, report_from_predictions
from tat.layers import mtas, pad_adjacency, self_attention, tag_guided_sa, tas
from tat.model import ModelConfig, TagState, TatModel, forward, load_checkpoint, save_checkpoint
from tat.train import TrainConfig, loss_clc, loss_dis, loss_pat, lr_at, train

from helpers import random_params
from oracles import loop_attention, loop_tas

LINES: list[str] = []

# runtime budget for the benchmark's accuracy runs on an 8-core machine
BENCH_BUDGET_S = 15 * 60
BENCH_CORES = 8


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    assert ok, line


# --- 1 ----------------------------------------------------------------------


def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    err = micro_gradcheck(seed=0, step=1e-5)
    dt = time.perf_counter() - t0
    record(1, err < GRADCHECK_TOL and dt < 30.0, f"full-loss gradcheck max rel err {err:.2e} (< 1e-4) in {dt:.1f}s (< 30s)")


# --- 2 ----------------------------------------------------------------------


def test_criterion_2_reduction_identities():
    rng = np.random.default_rng(2)
    params, _ = random_params(rng, 12, 3, 4)
    x = Tensor(rng.standard_normal((4, 10, 12)))
    base = self_attention(x, params).data
    a = mtas(x, params, np.ones((4, 9))).data
    b = tag_guided_sa(x, params, pad_adjacency(np.ones((9, 9)))).data
    q, k, v = rng.standard_normal((4, 5)), rng.standard_normal((4, 10, 5)), rng.standard_normal((4, 10, 5))
    w = ad.softmax(ad.scale(ad.matmul(Tensor(q[:, None, :]), ad.swapaxes(Tensor(k), -1, -2)), 1 / math.sqrt(5)))
    vanilla_row = ad.matmul(w, Tensor(v)).data[:, 0, :]
    tas_ones = tas(Tensor(q), Tensor(k), Tensor(v), np.ones((4, 9))).data
    ok_a = np.array_equal(a, base) and np.array_equal(tas_ones, vanilla_row)
    ok_b = np.array_equal(b, base)

    model = TatModel(ModelConfig(n_nodes=16, patch_size=4, d_model=8, n_heads=2, d_head=4, depth=3, mlp_ratio=2, seed=2))
    model.freeze_local_disc_at_half()
    sc = rng.standard_normal((3, 16, 16))
    sc = sc + sc.transpose(0, 2, 1)
    full = forward(model, TagState.neutral(16), sc)
    plain = forward(model, TagState.neutral(16), sc, plain=True)
    ok_c = np.array_equal(full.logits.data, plain.logits.data) and np.array_equal(full.cls_token.data, plain.cls_token.data)
    record(2, ok_a and ok_b and ok_c, f"bit-exact: (a) TAS ones == SA {ok_a}, (b) TAG-SA ones == SA {ok_b}, "
                                      f"(c) frozen-D_l model == plain ViT {ok_c}")


# --- 3 ----------------------------------------------------------------------


def test_criterion_3_oracle_equivalence():
    worst = 0.0
    n = 25
    for i in range(n):
        rng = np.random.default_rng(300 + i)
        p, h, dh, d = int(rng.integers(1, 9)), int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 7))
        params, raw = random_params(rng, d, h, dh)
        x = rng.standard_normal((1, p + 1, d))
        a = rng.uniform(0, 1, (p, p))
        a_full = pad_adjacency(0.5 * (a + a.T))
        s = rng.uniform(0, 1, (1, p))
        q, k, v = rng.standard_normal(dh), rng.standard_normal((p + 1, dh)), rng.standard_normal((p + 1, dh))
        pairs = [
            (self_attention(Tensor(x), params).data[0], loop_attention(x[0], raw)),
            (tag_guided_sa(Tensor(x), params, a_full).data[0], loop_attention(x[0], raw, adjacency=a_full)),
            (mtas(Tensor(x), params, s).data[0], loop_attention(x[0], raw, scores=s[0])),
            (tas(Tensor(q[None]), Tensor(k[None]), Tensor(v[None]), s).data[0], loop_tas(q, k, v, s[0])),
        ]
        worst = max(worst, max(float(np.abs(got - want).max()) for got, want in pairs))
    record(3, worst <= 1e-10, f"SA, TAG-SA, MTAS, TAS vs loop oracles on {n} random instances (P <= 8): "
                              f"max abs diff {worst:.1e} (<= 1e-10)")


# --- 4 ----------------------------------------------------------------------


def test_criterion_4_stop_gradient_contract():
    rng = np.random.default_rng(4)
    model = TatModel(ModelConfig(n_nodes=16, patch_size=4, d_model=8, n_heads=2, d_head=4, depth=3, mlp_ratio=2, seed=4))
    for p in model.local_disc.parameters():
        p.data = rng.normal(0, 0.5, p.shape)
    a = rng.uniform(0, 1, (16, 16))
    tag = TagState(0.5 * (a + a.T), 0.9)
    sc = rng.standard_normal((4, 16, 16))
    sc = sc + sc.transpose(0, 2, 1)

    macro = [1, 1, 0, 0]

    def grads(fixed=None, with_pat=True):
        out = forward(model, tag, sc, fixed_scores=fixed)
        model.zero_grad()
        loss = loss_clc(out.logits[:2], [0, 1]) + loss_dis(out.global_probs, macro)
        if with_pat:
            loss = loss + ad.scale(loss_pat(out.patch_probs, macro), 0.01)
        loss.backward()
        return out, {k: p.grad.copy() for k, p in model.named_parameters()}

    out, live = grads()
    _, const = grads(out.scores.copy())
    backbone = [k for k in live if not k.startswith(("local_disc.", "global_disc."))]
    same = all(np.array_equal(live[k], const[k]) for k in backbone)
    # without L_pat the only route into D_l would be through the scores
    _, no_pat = grads(with_pat=False)
    dl_zero = all(not np.any(no_pat[k]) for k in no_pat if k.startswith("local_disc."))
    a_const = isinstance(out.a_batch, np.ndarray) and isinstance(tag.a, np.ndarray)
    record(4, same and dl_zero and a_const,
           f"backbone grads identical with scores injected as constants {same}; "
           f"D_l receives exactly 0 from the score path {dl_zero}; A is a constant array {a_const}")


# --- 5 ----------------------------------------------------------------------


def test_criterion_5_entropy_threshold():
    rng = np.random.default_rng(5)
    c = ad.binary_entropy(rng.uniform(0, 1, 1000))
    in_range = bool(np.all((c >= 0) & (c <= 1)))
    anchors = ad.binary_entropy(0.5) == 1.0 and ad.binary_entropy(0.0) == 0.0 and ad.binary_entropy(1.0) == 0.0
    lbd = predict_open_set(np.log([0.5, 0.5]), 0.8).predicted == "LBD"
    cn = predict_open_set(np.log([0.99, 0.01]), 0.8).predicted == "CN"
    p = rng.uniform(0, 1, 500)
    probs = np.stack([p, 1 - p], axis=1)
    recalls = [report_from_predictions(np.full(500, 2), open_set_labels(probs, t)).accuracy["LBD"]
               for t in np.linspace(0, 1, 41)]
    monotone = all(x >= y for x, y in zip(recalls, recalls[1:]))
    assert entropy2(probs).max() <= 1.0
    record(5, in_range and anchors and lbd and cn and monotone,
           f"scores in [0,1] {in_range}, c(0.5)=1 c(0)=c(1)=0 {anchors}, [0.5,0.5]->LBD {lbd}, "
           f"[0.99,0.01]->CN {cn}, LBD recall non-increasing over 41 taus {monotone}")


# --- 6 and 7: synthetic benchmark ---------------------------------------------


def _wall_estimate(seconds, cores):
    """Longest-processing-time schedule of independent jobs on ``cores`` workers."""
    loads = [0.0] * cores
    for s in sorted(seconds, reverse=True):
        loads[loads.index(min(loads))] += s
    return max(loads)


@pytest.mark.slow
def test_criterion_6_synthetic_benchmark(benchmark):
    tat, base = benchmark["tat"], benchmark["source_only"]
    gain = tat.mean_of("known_mean") - base.mean_of("known_mean")
    ok_a = gain >= 10.0
    tat_lbd, base_lbd = tat.summary.mean["LBD"], base.summary.mean["LBD"]
    ok_b = tat_lbd > 0 and base_lbd == 0
    s_t, s_s = tat.record_mean("score_transferable"), tat.record_mean("score_shifted")
    rho = tat.record_mean("spearman")
    ok_c = s_t > s_s and rho >= 0.5
    secs = [r["seconds"] for r in tat.records + base.records]
    wall = _wall_estimate(secs, BENCH_CORES)
    ok_t = wall < BENCH_BUDGET_S
    record(6, ok_a and ok_b and ok_c and ok_t,
           f"(a) known-class gain {gain:+.1f} pp (TAT {tat.mean_of('known_mean'):.1f} vs source-only "
           f"{base.mean_of('known_mean'):.1f}; need >= 10) {ok_a}; "
           f"(b) LBD recall TAT {tat_lbd:.1f} > 0, baseline {base_lbd:.1f} == 0 {ok_b}; "
           f"(c) score transferable {s_t:.6f} vs shifted {s_s:.6f}, Spearman {rho:+.3f} (need >= 0.5) {ok_c}; "
           f"runtime {sum(secs) / 60:.1f} min serial, {wall / 60:.1f} min on {BENCH_CORES} workers "
           f"(need < 15) {ok_t}")


@pytest.mark.slow
def test_criterion_7_ablation_direction(benchmark):
    full = benchmark["tat"].mean_of("combined_mean")
    wo_gd = benchmark["wo_gd"].mean_of("combined_mean")
    wo_ld = benchmark["wo_ld"].mean_of("combined_mean")
    record(7, wo_gd < full and wo_ld < full,
           f"combined accuracy full {full:.1f}, w/o GD {wo_gd:.1f} ({wo_gd < full}), w/o LD {wo_ld:.1f} ({wo_ld < full})")


# --- 8 ----------------------------------------------------------------------


def test_criterion_8_determinism_and_persistence(tmp_path):
    syn = SyntheticConfig(n_nodes=16, patch_size=4, source_cn=6, source_mci=6, target_cn=3, target_mci=2, target_lbd=3)
    samples, _ = generate_synthetic(syn)
    cfg = TrainConfig(d_model=8, n_heads=2, d_head=4, depth=2, mlp_ratio=2, batch_size=4, total_steps=30, warmup_steps=5)
    r1, r2 = train(cfg, samples, patch_size=4), train(cfg, samples, patch_size=4)
    logs = r1.log == r2.log

    save_checkpoint(tmp_path / "m.ckpt", r1.model, r1.tag_state, r1.optimizer.velocities, r1.optimizer.step)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    x = np.stack([s.matrix for s in samples[:5]])
    a, b = forward(r1.model, r1.tag_state, x), forward(ck.model, ck.tag_state, x)
    ckpt = all(np.array_equal(u, v) for u, v in (
        (a.logits.data, b.logits.data), (a.patch_probs.data, b.patch_probs.data), (a.scores, b.scores)))

    cfg_path = tmp_path / "gen.json"
    cfg_path.write_text('{"synthetic": {"n_nodes": 32, "patch_size": 8, "source_cn": 10, "source_mci": 8, '
                        '"target_cn": 3, "target_mci": 2, "target_lbd": 4}}')
    trees = []
    for name in ("g1", "g2"):
        assert main(["gen-data", "--config", str(cfg_path), "--out", str(tmp_path / name), "--seed", "8"]) == 0
        root = tmp_path / name
        trees.append({str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    gen = trees[0] == trees[1]
    record(8, logs and ckpt and gen, f"bit-identical training logs {logs}; checkpoint round-trip forward bit-identical "
                                     f"{ckpt}; gen-data byte-identical ({len(trees[0])} files) {gen}")


# --- 9 ----------------------------------------------------------------------


def test_criterion_9_schedule():
    total = 3000
    anchors = lr_at(0, total) == 0.0 and lr_at(500, total) == 0.06 and abs(lr_at(total, total)) < 1e-15
    jump = max(abs(lr_at(500, total) - lr_at(499, total)), abs(lr_at(501, total) - lr_at(500, total)))
    continuous = jump <= 0.06 / 500 + 1e-15
    record(9, anchors and continuous, f"lr(0)=0, lr(500)=0.06, lr(3000)=0 {anchors}; "
                                      f"max step change around 500 = {jump:.2e} {continuous}")


if __name__ == "__main__":
    sys.exit(subprocess.call([sys.executable, "-m", "pytest", "-q", __file__]))
