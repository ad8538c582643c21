import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tat.data import SyntheticConfig, generate_synthetic, split_domains
from tat.evaluate import (
    RunReport,
    aggregate_runs,
    config_hash,
    entropy2,
    evaluate,
    export_tag,
    format_mean_std,
    open_set_labels,
    pair_means,
    predict_open_set,
    read_pgm,
    read_tag_csv,
    report_from_predictions,
    write_confusion_csv,
    write_report_csv,
    write_summary_csv,
)
from tat.model import TagState
from tat.train import TrainConfig, train


def logits_for(probs):
    return np.log(np.asarray(probs, dtype=np.float64))


def test_max_entropy_is_lbd():
    out = predict_open_set(logits_for([0.5, 0.5]), 0.8)
    assert out.entropy == pytest.approx(1.0, abs=1e-15)
    assert out.predicted == "LBD"


def test_confident_is_cn():
    out = predict_open_set(logits_for([0.99, 0.01]), 0.8)
    want = -(0.99 * math.log2(0.99) + 0.01 * math.log2(0.01))
    assert out.entropy == pytest.approx(want, rel=1e-12)
    assert out.entropy == pytest.approx(0.0808, abs=1e-4)
    assert out.predicted == "CN"
    assert predict_open_set(logits_for([0.01, 0.99]), 0.8).predicted == "MCI"


def test_three_to_one_is_lbd():
    out = predict_open_set(logits_for([0.75, 0.25]), 0.8)
    assert out.entropy == pytest.approx(0.811278, abs=1e-6)
    assert out.predicted == "LBD"


def test_threshold_tie_goes_to_argmax():
    probs = np.array([[0.75, 0.25]])
    h = float(entropy2(probs)[0])
    assert open_set_labels(probs, h)[0] == 0
    assert open_set_labels(probs, np.nextafter(h, 0))[0] == 2


def test_tau_validation():
    with pytest.raises(ValueError):
        predict_open_set([0.0, 0.0], 1.5)
    assert predict_open_set([0.0, 0.0], math.inf).predicted == "CN"


def test_entropy_zero_log_zero():
    np.testing.assert_array_equal(entropy2(np.array([[1.0, 0.0], [0.0, 1.0]])), [0.0, 0.0])


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_lbd_recall_non_increasing_in_tau(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, 40)
    probs = np.stack([p, 1 - p], axis=1)
    true = np.full(40, 2)
    taus = np.linspace(0, 1, 11)
    recalls = [report_from_predictions(true, open_set_labels(probs, t)).accuracy["LBD"] for t in taus]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))
    # predictions only ever leave the LBD bucket as tau grows
    for lo, hi in zip(taus, taus[1:]):
        a, b = open_set_labels(probs, lo), open_set_labels(probs, hi)
        assert np.all((a == b) | (a == 2))


def test_report_counts_and_recall():
    true = [0, 0, 0, 1, 2, 2]
    pred = [0, 2, 0, 1, 2, 1]
    r = report_from_predictions(true, pred)
    np.testing.assert_array_equal(r.confusion.sum(axis=1), [3, 1, 2])
    assert r.accuracy == pytest.approx({"CN": 200 / 3, "MCI": 100.0, "LBD": 50.0})
    assert r.known_mean == pytest.approx((200 / 3 + 100) / 2)
    assert r.combined_mean == pytest.approx((200 / 3 + 150) / 3)


def test_absent_class_is_nan():
    r = report_from_predictions([0, 0], [0, 1])
    assert math.isnan(r.accuracy["LBD"])
    assert format_mean_std(float("nan"), 0.0) == "N/A"


def _rep(cn, mci, lbd, h="x"):
    return RunReport({"CN": cn, "MCI": mci, "LBD": lbd}, np.zeros((3, 3), dtype=int), config_hash=h)


def test_aggregate_identical_runs():
    s = aggregate_runs([_rep(50, 60, 70)] * 3)
    assert s.std == {"CN": 0.0, "MCI": 0.0, "LBD": 0.0}
    assert s.mean["MCI"] == 60


def test_aggregate_sample_std():
    s = aggregate_runs([_rep(60, 0, 0), _rep(70, 0, 0)])
    assert s.mean["CN"] == 65.0
    assert s.std["CN"] == pytest.approx(math.sqrt(50), rel=1e-12)
    assert s.format_row()[0] == "65.0 ± 7.1"


def test_aggregate_three_runs_format():
    s = aggregate_runs([_rep(81.2, 40, 10), _rep(85.9, 45, 12), _rep(83.0, 50, 14)])
    row = s.format_row()
    assert row[0] == f"{np.mean([81.2, 85.9, 83.0]):.1f} ± {np.std([81.2, 85.9, 83.0], ddof=1):.1f}"
    assert row[1] == "45.0 ± 5.0"


def test_aggregate_permutation_invariant():
    reps = [_rep(60.1, 1, 2), _rep(70.3, 3, 4), _rep(55.7, 9, 1)]
    base = aggregate_runs(reps)
    for perm in itertools.permutations(reps):
        s = aggregate_runs(list(perm))
        assert s.mean == base.mean and s.std == base.std


def test_aggregate_rejects_mixed_or_single():
    with pytest.raises(ValueError, match="different"):
        aggregate_runs([_rep(1, 1, 1, "a"), _rep(1, 1, 1, "b")])
    with pytest.raises(ValueError):
        aggregate_runs([_rep(1, 1, 1)])


def test_config_hash_ignores_seed():
    assert config_hash({"a": 1, "seed": 1}) == config_hash({"seed": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_csv_outputs(tmp_path):
    r = report_from_predictions([0, 1, 2, 2], [0, 1, 2, 0])
    write_report_csv(tmp_path / "r.csv", r)
    write_confusion_csv(tmp_path / "c.csv", r)
    write_summary_csv(tmp_path / "s.csv", aggregate_runs([_rep(1, 2, 3)] * 2))
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "class,accuracy,count"
    assert (tmp_path / "c.csv").read_text().splitlines()[3] == "LBD,1,0,1"
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "class,mean,std,n_runs" and lines[1] == "CN,1.0,0.0,2"


def test_export_tag(tmp_path):
    a = np.array([[1.0, 0.25, 0.0], [0.25, 1.0, 1 / 3], [0.0, 1 / 3, 1.0]])
    tag = TagState(a=a, momentum=0.9, step=1)
    csv_path, pgm_path = export_tag(tag, tmp_path / "out")
    np.testing.assert_array_equal(read_tag_csv(csv_path), a)
    px = read_pgm(pgm_path)
    assert px.shape == (3, 3) and px.dtype == np.uint8
    np.testing.assert_array_equal(px, np.rint(255 * a).astype(np.uint8))
    assert pgm_path.read_bytes().startswith(b"P5\n3 3\n255\n")


def test_pair_means():
    a = np.arange(16, dtype=float).reshape(4, 4)
    tt, ss = pair_means(a, {0, 1})
    assert tt == np.mean([0, 1, 4, 5]) and ss == np.mean([10, 11, 14, 15])


def test_evaluate_end_to_end():
    samples, _ = generate_synthetic(SyntheticConfig(n_nodes=16, patch_size=4, source_cn=4, source_mci=4,
                                                    target_cn=2, target_mci=2, target_lbd=2, seed=1))
    cfg = TrainConfig(d_model=8, n_heads=2, d_head=4, depth=2, mlp_ratio=2, batch_size=4,
                      total_steps=5, warmup_steps=1)
    res = train(cfg, samples, patch_size=4)
    _, tgt = split_domains(samples)
    rep = evaluate(res.model, res.tag_state, tgt, 0.8)
    np.testing.assert_array_equal(rep.confusion.sum(axis=1), [2, 2, 2])
    # tau = 1 can never exceed the maximum binary entropy
    assert evaluate(res.model, res.tag_state, tgt, 1.0).accuracy["LBD"] == 0.0
    assert evaluate(res.model, res.tag_state, tgt, 0.0).accuracy["LBD"] == 100.0
    with pytest.raises(ValueError):
        evaluate(res.model, res.tag_state, [s for s in tgt if False], 0.8)
