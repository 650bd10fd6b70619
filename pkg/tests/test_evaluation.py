import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from camkit.data import MetadataRecord
from camkit.evaluation import (
    ContractError,
    EmbeddingFormatError,
    EmbeddingMatrix,
    GroupingError,
    LeakAudit,
    NormalizationError,
    cps,
    evaluate_all,
    knn_predict,
    leave_one_out_predict,
    macro_f1,
    per_class_f1,
    radar_svg,
    read_cemb,
    write_cemb,
    write_report,
)
from camkit.tasks import CHAMMI_TASKS, CPS_WEIGHTS, TASKS_BY_ID
from oracles import loo_exhaustive, macro_f1_confusion, nn_exhaustive


def em(data, labels=None, prefix="r"):
    return EmbeddingMatrix(np.asarray(data), [f"{prefix}{i}" for i in range(len(data))], labels)


# --- knn ---------------------------------------------------------------------

def test_identical_and_scaled_queries():
    rng = np.random.default_rng(0)
    ref = rng.normal(size=(30, 8)).astype(np.float32)
    labels = [f"c{i}" for i in range(30)]
    r = em(ref, labels)
    assert knn_predict(r, em(ref[[4, 17]], prefix="q")) == ["c4", "c17"]
    assert knn_predict(r, em(ref[[4, 17]] * 7.5, prefix="q")) == ["c4", "c17"]


def test_knn_matches_exhaustive_oracle_exactly():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        ref, q = rng.normal(size=(200, 16)).astype(np.float32), rng.normal(size=(50, 16)).astype(np.float32)
        labels = list(rng.integers(0, 7, 200))
        got = knn_predict(em(ref, labels), em(q, prefix="q"))
        assert got == nn_exhaustive(ref.astype(np.float64), labels, q.astype(np.float64))


def test_ties_go_to_lowest_index():
    ref = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]])
    assert knn_predict(em(ref, ["a", "b", "c"]), em([[3.0, 0.0]], prefix="q")) == ["a"]


def test_parallel_equals_sequential():
    rng = np.random.default_rng(3)
    ref, q = rng.normal(size=(500, 12)), rng.normal(size=(1100, 12))
    labels = list(rng.integers(0, 9, 500))
    assert knn_predict(em(ref, labels), em(q, prefix="q"), workers=1) == knn_predict(
        em(ref, labels), em(q, prefix="q"), workers=4
    )


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    ref, q = rng.normal(size=(60, 6)), rng.normal(size=(25, 6))
    rot = special_ortho_group.rvs(6, random_state=seed % (2**32))
    labels = list(range(60))
    a = knn_predict(em(ref, labels), em(q, prefix="q"))
    b = knn_predict(em(ref @ rot, labels), em(q @ rot, prefix="q"))
    sims = (q / np.linalg.norm(q, axis=1, keepdims=True)) @ (ref / np.linalg.norm(ref, axis=1, keepdims=True)).T
    top2 = np.sort(sims, axis=1)[:, -2:]
    # only queries whose best match is not a near-tie must agree
    clear = (top2[:, 1] - top2[:, 0]) > 1e-6
    assert [x for x, c in zip(a, clear) if c] == [y for y, c in zip(b, clear) if c]


def test_knn_errors():
    r = em(np.eye(3), ["a", "b", "c"])
    with pytest.raises(ContractError):
        knn_predict(r, em(np.ones((1, 4)), prefix="q"))
    with pytest.raises(ContractError):
        knn_predict(em(np.zeros((0, 3)), []), em(np.ones((1, 3)), prefix="q"))
    with pytest.raises(NormalizationError, match="q1"):
        knn_predict(r, em([[1.0, 0, 0], [0.0, 0, 0]], prefix="q"))
    with pytest.raises(ContractError):
        EmbeddingMatrix(np.eye(2), ["a", "a"])


def test_throughput_floor():
    rng = np.random.default_rng(0)
    ref = em(rng.normal(size=(4000, 64)), list(rng.integers(0, 10, 4000)))
    q = em(rng.normal(size=(2000, 64)), prefix="q")
    knn_predict(ref, q)  # warm-up
    t = time.perf_counter()
    knn_predict(ref, q)
    rate = 4000 * 2000 * 64 / (time.perf_counter() - t)
    assert rate >= 2e8, f"{rate:.3g} multiply-adds/s"


# --- leave one out -----------------------------------------------------------

def test_loo_two_groups_match_each_other():
    train = em([[0.0, 1.0]], ["other"], "t")
    test = em([[1.0, 0.0], [1.0, 0.0]], ["L", "L"], "q")
    assert leave_one_out_predict(train, test, ["g1", "g2"]) == ["L", "L"]


def test_loo_single_group_novel_labels_score_zero():
    train = em(np.eye(3), ["a", "b", "c"], "t")
    rng = np.random.default_rng(1)
    test = em(rng.normal(size=(10, 3)), ["n1", "n2"] * 5, "q")
    pred = leave_one_out_predict(train, test, ["g"] * 10)
    assert macro_f1(pred, test.labels) == 0.0


def test_loo_matches_per_group_oracle_and_audit_is_clean():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        train = em(rng.normal(size=(40, 5)), list(rng.integers(0, 4, 40)), "t")
        test = em(rng.normal(size=(30, 5)), list(rng.integers(0, 6, 30)), "q")
        groups = [f"g{x}" for x in rng.integers(0, 3, 30)]
        audit = LeakAudit()
        got = leave_one_out_predict(train, test, groups, audit=audit)
        want = loo_exhaustive(train.data.astype(float), train.labels, test.data.astype(float), test.labels, groups)
        assert got == want
        assert audit.collisions == 0 and audit.queries == 30


def test_loo_grouping_errors():
    train = em(np.eye(2), ["a", "b"], "t")
    test = em(np.eye(2), ["a", "b"], "q")
    with pytest.raises(GroupingError):
        leave_one_out_predict(train, test, {"q0": "g"})
    with pytest.raises(GroupingError):
        leave_one_out_predict(train, test, ["g", ""])


# --- macro F1 ----------------------------------------------------------------

def test_macro_f1_examples():
    assert macro_f1(["a", "b"], ["a", "b"]) == 1.0
    assert abs(macro_f1(["A", "A", "B"], ["A", "B", "B"]) - 2 / 3) < 1e-15
    assert macro_f1(["z", "z"], ["a", "b"]) == 0.0
    with pytest.raises(ContractError):
        macro_f1(["a"], ["a", "b"])
    with pytest.raises(ContractError):
        macro_f1([], [])


def test_macro_f1_matches_confusion_matrix_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(1, 60))
        k = int(rng.integers(1, 6))
        truth = list(rng.integers(0, k, n))
        pred = list(rng.integers(0, k + 1, n))
        assert macro_f1(pred, truth) == macro_f1_confusion(pred, truth)


def test_all_classes_mode_counts_absent_classes():
    pf = per_class_f1(["a", "a"], ["a", "a"], classes=["a", "b"])
    assert pf == {"a": 1.0, "b": 0.0}
    assert macro_f1(["a", "a"], ["a", "a"], classes=["a", "b"]) == 0.5


# --- CPS ---------------------------------------------------------------------

def test_cps_reference_rows():
    fixed = dict(W2=0.861, H2=0.932, H3=0.551, C2=0.484, C3=0.123, C4=0.112)
    target = dict(W2=0.843, H2=0.925, H3=0.594, C2=0.512, C3=0.174, C4=0.107)
    assert abs(cps(fixed) - 0.614) <= 0.0005
    assert abs(cps(target) - 0.622) <= 0.0005
    assert abs(cps({t: 1.0 for t in CPS_WEIGHTS}) - 1.0) < 1e-15


def test_cps_errors():
    with pytest.raises(ContractError, match="C4"):
        cps(dict(W2=1, H2=1, H3=1, C2=1, C3=1))
    with pytest.raises(ContractError):
        cps(dict(W2=1.5, H2=1, H3=1, C2=1, C3=1, C4=1))


def test_task_weights():
    assert sum(CPS_WEIGHTS.values()) == 1
    for t in CHAMMI_TASKS:
        assert (t.eval_mode == "leave-one-out") == (t.task_id in ("H3", "C4"))
        assert t.cps_weight == pytest.approx(float(CPS_WEIGHTS.get(t.task_id, 0)), abs=0)
    assert TASKS_BY_ID["H3"].group_key == "cell_line" and TASKS_BY_ID["C4"].group_key == "plate"


# --- evaluate_all ------------------------------------------------------------

def synthetic_records(rng, per_task=40, classes=3, noise=0.0, shuffle_train=False, dim=8):
    """Class c lives in orthant direction e_c; every split shares classes."""
    recs, rows = [], []
    fam = {"WTC": "W", "HPA": "H", "CP": "C"}
    for ds, letter in fam.items():
        splits = ["train"] + [t.task_id for t in CHAMMI_TASKS if t.dataset == ds]
        for split in splits:
            n = per_task * (3 if split == "train" else 1)
            labels = rng.integers(0, classes, n)
            for i in range(n):
                lab = int(labels[i])
                v = np.abs(rng.normal(size=dim)) * 0.05
                v[lab] += 1.0
                v += rng.normal(size=dim) * noise
                rid = f"{ds}-{split}-{i}"
                ann = {"cell_line": f"L{i % 3}", "plate": f"P{i % 4}"}
                recs.append(MetadataRecord(rid, "", f"SYNTH-{ds}", f"k{lab}", split, 0, ann))
                rows.append(v)
    if shuffle_train:
        idx = [i for i, r in enumerate(recs) if r.split == "train"]
        labs = [recs[i].label for i in idx]
        perm = rng.permutation(len(idx))
        for j, i in enumerate(idx):
            recs[i].label = labs[perm[j]]
    return EmbeddingMatrix(np.array(rows), [r.image_id for r in recs]), recs


def test_separable_embeddings_score_perfectly():
    emb, recs = synthetic_records(np.random.default_rng(0))
    rep = evaluate_all(emb, recs, CHAMMI_TASKS)
    assert all(v == 1.0 for v in rep.task_f1.values())
    assert rep.cps == cps(rep.task_f1)


def test_shuffled_labels_give_chance_f1():
    emb, recs = synthetic_records(np.random.default_rng(1), per_task=500, noise=2.0, shuffle_train=True)
    rep = evaluate_all(emb, recs, [t for t in CHAMMI_TASKS if t.eval_mode == "reference-train"])
    for task, f1 in rep.task_f1.items():
        assert abs(f1 - 1 / 3) <= 0.1, (task, f1)


def test_report_consistency_and_missing_split():
    emb, recs = synthetic_records(np.random.default_rng(2), per_task=10)
    rep = evaluate_all(emb, recs, CHAMMI_TASKS)
    assert rep.cps == cps(rep.task_f1)
    assert set(rep.counts) == set(rep.task_f1)
    assert sum(rep.counts["W1"].values()) == 10
    kept = [r for r in recs if r.split != "C3"]
    with pytest.raises(ContractError, match="C3"):
        evaluate_all(emb, kept, CHAMMI_TASKS)
    partial = evaluate_all(emb, kept, CHAMMI_TASKS, skip_missing=True)
    assert "C3" not in partial.task_f1 and partial.cps is None


# --- files -------------------------------------------------------------------

def test_cemb_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = EmbeddingMatrix(rng.normal(size=(7, 5)).astype(np.float32), [f"id{i}" for i in range(7)])
    write_cemb(tmp_path / "e.cemb", m)
    raw = (tmp_path / "e.cemb").read_bytes()
    assert raw[:4] == b"CEMB" and len(raw) == 16 + 7 * 5 * 4
    back = read_cemb(tmp_path / "e.cemb")
    assert np.array_equal(back.data, m.data) and back.row_ids == m.row_ids
    (tmp_path / "bad.cemb").write_bytes(raw[:-4])
    (tmp_path / "bad.rows.csv").write_text((tmp_path / "e.rows.csv").read_text())
    with pytest.raises(EmbeddingFormatError):
        read_cemb(tmp_path / "bad.cemb")


def test_report_and_radar(tmp_path):
    emb, recs = synthetic_records(np.random.default_rng(3), per_task=10)
    rep = evaluate_all(emb, recs, CHAMMI_TASKS)
    doc = write_report(tmp_path / "r.json", rep, {"k": 1}, code_version="abc")
    assert json.loads((tmp_path / "r.json").read_text()) == json.loads(json.dumps(doc))
    svg = radar_svg(rep.task_f1)
    assert svg.startswith("<svg") and svg.count("<text") == 9
