import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from rfiad.metrics import (
    MetricMatrix,
    RunReport,
    TaskEval,
    aupr,
    auroc,
    forgetting_measure_e,
    forgetting_measure_s,
)
from rfiad.numerics import ContractError, DomainError

seeds = st.integers(0, 2**20)


def random_instance(rng, n_max=30, ties=True):
    n = int(rng.integers(2, n_max + 1))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    scores = rng.integers(0, 6, n) / 5.0 if ties and rng.random() < 0.5 else rng.normal(size=n)
    return scores.tolist(), labels.tolist()


# -- AUROC --------------------------------------------------------------------

def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5
    with pytest.raises(DomainError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ContractError):
        auroc([0.1], [0, 1])


def test_auroc_matches_pairwise_oracle_twenty():
    rng = np.random.default_rng(20)
    s, y = rng.normal(size=20).tolist(), [0, 1] * 10
    assert auroc(s, y) == oracles.auroc_pairs(s, y)


@given(seeds)
def test_auroc_exact(seed):
    s, y = random_instance(np.random.default_rng(seed))
    assert auroc(s, y) == oracles.auroc_pairs(s, y)


@given(seeds)
def test_auroc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    s, y = random_instance(rng)
    s = np.asarray(s)
    assert auroc(np.exp(s) * 3 + 1, y) == auroc(s, y)


@given(seeds)
def test_auroc_label_flip(seed):
    s, y = random_instance(np.random.default_rng(seed))
    flipped = [1 - v for v in y]
    assert auroc(s, flipped) == pytest.approx(1 - auroc(s, y), abs=1e-15)


# -- AUPR ---------------------------------------------------------------------

def test_aupr_examples():
    assert aupr([0.9, 0.2, 0.1], [1, 0, 0]) == 1.0
    assert aupr([0.3, 0.3, 0.7], [1, 1, 1]) == 1.0
    with pytest.raises(DomainError):
        aupr([0.1, 0.2], [0, 0])


@given(seeds)
def test_aupr_exact(seed):
    s, y = random_instance(np.random.default_rng(seed))
    assert aupr(s, y) == oracles.aupr_thresholds(s, y)


# -- forgetting -----------------------------------------------------------------

def test_fm_e_examples():
    m = MetricMatrix(2)
    m.set(1, 1, 0.9)
    m.set(2, 1, 0.8)
    m.set(2, 2, 0.7)
    assert forgetting_measure_e(m) == pytest.approx(0.1, abs=1e-15)
    const = np.tril(np.full((3, 3), 0.6)) + np.triu(np.full((3, 3), np.nan), 1)
    assert forgetting_measure_e(const) == 0.0


def test_fm_e_errors():
    m = MetricMatrix(2)
    m.set(1, 1, 0.9)
    with pytest.raises(ContractError):
        forgetting_measure_e(m)
    with pytest.raises(ContractError):
        forgetting_measure_e(MetricMatrix(1))
    with pytest.raises(ContractError):
        m.set(1, 2, 0.5)


def random_matrix(rng, n):
    a = np.full((n, n), np.nan)
    for j in range(n):
        for i in range(j + 1):
            a[j, i] = rng.random()
    return a


@given(seeds, st.integers(2, 6))
def test_fm_e_exact(seed, n):
    a = random_matrix(np.random.default_rng(seed), n)
    assert forgetting_measure_e(a) == oracles.fm_e(a.tolist())


@given(seeds, st.integers(2, 6))
def test_fm_e_non_positive_when_columns_improve(seed, n):
    a = random_matrix(np.random.default_rng(seed), n)
    for i in range(n):
        a[i:, i] = np.sort(a[i:, i])
    assert forgetting_measure_e(a) <= 0


def test_fm_s_examples():
    assert forgetting_measure_s([0.9, 0.8], [0.9, 0.8]) == 0.0
    assert forgetting_measure_s([0.9, 0.8, 0.7], [0.85, 0.75, 0.65]) == pytest.approx(0.05, abs=1e-15)
    rng = np.random.default_rng(6)
    k, p = rng.random(6), rng.random(6)
    assert forgetting_measure_s(k, p) == oracles.fm_s(k, p)
    with pytest.raises(ContractError):
        forgetting_measure_s([1.0], [1.0, 2.0])


# -- report -------------------------------------------------------------------

def test_run_report_means_and_text():
    rep = RunReport.empty(2)
    vals = {(1, 1): 0.9, (2, 1): 0.8, (2, 2): 0.7}
    for (j, i), v in vals.items():
        rep.record(j, TaskEval(task_id=i, image_auroc=v, pixel_auroc=v, image_aupr=v, pixel_aupr=v))
    s = rep.summary()
    assert s["image_auroc"]["mean_final"] == pytest.approx(0.75)
    assert s["image_auroc"]["fm_e"] == pytest.approx(0.1)
    assert "FM_e" in rep.to_text() and "pixel_aupr" in rep.to_json()
