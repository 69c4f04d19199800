import numpy as np
import pytest

from rfiad import pipeline
from rfiad.config import RunConfig
from rfiad.numerics import ContractError
from rfiad.pipeline import (
    EngineState,
    TrainingError,
    prompted_features,
    score_image,
    score_patches,
    train_task,
)
from rfiad.prototypes import PixelPrototypeBank
from rfiad.synthdata import TaskDataset, generate_task

SMALL = RunConfig.from_dict({
    "num_tasks": 2,
    "train": {"epochs": 2},
    "data": {"n_train": 4, "n_test_normal": 2, "n_test_anomalous": 2},
})


def small_task(t):
    return generate_task(t, SMALL.data, seed=SMALL.data.seed)


# -- structure ------------------------------------------------------------------

def test_frozen_components_and_prior_entries_unchanged(default_run):
    for (before, after) in default_run.snapshots:
        frozen_b, imgs_b, pixs_b = before
        frozen_a, imgs_a, pixs_a = after
        assert frozen_a[:len(frozen_b)] == frozen_b
        assert imgs_a[:len(imgs_b)] == imgs_b and len(imgs_a) == len(imgs_b) + 1
        assert pixs_a[:len(pixs_b)] == pixs_b and len(pixs_a) == len(pixs_b) + 1


def test_counters_after_full_run(default_run):
    st = default_run.state
    assert st.t == 3 and len(st.image_bank) == 3 and len(st.pixel_bank) == 3
    assert len(st.prompts) == 6 and all(st.prompts.frozen_flags())


def test_loss_descends(default_run):
    for s in default_run.state.stats:
        assert len(s.epoch_losses) == 5
        assert s.epoch_losses[-1] <= s.epoch_losses[0]
        assert s.ipr_after <= s.ipr_before


def test_access_log_is_task_local(default_run):
    for t, log in default_run.access_logs.items():
        own = {s.sample_id for s in default_run.datasets[t - 1].train}
        assert log and set(log) <= own


def test_backbone_immutable(default_run):
    assert default_run.state.backbone.weight_hash() == default_run.backbone_hash_before


# -- errors -----------------------------------------------------------------------

def test_out_of_order_task():
    st = EngineState.fresh(SMALL)
    with pytest.raises(ContractError, match="task 2"):
        train_task(st, small_task(2))


def test_anomalous_training_rejected():
    ds = small_task(1)
    bad = ds.test[-1]
    assert bad.is_anomalous
    with pytest.raises(ContractError, match="anomalous"):
        train_task(EngineState.fresh(SMALL), TaskDataset(1, [bad] + ds.train, ds.test))


def test_non_finite_loss_aborts(monkeypatch):
    real = pipeline.loss_total

    def poisoned(*terms):
        return real(*terms) * float("nan")

    monkeypatch.setattr(pipeline, "loss_total", poisoned)
    with pytest.raises(TrainingError, match="task 1, epoch 1, batch 1"):
        train_task(EngineState.fresh(SMALL), small_task(1))


def test_scoring_needs_bank():
    with pytest.raises(ContractError):
        score_image(EngineState.fresh(SMALL), np.zeros((32, 32)))


# -- scoring ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    st = EngineState.fresh(SMALL)
    train_task(st, small_task(1))
    return st


def test_exact_match_scores_zero(trained):
    img = small_task(1).test[0].image
    patches = prompted_features(trained, img).patches
    st = EngineState(config=trained.config, backbone=trained.backbone, prompts=trained.prompts,
                     pixel_bank=PixelPrototypeBank())
    st.pixel_bank.integrate(1, patches)
    res = score_image(st, img)
    np.testing.assert_allclose(res.patch_scores, 0.0, atol=1e-12)
    assert res.image_score == pytest.approx(0.0, abs=1e-12)


def test_orthogonal_patch_scores_one(trained):
    st = EngineState(config=trained.config, backbone=trained.backbone, prompts=trained.prompts,
                     pixel_bank=PixelPrototypeBank())
    st.pixel_bank.integrate(1, np.eye(4)[:2])
    res = score_patches(st, np.array([[1.0, 0, 0, 0], [0, 0, 1.0, 0]]))
    assert res.patch_scores.tolist() == [0.0, 1.0]
    assert res.image_score == 1.0


def test_scores_match_nested_loop_oracle(default_run):
    st = default_run.state
    bank = st.pixel_bank.matrix()
    for sample in default_run.datasets[1].test[::5]:
        patches = prompted_features(st, sample.image).patches
        res = score_image(st, sample.image)
        for i, q in enumerate(patches):
            best = max(float(q @ p) / (np.linalg.norm(q) * np.linalg.norm(p)) for p in bank)
            assert res.patch_scores[i] == pytest.approx(1 - best, abs=1e-12)
        assert res.image_score == res.patch_scores.max()
        assert res.anomaly_map(4).shape == (4, 4)
        assert ((res.patch_scores >= 0) & (res.patch_scores <= 2)).all()


def test_single_bank_lookup_per_image(default_run, monkeypatch):
    calls = []
    real = pipeline.kernels.max_cosine

    def counting(q, b):
        calls.append(b.shape[0])
        return real(q, b)

    monkeypatch.setattr(pipeline.kernels, "max_cosine", counting)
    score_image(default_run.state, default_run.datasets[0].test[0].image)
    assert calls == [3 * default_run.config.n_select]


def test_determinism_small():
    a, b = EngineState.fresh(SMALL), EngineState.fresh(SMALL)
    for t in (1, 2):
        train_task(a, small_task(t))
        train_task(b, small_task(t))
    assert [c.to_bytes() for c in a.prompts.components] == [c.to_bytes() for c in b.prompts.components]
    np.testing.assert_array_equal(a.pixel_bank.matrix(), b.pixel_bank.matrix())


def test_empty_training_split():
    with pytest.raises(ContractError, match="no training samples"):
        train_task(EngineState.fresh(SMALL), TaskDataset(1, [], small_task(1).test))

