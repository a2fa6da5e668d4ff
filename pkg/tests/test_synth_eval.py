import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qmri import synth_eval as se
from qmri.core import ContrastStack, MultiechoSession, PropertyMap, seeded_rng
from qmri.phantom import PhantomConfig, default_classes, generate_phantom


def rand_map(seed, shape=(6, 7)):
    rng = seeded_rng(seed)
    return PropertyMap(rng.uniform(300, 3000, shape), rng.uniform(10, 150, shape), rng.uniform(0.1, 1, shape))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_mae_is_a_metric(a, b):
    x, y, z = rand_map(a), rand_map(b), rand_map(a + b + 1)
    assert se.mae(x, x) == {"t1_ms": 0.0, "t2s_ms": 0.0, "pd": 0.0, "pd_pct": 0.0}
    for k in ("t1_ms", "t2s_ms", "pd"):
        assert se.mae(x, y)[k] == se.mae(y, x)[k]
        assert se.mae(x, z)[k] <= se.mae(x, y)[k] + se.mae(y, z)[k] + 1e-9


def test_mae_respects_the_mask():
    x = rand_map(1)
    y = PropertyMap(x.t1_ms + 10.0, x.t2s_ms, x.pd)
    mask = np.zeros(x.shape, bool)
    mask[0, 0] = True
    assert se.mae(x, y, mask)["t1_ms"] == pytest.approx(10.0)
    with pytest.raises(TypeError):
        se.mae(x, np.zeros(3))


def test_synthesis_of_truth_reproduces_targets():
    gt = generate_phantom(16, 16, default_classes(), seeded_rng(2))
    proto = MultiechoSession.build(50.0, 30.0, [5.0, 20.0])
    stack = se.synthesize(gt, proto)
    m = se.mae(stack, stack, gt.mask)
    assert m["synth"] == 0.0 and m["per_contrast"].shape == (2,)
    noisy = ContrastStack(stack.intensities + 0.01, proto, noisy=True)
    assert se.mae(noisy, stack)["synth"] == pytest.approx(0.01)


def test_difference_map():
    gold = np.full((3, 3), 2.0)
    est = gold.copy()
    est[1, 1] = 3.0
    mask = np.ones((3, 3), bool)
    mask[0, 0] = False
    d = se.difference_map(est, gold, mask)
    assert d[1, 1] == pytest.approx(0.5) and d[0, 0] == 0.0 and d.sum() == pytest.approx(0.5)


TINY = se.ExperimentConfig(seed=3, n_train=6, n_test=4, width=16, height=16, epochs=2, batch_size=512,
                           max_voxels_per_item=None)


@pytest.fixture(scope="module")
def tiny_models():
    return {k: v[0] for k, v in se.train_models(TINY, ("multi", "fixed", "synth")).items()}


def test_test_slices_are_disjoint_from_training(tiny_models):
    from qmri.phantom import geometry_seeds_disjoint

    assert geometry_seeds_disjoint(se.training_data(TINY, "multi"), se.test_data(TINY))


@pytest.mark.parametrize("exp_id", [1, 2, 3, 4])
def test_experiment_rows_and_summary(tiny_models, exp_id):
    res = se.run_experiment(exp_id, TINY, tiny_models)
    proposed, reference = se.EXPERIMENT_MODELS[exp_id]
    assert res.summary["models"] == [proposed, reference]
    metrics = {r[3] for r in res.rows}
    slices = {r[1] for r in res.rows}
    assert slices == set(range(4)) and all(r[0] == exp_id for r in res.rows)
    if exp_id in (1, 2):
        assert {"t1_mae_ms", "t2s_mae_ms", "pd_mae", "pd_mae_pct"} <= metrics
        assert set(res.summary["mean"][proposed]) >= {"t1_mae_ms", "t2s_mae_ms", "pd_mae"}
    if exp_id in (2, 3, 4):
        assert "synth_mae" in metrics and "synth_mae_c9" in metrics
        assert "reference_to_proposed_synth_ratio" in res.summary
    if exp_id == 2:
        fas = [r[4] for r in res.rows if r[3] == "input_fa_deg"]
        assert all(0 < fa <= 40 for fa in fas)
        assert "worst_synth_degradation" in res.summary
    assert res.maps and all(m.shape == (16, 16) for m in res.maps.values())


def test_experiment_is_deterministic(tiny_models):
    a = se.run_experiment(3, TINY, tiny_models)
    b = se.run_experiment(3, TINY, tiny_models)
    assert a.rows == b.rows and a.summary == b.summary


def test_unknown_experiment_id():
    with pytest.raises(ValueError):
        se.run_experiment(9, TINY, {})


def test_phantom_override_is_used():
    cfg = se.ExperimentConfig(phantom=PhantomConfig(12, 10))
    assert cfg.phantom_config().width == 12
