import numpy as np
import pytest

from conftest import small_config
from plba.experiments import paired_selector_study, sweep_csv, sweep_guidance, trajectory_of, translational_rmse
from plba.synthetic import generate


def test_trajectory_uses_keyframe_ids_as_timestamps():
    _, truth = generate(small_config(0))
    tr = trajectory_of({**truth.free_poses, **truth.fixed_poses})
    np.testing.assert_array_equal(tr.timestamps, [0.0, 1.0, 2.0])


def test_translational_rmse_of_truth_is_zero():
    _, truth = generate(small_config(1))
    assert translational_rmse(truth.free_poses, truth.free_poses) == 0.0


def test_paired_study_counts_and_is_deterministic():
    cfg = small_config(0)
    a = paired_selector_study(cfg, range(4))
    b = paired_selector_study(cfg, range(4))
    np.testing.assert_array_equal(a.rmse_points, b.rmse_points)
    np.testing.assert_array_equal(a.rmse_both, b.rmse_both)
    assert a.wins + a.losses <= 4
    assert 0.0 <= a.p_value <= 1.0
    assert a.to_dict()["seeds"] == [0, 1, 2, 3]


def test_paired_study_is_independent_of_workers():
    cfg = small_config(0)
    a = paired_selector_study(cfg, range(4), workers=1)
    b = paired_selector_study(cfg, range(4), workers=2)
    np.testing.assert_array_equal(a.rmse_both, b.rmse_both)


def test_sweep_rows_and_baseline():
    cfg = small_config(0)
    rows = sweep_guidance(cfg, [0], repetitions=3)
    assert len(rows) == 1 and rows[0].n == 0
    assert rows[0].repetitions == 3
    text = sweep_csv(rows)
    assert text.splitlines()[0] == "N,mean_ate,std_ate,convergence_rate,repetitions"
    assert len(text.splitlines()) == 2


def test_sweep_pairs_scenes_across_counts():
    # the same repetition index shares the scene, so the points-only rows match exactly
    cfg = small_config(0)
    a = sweep_guidance(cfg, [0, 2], repetitions=3, master_seed=5)
    b = sweep_guidance(cfg, [0], repetitions=3, master_seed=5)
    np.testing.assert_array_equal(a[0].ates, b[0].ates)


def test_sweep_workers_do_not_change_results():
    cfg = small_config(0)
    a = sweep_csv(sweep_guidance(cfg, [0, 3], repetitions=3, workers=1))
    b = sweep_csv(sweep_guidance(cfg, [0, 3], repetitions=3, workers=2))
    assert a == b


def test_sweep_rejects_single_guidance_point():
    with pytest.raises(ValueError):
        sweep_guidance(small_config(0), [1], repetitions=1)
