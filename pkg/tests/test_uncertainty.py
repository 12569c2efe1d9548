import numpy as np
import pytest

from conftest import fig3_graph, random_instance_config, small_config
from plba import se3
from plba.ba import Problem
from plba.errors import CertificateInapplicableError, UnderconstrainedPoseError
from plba.graph import FactorGraph, relabel_landmarks
from plba.landmarks import (
    NoiseModel,
    PointLandmark,
    PointObservation,
    point_observation_covariance,
    point_residual_jacobians,
)
from plba.synthetic import SceneConfig, build_scene, generate
from plba.uncertainty import (
    information_additivity,
    monte_carlo_covariance,
    pose_covariance,
    theorem_certificate,
)


def test_fixed_landmarks_reduce_to_pose_jacobian():
    # with landmarks held fixed the covariance is (sum J^T Sigma^-1 J)^-1 over the pose Jacobians
    K = se3.CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 0.08, 640, 480)
    pose = se3.exp([0.1, -0.2, 0.3, 0.05, -0.1, 0.02])
    noise = NoiseModel()
    edges, info = [], np.zeros((6, 6))
    for j, X in enumerate(([0.3, 0.2, 3.0], [-0.4, 0.1, 4.0], [0.1, -0.5, 2.5])):
        Xw = pose.inverse().act(np.array(X))
        uv = se3.project(K, np.array(X))
        e = PointObservation(0, j, uv[0], uv[1], X[2])
        Jx, _ = point_residual_jacobians(pose, K, PointLandmark(j, Xw), e)
        info += Jx.T @ np.linalg.solve(point_observation_covariance(K, e, noise), Jx)
        edges.append((e, PointLandmark(j, Xw)))
    g = FactorGraph(K, noise, {0: pose}, {}, {l.id: l for _, l in edges}, {}, [e for e, _ in edges], [])
    problem = Problem(g, "points")
    _, neq = problem.linearize(problem.initial_state())
    # H_B is dropped: the pose block alone
    np.testing.assert_allclose(neq.A, info, rtol=1e-9, atol=1e-12 * np.abs(info).max())
    np.testing.assert_allclose(np.linalg.inv(neq.A), np.linalg.inv(info), rtol=1e-8)


def test_matches_dense_inverse_two_poses_four_landmarks():
    graph, _ = generate(small_config(0, num_points=4, num_lines=0))
    assert len(graph.free_poses) == 2 and len(graph.point_landmarks) == 4
    problem = Problem(graph, "points")
    J, _ = problem.jacobian_dense(problem.initial_state())
    dense = np.linalg.inv(J.T @ J)[:12, :12]
    C = pose_covariance(graph, "points")
    assert np.linalg.norm(C - dense) <= 1e-9 * np.linalg.norm(dense)


def test_doubling_covariances_doubles_pose_covariance():
    graph, _ = generate(small_config(1))
    C = pose_covariance(graph, "both")
    n = graph.noise
    doubled = graph.copy()
    doubled.noise = NoiseModel(n.sigma_p * np.sqrt(2), tuple(c * np.sqrt(2) for c in n.depth_coeffs), n.sigma_line * np.sqrt(2))
    np.testing.assert_allclose(pose_covariance(doubled, "both"), 2 * C, rtol=1e-9)


def test_covariance_is_symmetric_positive_definite():
    graph, truth = generate(small_config(2))
    C = pose_covariance(graph, "both", linearization=truth)
    np.testing.assert_array_equal(C, C.T)
    assert np.linalg.eigvalsh(C)[0] > 0


def test_underconstrained_pose_raises():
    # a single RGB-D point leaves three pose directions unobserved
    graph = fig3_graph()
    g = FactorGraph(
        graph.intrinsics,
        graph.noise,
        {0: graph.free_poses[0]},
        graph.fixed_poses,
        {1: graph.point_landmarks[1]},
        {},
        [e for e in graph.point_edges if (e.keyframe_id, e.landmark_id) == (0, 1)],
        [],
    )
    with pytest.raises(UnderconstrainedPoseError) as err:
        pose_covariance(g, "points")
    assert err.value.variables == ["keyframe 0"]
    assert err.value.null_directions.shape[0] == 6


def test_additivity_holds_even_when_lines_underconstrain():
    # guidance points seen from fewer than four views carry no pose information
    graph, truth = generate(small_config(3, num_lines=6))
    residual, I_h, I_f, I_g, _, _ = information_additivity(graph, truth)
    assert residual <= 1e-9
    assert np.linalg.norm(I_f) <= 1e-9 * np.linalg.norm(I_h)
    with pytest.raises(CertificateInapplicableError) as err:
        theorem_certificate(graph, linearization=truth)
    assert err.value.additivity_residual == residual


def test_lines_only_information_matches_dense_rank():
    # the lines-only information is singular exactly when the dense Jacobian loses pose rank
    graph, truth = generate(small_config(3, num_lines=6))
    problem = Problem(truth.linearization_point(graph), "lines")
    J, _ = problem.jacobian_dense(problem.initial_state())
    s = np.linalg.svd(J, compute_uv=False)
    rank = int(np.sum(s > s[0] * 1e-10))
    land = np.linalg.matrix_rank(J[:, 6 * problem.m :], tol=s[0] * 1e-10)
    assert rank - land == 0


def test_certificate_on_a_well_observed_scene():
    graph, truth = generate(SceneConfig(seed=3, num_free=3, num_fixed=2, num_points=30))
    rep = theorem_certificate(graph, linearization=truth)
    assert rep.additivity_residual <= 1e-9
    assert rep.additivity_residual_inverse <= 1e-9
    assert rep.strict
    assert rep.min_margin > 0


def test_certificate_on_random_instances():
    rng = np.random.default_rng(0)
    applicable = 0
    for k in range(30):
        graph, truth = generate(random_instance_config(rng, [7, k]))
        try:
            rep = theorem_certificate(graph, linearization=truth)
        except CertificateInapplicableError as exc:
            assert exc.additivity_residual <= 1e-9
            continue
        applicable += 1
        assert rep.additivity_residual <= 1e-9
        assert np.all(rep.eig_g < rep.eig_h) and np.all(rep.eig_g < rep.eig_f)
        assert rep.loewner_h > 0 and rep.loewner_f > 0
    assert applicable > 0


def test_lines_only_underconstrained_is_inapplicable(fig3):
    # in this topology keyframe 0 has no line edges, so C_f does not exist
    with pytest.raises(CertificateInapplicableError):
        theorem_certificate(fig3)


def test_lines_constraining_one_direction_is_inapplicable():
    graph, truth = generate(small_config(4))
    g = truth.linearization_point(graph)
    g.line_edges = g.line_edges[:1]
    g.line_landmarks = {g.line_edges[0].landmark_id: g.line_landmarks[g.line_edges[0].landmark_id]}
    with pytest.raises(CertificateInapplicableError):
        theorem_certificate(g)


def test_covariance_invariant_under_landmark_relabeling():
    graph, truth = generate(small_config(5))
    g = truth.linearization_point(graph)
    pids = list(g.point_landmarks)
    lids = list(g.line_landmarks)
    pmap = {j: 1000 - k for k, j in enumerate(pids)}
    lmap = {j: 2000 - k for k, j in enumerate(lids)}
    np.testing.assert_allclose(
        pose_covariance(relabel_landmarks(g, pmap, lmap), "both"), pose_covariance(g, "both"), rtol=1e-9, atol=1e-15
    )


def test_extra_edge_never_increases_covariance():
    rng = np.random.default_rng(1)
    for k in range(5):
        graph, truth = generate(random_instance_config(rng, [11, k]))
        g = truth.linearization_point(graph)
        C = pose_covariance(g, "points")
        # duplicate an existing point edge with an independent measurement of the same point
        fewer = g.copy()
        drop = int(rng.integers(len(g.point_edges)))
        fewer.point_edges = g.point_edges[:drop] + g.point_edges[drop + 1 :]
        try:
            C_fewer = pose_covariance(fewer, "points")
        except UnderconstrainedPoseError:
            continue
        D = C_fewer - C
        assert np.linalg.eigvalsh(0.5 * (D + D.T))[0] >= -1e-12 * np.abs(C).max()
        ev_f = np.sort(np.linalg.eigvalsh(C_fewer))
        ev = np.sort(np.linalg.eigvalsh(C))
        assert np.all(ev <= ev_f * (1 + 1e-9))


def test_monte_carlo_zero_noise_gives_zero_covariance():
    cfg = small_config(6, noise_scale=0.0, init_trans_sigma=0.0, init_rot_sigma=0.0, line_depth_scale=0.0)
    res = monte_carlo_covariance(cfg, trials=5, selector="points")
    np.testing.assert_allclose(res.empirical, 0.0, atol=1e-20)
    assert res.used == 5


def test_monte_carlo_is_deterministic():
    cfg = small_config(7)
    a = monte_carlo_covariance(cfg, trials=8, selector="points", master_seed=3)
    b = monte_carlo_covariance(cfg, trials=8, selector="points", master_seed=3)
    np.testing.assert_array_equal(a.empirical, b.empirical)
    c = monte_carlo_covariance(cfg, trials=8, selector="points", master_seed=4)
    assert not np.array_equal(a.empirical, c.empirical)


def test_monte_carlo_matches_analytic_roughly():
    cfg = small_config(8, num_points=30)
    res = monte_carlo_covariance(cfg, trials=300, selector="points")
    assert res.used == 300
    assert res.discrepancy < 0.35
    truth = build_scene(cfg)
    assert res.analytic.shape == (6 * len(truth.free_poses),) * 2
