import pytest

from conftest import FIG3_LINE_EDGES, FIG3_POINT_EDGES, fig3_graph
from plba.errors import GraphValidationError, InvalidArgumentError
from plba.graph import FactorGraph, Selector, relabel_landmarks
from plba.landmarks import PointObservation


def test_selector_parse():
    assert Selector.parse("points") is Selector.POINTS
    assert Selector.parse("lines-only") is Selector.LINES
    assert Selector.parse(Selector.BOTH) is Selector.BOTH
    assert Selector.POINTS.uses_points and not Selector.POINTS.uses_lines
    with pytest.raises(InvalidArgumentError):
        Selector.parse("planes")


def test_edges_are_sorted_regardless_of_insertion_order(fig3):
    g = FactorGraph(
        fig3.intrinsics,
        fig3.noise,
        fig3.free_poses,
        fig3.fixed_poses,
        fig3.point_landmarks,
        fig3.line_landmarks,
        list(reversed(fig3.point_edges)),
        list(reversed(fig3.line_edges)),
    )
    assert [(e.keyframe_id, e.landmark_id) for e in g.point_edges] == FIG3_POINT_EDGES
    assert [(e.keyframe_id, e.landmark_id) for e in g.line_edges] == FIG3_LINE_EDGES


def test_fig3_graph_is_valid(fig3):
    fig3.validate()
    fig3.validate("points")
    assert fig3.num_state_variables("points") == 12 + 12
    assert fig3.num_state_variables("lines") == 12 + 3 * 4
    assert fig3.keyframe_ids == [0, 1, 2, 3]


def test_validation_reports_missing_references(fig3):
    g = fig3.copy()
    g.point_edges.append(PointObservation(7, 1, 300.0, 200.0, 3.0))
    g.point_edges.append(PointObservation(0, 99, 300.0, 200.0, 3.0))
    with pytest.raises(GraphValidationError, match="unknown keyframe 7.*unknown landmark 99"):
        g.validate()


def test_validation_rejects_unobserved_free_pose(fig3):
    # keyframe 0 sees points only, so a lines-only selection leaves it without edges
    g = fig3.copy()
    g.line_edges = [e for e in g.line_edges if e.keyframe_id != 0]
    with pytest.raises(GraphValidationError, match="free keyframe 0 has no edges"):
        g.validate("lines")
    assert g.unobserved_free_poses("lines") == [0]


def test_validation_requires_gauge(fig3):
    g = fig3.copy()
    g.fixed_poses = {}
    g.point_edges = [e for e in g.point_edges if e.keyframe_id < 2]
    g.line_edges = [e for e in g.line_edges if e.keyframe_id < 2]
    g.point_landmarks = {j: p for j, p in g.point_landmarks.items() if j in {e.landmark_id for e in g.point_edges}}
    g.line_landmarks = {}
    g.line_edges = []
    with pytest.raises(GraphValidationError, match="gauge"):
        g.validate()
    g.gauge_declared = True
    g.validate()


def test_line_needs_two_views(fig3):
    g = fig3.copy()
    g.line_edges = [e for e in g.line_edges if (e.keyframe_id, e.landmark_id) != (0, 11)]
    with pytest.raises(GraphValidationError, match="line landmark 11"):
        g.validate()


def test_copy_does_not_share_containers(fig3):
    g = fig3.copy()
    g.point_edges.pop()
    g.free_poses.pop(0)
    assert len(fig3.point_edges) == 8
    assert 0 in fig3.free_poses


def test_without_lines(fig3):
    g = fig3.without_lines()
    assert g.line_edges == [] and g.line_landmarks == {}
    assert len(fig3.line_edges) == 4


def test_relabel_landmarks_keeps_structure():
    g = fig3_graph()
    r = relabel_landmarks(g, {1: 40, 2: 30, 3: 20, 4: 10}, {11: 5, 12: 6})
    assert sorted(r.point_landmarks) == [10, 20, 30, 40]
    assert len(r.point_edges) == 8
    r.validate()
