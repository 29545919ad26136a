import math

import numpy as np
import pytest

from tacrep.errors import ConfigError
from tacrep.labels import (
    DEFAULT_BINNING,
    BinningSpec,
    ForceLabel,
    GraspOutcome,
    PoseClass,
    PoseDelta,
    SlipLabel,
    SlipState,
    TextileClass,
    class_to_pose,
    decode_pose_logits,
    denormalize_force,
    detect_slip_onsets,
    estimate_friction_coefficient,
    grasp_stable_array,
    label_slip,
    make_pose_bins,
    normalize_force,
    normalize_forces,
    pose_class_names,
    pose_delta_to_class,
    pose_to_class,
    poses_to_classes,
)


def test_slip_cone_edge_is_no_slip():
    assert label_slip(ForceLabel(3.0, 4.0, 10.0), mu=0.5) is SlipState.NO_SLIP
    assert label_slip(ForceLabel(3.0, 4.01, 10.0), mu=0.5) is SlipState.SLIP
    assert label_slip(ForceLabel(0.0, 0.0, 0.0), mu=0.5) is SlipState.NO_SLIP
    with pytest.raises(ConfigError):
        label_slip(ForceLabel(0.0, 0.0, 1.0), mu=0.0)


def test_normalize_force_clips_out_of_range():
    f = normalize_force(ForceLabel(2.0, -1.0, 12.0), fmax=[4.0, 4.0, 10.0])
    assert f.normalized
    np.testing.assert_allclose(f.as_array(), [0.5, -0.25, 1.0])
    back = denormalize_force(normalize_force(ForceLabel(1.0, 2.0, 3.0), [4.0, 4.0, 10.0]), [4.0, 4.0, 10.0])
    np.testing.assert_allclose(back.as_array(), [1.0, 2.0, 3.0])
    with pytest.raises(ConfigError):
        normalize_force(ForceLabel(1.0, 1.0, 1.0), fmax=[1.0, 0.0, 1.0])
    np.testing.assert_allclose(normalize_forces(np.array([[8.0, 0.0, -20.0]]), [4.0, 4.0, 10.0]), [[1.0, 0.0, -1.0]])


def test_normalized_force_must_be_bounded():
    with pytest.raises(ConfigError):
        ForceLabel(1.5, 0.0, 0.0, normalized=True)


def test_label_types_validate():
    with pytest.raises(ConfigError):
        SlipLabel(SlipState.SLIP, delta_force=[np.nan, 0.0, 0.0])
    with pytest.raises(ConfigError):
        PoseClass(0, 11, 3)
    with pytest.raises(ConfigError):
        TextileClass(20)
    assert TextileClass(19).textile_id == 19


def test_pose_bins_are_symmetric_and_increasing():
    spec = BinningSpec(range_limit=5.0)
    edges = make_pose_bins(spec)
    assert edges.shape == (12,)
    assert np.all(np.diff(edges) > 0)
    np.testing.assert_allclose(edges, -edges[::-1])
    assert edges[0] == -5.0 and edges[-1] == 5.0
    assert len(pose_class_names(spec)) == 11


def test_pose_to_class_centre_and_extremes():
    spec = BinningSpec(range_limit=5.0)
    inner = spec.inner_fraction * spec.range_limit
    assert pose_to_class(0.0, spec) == 5
    assert pose_to_class(inner, spec) == 6
    assert pose_to_class(100.0, spec) == 10
    assert pose_to_class(-100.0, spec) == 0
    np.testing.assert_array_equal(poses_to_classes(np.array([0.0, inner, -100.0]), spec), [5, 6, 0])


def test_class_to_pose_midpoint_falls_back_into_its_bin():
    spec = BinningSpec(range_limit=2.0)
    assert class_to_pose(5, spec) == 0.0
    for c in range(spec.n_bins):
        assert pose_to_class(class_to_pose(c, spec), spec) == c
    assert class_to_pose(4, spec) == pytest.approx(-class_to_pose(6, spec))
    edges = make_pose_bins(spec)
    assert class_to_pose(7, spec) == pytest.approx(math.sqrt(edges[7] * edges[8]))
    with pytest.raises(ConfigError):
        class_to_pose(11, spec)


def test_binning_spec_validation():
    with pytest.raises(ConfigError):
        BinningSpec(range_limit=1.0, n_bins=10)
    with pytest.raises(ConfigError):
        BinningSpec(range_limit=0.0)


def test_pose_delta_to_class_uses_default_binning():
    cls = pose_delta_to_class(PoseDelta(0.0, 5.0, -2.0))
    assert (cls.dx, cls.dy, cls.dtheta) == (5, 10, 0)
    assert set(DEFAULT_BINNING) == {"dx_mm", "dy_mm", "dtheta_deg"}


def test_decode_pose_logits_breaks_ties_low():
    logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
    np.testing.assert_array_equal(decode_pose_logits(logits), [0, 1])


def test_detect_slip_onsets_first_plateau_of_each_motion():
    tangential = [0.0, 1.0, 2.0, 3.0, 3.0, 3.0, 0.0, 1.0, 1.0]
    moving = [False, True, True, True, True, True, False, True, True]
    np.testing.assert_array_equal(
        np.flatnonzero(detect_slip_onsets(tangential, moving)),
        [3, 7],
    )


def test_estimate_friction_coefficient():
    forces = [ForceLabel(0.6, 0.8, 2.0), ForceLabel(1.2, 1.6, 4.0), ForceLabel(9.0, 0.0, 1.0)]
    assert estimate_friction_coefficient(forces, [True, True, False]) == pytest.approx(0.5)
    with pytest.raises(ConfigError):
        estimate_friction_coefficient(forces, [False, False, False])
    with pytest.raises(ConfigError):
        estimate_friction_coefficient(forces, [True])


def test_grasp_stability_margin():
    # mu 0.8, margen 0.5: |F_t| <= 0.4·|F_n| con contacto firme
    assert GraspOutcome.from_force(ForceLabel(0.3, 0.4, 2.0), mu=0.8).success
    assert not GraspOutcome.from_force(ForceLabel(0.6, 0.8, 2.0), mu=0.8).success
    assert not GraspOutcome.from_force(ForceLabel(0.0, 0.0, 0.5), mu=0.8).success
    forces = np.array([[0.3, 0.4, 2.0], [0.6, 0.8, 2.0], [0.0, 0.0, 0.5]])
    assert grasp_stable_array(forces, mu=0.8).tolist() == [1, 0, 0]
