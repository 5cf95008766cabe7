import numpy as np
import pytest

from teleop_mpc.exceptions import ContractViolationError
from teleop_mpc.model import (
    AugmentedTarget,
    DoubleIntegrator,
    PlanarArm,
    augment_model,
    eval_flow,
    fd_flow_jacobians,
    forward_kinematics,
    linearize,
    ee_jacobian,
    rk4_step,
)
from oracles import central_jacobian, planar_fk_homogeneous


def test_flow_kinematic_arm_is_identity_in_input():
    arm = PlanarArm([0.5, 0.5, 0.3])
    u = np.array([0.1, -0.2, 0.3])
    assert np.array_equal(eval_flow(arm, np.zeros(3), u, 0.0), u)


def test_flow_double_integrator_chain():
    di = DoubleIntegrator(dim=3)
    x = np.array([1.0, 0, 0, 0, 0, 0])
    a = np.array([0.0, 0, -1.0])
    dx = eval_flow(di, x, a, 0.0)
    assert np.array_equal(dx[:3], np.zeros(3))
    assert np.array_equal(dx[3:], a)


def test_flow_arm_at_rest_is_zero():
    arm = PlanarArm([1.0, 1.0])
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.normal(size=2)
        assert np.array_equal(eval_flow(arm, x, np.zeros(2), 0.0), np.zeros(2))


def test_flow_dimension_mismatch_rejected():
    arm = PlanarArm([1.0, 1.0])
    with pytest.raises(ContractViolationError):
        eval_flow(arm, np.zeros(3), np.zeros(2), 0.0)
    with pytest.raises(ContractViolationError):
        eval_flow(arm, np.zeros(2), np.zeros(3), 0.0)


def test_augmented_block_derivative():
    aug = augment_model(DoubleIntegrator(dim=3))
    target = AugmentedTarget.make([1.0, 0, 0], [0.1, 0, 0])
    x = aug.augment_state(np.zeros(6), target)
    dx = eval_flow(aug, x, np.zeros(3), 0.0)
    assert np.array_equal(dx[aug.slice_xd], [0.1, 0, 0])
    assert np.array_equal(dx[aug.slice_vd], np.zeros(3))


def test_augmented_block_frozen_when_vd_zero():
    aug = augment_model(PlanarArm([1.0, 1.0]))
    target = AugmentedTarget.make([0.3, 0.4], [0.0, 0.0])
    x = aug.augment_state(np.array([0.2, -0.1]), target)
    dx = eval_flow(aug, x, np.array([1.0, -1.0]), 0.0)
    assert np.array_equal(dx[aug.aug_start:], np.zeros(4))


def test_augmented_block_integrates_exactly():
    aug = augment_model(DoubleIntegrator(dim=3))
    target = AugmentedTarget.make([0.0, 0, 0], [0.2, 0, 0])
    x = aug.augment_state(np.zeros(6), target)
    x1 = rk4_step(aug, x, np.zeros(3), 0.0, 0.5)
    assert np.allclose(x1[aug.slice_xd], [0.1, 0, 0], atol=1e-12)
    assert np.allclose(x1[aug.slice_vd], [0.2, 0, 0], atol=1e-15)


def test_fk_two_link_extended():
    arm = PlanarArm([1.0, 1.0])
    assert np.allclose(forward_kinematics(arm, np.zeros(2)), [2.0, 0.0])


def test_fk_two_link_rotated():
    arm = PlanarArm([1.0, 1.0])
    assert np.allclose(forward_kinematics(arm, [np.pi / 2, 0.0]), [0.0, 2.0], atol=1e-12)


def test_fk_three_link_matches_homogeneous_oracle():
    lengths = [0.5, 0.5, 0.3]
    q = np.array([0.3, -0.2, 0.5])
    arm = PlanarArm(lengths)
    expected = planar_fk_homogeneous(lengths, q)
    assert np.allclose(forward_kinematics(arm, q), expected, atol=1e-12)


def test_linearize_kinematic_arm():
    arm = PlanarArm([1.0, 1.0, 1.0])
    A, B = linearize(arm, np.zeros(3), np.zeros(3), 0.0)
    assert np.array_equal(A, np.zeros((3, 3)))
    assert np.array_equal(B, np.eye(3))


def test_linearize_augmented_wrapper_structure():
    aug = augment_model(PlanarArm([1.0, 1.0]))
    x = np.zeros(aug.n_x)
    A, B = linearize(aug, x, np.zeros(2), 0.0)
    d = aug.target_dim
    assert np.array_equal(A[aug.slice_xd, aug.slice_vd], np.eye(d))
    rest = A.copy()
    rest[aug.slice_xd, aug.slice_vd] = 0.0
    assert np.array_equal(rest[aug.aug_start:, :], np.zeros((2 * d, aug.n_x)))
    assert np.array_equal(B[aug.aug_start:, :], np.zeros((2 * d, aug.n_u)))


def test_ee_jacobian_matches_finite_differences():
    arm = PlanarArm([1.0, 1.0])
    rng = np.random.default_rng(1)
    for _ in range(20):
        q = rng.uniform(-np.pi, np.pi, size=2)
        J = ee_jacobian(arm, q)
        J_fd = central_jacobian(lambda x: arm.ee(x), q)
        assert np.max(np.abs(J - J_fd)) < 1e-5


@pytest.mark.parametrize(
    "model",
    [
        DoubleIntegrator(dim=3),
        PlanarArm([0.5, 0.5, 0.3]),
        augment_model(DoubleIntegrator(dim=2)),
        augment_model(PlanarArm([0.5, 0.5, 0.3])),
    ],
    ids=["double-integrator", "arm", "aug-di", "aug-arm"],
)
def test_analytic_and_fd_jacobians_agree(model):
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.uniform(-1.5, 1.5, size=model.n_x)
        u = rng.uniform(-1.0, 1.0, size=model.n_u)
        A, B = linearize(model, x, u, 0.0)
        A_fd, B_fd = fd_flow_jacobians(model, x, u, 0.0)
        assert np.max(np.abs(A - A_fd)) < 1e-5
        assert np.max(np.abs(B - B_fd)) < 1e-5


def test_augmentation_preserves_plant_flow():
    plant = PlanarArm([0.4, 0.6, 0.2])
    aug = augment_model(plant)
    rng = np.random.default_rng(3)
    for _ in range(50):
        xp = rng.normal(size=plant.n_x)
        u = rng.normal(size=plant.n_u)
        target = AugmentedTarget.make(rng.normal(size=2), 0.3 * rng.normal(size=2))
        x = aug.augment_state(xp, target)
        assert np.array_equal(aug.flow(x, u, 0.0)[aug.slice_plant], plant.flow(xp, u, 0.0))


def test_target_rows_of_b_are_zero():
    for plant in (DoubleIntegrator(dim=3), PlanarArm([1.0, 0.5])):
        aug = augment_model(plant)
        _, B = linearize(aug, np.zeros(aug.n_x), np.zeros(aug.n_u), 0.0)
        assert np.array_equal(B[aug.aug_start:, :], np.zeros((2 * aug.target_dim, aug.n_u)))


def test_fk_of_augmented_equals_fk_of_plant_block():
    plant = PlanarArm([0.5, 0.5, 0.3])
    aug = augment_model(plant)
    rng = np.random.default_rng(5)
    for _ in range(20):
        xp = rng.normal(size=3)
        target = AugmentedTarget.make(rng.normal(size=2), np.zeros(2))
        x = aug.augment_state(xp, target)
        assert np.array_equal(forward_kinematics(aug, x), forward_kinematics(plant, xp))


def test_target_velocity_clamped_at_ingestion():
    t = AugmentedTarget.make([0.0, 0.0], [3.0, 4.0], v_max=1.0)
    assert np.isclose(np.linalg.norm(t.v_d), 1.0)
    assert np.allclose(t.v_d, [0.6, 0.8])
