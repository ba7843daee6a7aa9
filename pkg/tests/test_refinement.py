"""Jacobian correctness and least-squares refinement behavior."""
import numpy as np
import pytest

from stereovo import (
    Cauchy,
    Correspondence,
    Gaussian,
    InsufficientCorrespondences,
    Mlesac,
    Msac,
    NoiseParamBlock,
    OptimizerDiverged,
    Pose,
    PseudoHuber,
    Ransac,
    RefinementScope,
    StereoMeasurement,
    jacobian,
    refine,
    rotation_angle,
    se3_exp,
    stereo_project,
    triangulate,
)
from conftest import make_correspondences

ALL_SCOPES = (RefinementScope.MOTION_ONLY,
              RefinementScope.MOTION_STRUCTURE,
              RefinementScope.MOTION_STRUCTURE_NOISE)


def _random_state(rng, calib, n=6):
    motion = se3_exp(np.concatenate([rng.normal(0, 0.3, 3),
                                     rng.normal(0, 0.05, 3)]))
    corr, _ = make_correspondences(rng, motion, calib, n,
                                   sigma_u=0.5, sigma_v=0.5)
    pose = se3_exp(np.concatenate([rng.normal(0, 0.05, 3),
                                   rng.normal(0, 0.01, 3)])).compose(motion)
    return corr, pose


def _random_noise_block(rng, d):
    params = np.concatenate([rng.uniform(-0.3, 0.3, d),
                             rng.uniform(-0.2, 0.2, d * (d - 1) // 2)])
    return NoiseParamBlock.unpack(params, d)


def _fd_check(scope, pose, corr, calib, noise, h=1e-6):
    """Max relative deviation between analytic and central-FD Jacobians."""
    points = np.stack([c.point.as_array() for c in corr])
    blocks = jacobian(scope, pose, corr, calib, points=points, noise=noise)
    worst = 0.0

    def rel(err, ref):
        return err / max(1.0, float(np.max(np.abs(ref))))

    num = np.empty_like(blocks.pose)
    for j in range(6):
        step = np.zeros(6)
        step[j] = h
        fp = jacobian(scope, se3_exp(step).compose(pose), corr, calib,
                      points=points, noise=noise).residuals
        fm = jacobian(scope, se3_exp(-step).compose(pose), corr, calib,
                      points=points, noise=noise).residuals
        num[:, :, j] = (fp - fm) / (2 * h)
    worst = max(worst, rel(float(np.max(np.abs(num - blocks.pose))), blocks.pose))

    if blocks.structure is not None:
        num = np.empty_like(blocks.structure)
        for j in range(3):
            dp = np.zeros_like(points)
            dp[:, j] = h
            fp = jacobian(scope, pose, corr, calib, points=points + dp,
                          noise=noise).residuals
            fm = jacobian(scope, pose, corr, calib, points=points - dp,
                          noise=noise).residuals
            # moving every point at once still isolates the per-point block
            # because residual i depends only on point i
            num[:, :, j] = (fp - fm) / (2 * h)
        worst = max(worst, rel(float(np.max(np.abs(num - blocks.structure))),
                               blocks.structure))

    if blocks.noise is not None:
        base = noise.pack()
        num = np.empty_like(blocks.noise)
        for j in range(base.shape[0]):
            dp = np.zeros_like(base)
            dp[j] = h
            fp = jacobian(scope, pose, corr, calib, points=points,
                          noise=NoiseParamBlock.unpack(base + dp, noise.dim)
                          ).residuals
            fm = jacobian(scope, pose, corr, calib, points=points,
                          noise=NoiseParamBlock.unpack(base - dp, noise.dim)
                          ).residuals
            num[:, :, j] = (fp - fm) / (2 * h)
        worst = max(worst, rel(float(np.max(np.abs(num - blocks.noise))),
                               blocks.noise))
    return worst


@pytest.mark.parametrize("scope", ALL_SCOPES)
def test_jacobian_matches_finite_differences(scope, kitti_calib):
    rng = np.random.default_rng(10)
    d = 3 if scope is RefinementScope.MOTION_ONLY else 6
    for _ in range(30):
        corr, pose = _random_state(rng, kitti_calib)
        noise = _random_noise_block(rng, d)
        assert _fd_check(scope, pose, corr, kitti_calib, noise) < 1e-5


def test_jacobian_prev_block_is_pose_independent(kitti_calib):
    rng = np.random.default_rng(11)
    corr, pose = _random_state(rng, kitti_calib)
    blocks = jacobian(RefinementScope.MOTION_STRUCTURE, pose, corr, kitti_calib)
    # previous-frame residuals live in rows 0..2 and never feel the motion
    assert np.all(blocks.pose[:, :3, :] == 0.0)
    assert np.any(blocks.pose[:, 3:, :] != 0.0)


def test_jacobian_defaults_and_validation(kitti_calib):
    rng = np.random.default_rng(12)
    corr, pose = _random_state(rng, kitti_calib)
    blocks = jacobian(RefinementScope.MOTION_ONLY, pose, corr, kitti_calib)
    assert blocks.residuals.shape == (len(corr), 3)
    assert blocks.structure is None and blocks.noise is None
    with pytest.raises(ValueError):
        jacobian(RefinementScope.MOTION_ONLY, pose, corr, kitti_calib,
                 noise=NoiseParamBlock.identity(6))
    behind = Pose(np.eye(3), np.array([0.0, 0.0, -500.0]))
    with pytest.raises(OptimizerDiverged):
        jacobian(RefinementScope.MOTION_ONLY, behind, corr, kitti_calib)


# --- noise parameter block ----------------------------------------------------

def test_noise_block_pack_unpack_roundtrip():
    rng = np.random.default_rng(13)
    for d in (3, 6):
        block = _random_noise_block(rng, d)
        again = NoiseParamBlock.unpack(block.pack(), d)
        np.testing.assert_allclose(again.sqrt_info, block.sqrt_info, atol=1e-15)
        assert block.n_params == d * (d + 1) // 2
        # sigma is the inverse of L^T L
        np.testing.assert_allclose(
            block.sigma() @ (block.sqrt_info.T @ block.sqrt_info),
            np.eye(d), atol=1e-10)


def test_noise_block_validation():
    with pytest.raises(ValueError):
        NoiseParamBlock(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        NoiseParamBlock(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert NoiseParamBlock.identity(4).log_det_sigma() == 0.0


# --- refinement ---------------------------------------------------------------

def _exact_correspondences(motion, calib, pts):
    """Measurements rebuilt from the stored points, byte-for-byte.

    Uses the vectorized projection (the same arithmetic the residual
    evaluation runs) and stores the generating points themselves, so the
    residual at the true pose is exactly zero in floating point.
    """
    from stereovo import Point3, stereo_project_many
    obs_prev = stereo_project_many(Pose.identity(), pts, calib)
    obs_cur = stereo_project_many(motion, pts, calib)
    out = []
    for p, row in zip(pts, np.hstack([obs_prev, obs_cur])):
        out.append(Correspondence(z=StereoMeasurement(*row),
                                  point=Point3.from_array(p)))
    return out


def test_refine_zero_residual_early_return(kitti_calib):
    # measurements generated by projecting the exact stored points: the
    # residual is bitwise zero at the true pose, so no iterations run
    motion = se3_exp([0.1, -0.05, 0.8, 0.01, -0.02, 0.005])
    rng = np.random.default_rng(14)
    _, pts = make_correspondences(rng, motion, kitti_calib, 20)
    corr = _exact_correspondences(motion, kitti_calib, pts)
    for scope in ALL_SCOPES:
        res = refine(scope, motion, corr, kitti_calib)
        assert res.status == "converged"
        assert res.iterations == 0
        assert res.final_cost == 0.0


def test_refine_noise_free_recovery_all_scopes(kitti_calib):
    motion = se3_exp([0.2, -0.1, 1.0, 0.02, -0.01, 0.03])
    rng = np.random.default_rng(15)
    corr, _ = make_correspondences(rng, motion, kitti_calib, 60)
    start = se3_exp([0.05, 0.05, -0.08, 0.01, 0.005, -0.01]).compose(motion)
    for scope in (RefinementScope.MOTION_ONLY,
                  RefinementScope.MOTION_STRUCTURE):
        res = refine(scope, start, corr, kitti_calib)
        assert rotation_angle(res.pose.rotation.T @ motion.rotation) < 1e-6
        assert np.linalg.norm(res.pose.translation - motion.translation) < 1e-6
        assert res.final_cost <= res.initial_cost
    # the noise scope runs after an initializer in the pipeline; from a
    # near-truth start it must hold the pose, but from a grossly wrong one
    # the covariance block may explain the error away
    near = se3_exp(1e-4 * np.array([1.0, -1.0, 1.0, 0.1, 0.1, -0.1]))
    res = refine(RefinementScope.MOTION_STRUCTURE_NOISE, near.compose(motion),
                 corr, kitti_calib)
    assert rotation_angle(res.pose.rotation.T @ motion.rotation) < 1e-6
    assert np.linalg.norm(res.pose.translation - motion.translation) < 1e-6
    assert res.final_cost <= res.initial_cost


def test_refine_cost_history_monotone(kitti_calib):
    motion = se3_exp([0.3, 0.0, 1.0, 0.0, 0.02, 0.0])
    rng = np.random.default_rng(16)
    corr, _ = make_correspondences(rng, motion, kitti_calib, 80,
                                   sigma_u=1.0, sigma_v=1.0)
    start = se3_exp([0.1, -0.1, 0.1, 0.02, 0.0, -0.02]).compose(motion)
    for scope in ALL_SCOPES:
        res = refine(scope, start, corr, kitti_calib)
        hist = np.array(res.cost_history)
        assert np.all(np.diff(hist) <= 0.0)
        assert res.final_cost == hist[-1]
        assert res.initial_cost == hist[0]


def test_refine_structure_returns_points(kitti_calib):
    motion = se3_exp([0.0, 0.0, 0.5, 0.0, 0.0, 0.0])
    rng = np.random.default_rng(17)
    corr, true_pts = make_correspondences(rng, motion, kitti_calib, 40,
                                          sigma_u=0.3, sigma_v=0.3)
    res = refine(RefinementScope.MOTION_STRUCTURE, motion, corr, kitti_calib)
    assert res.structure is not None and res.structure.shape == (40, 3)
    start = np.stack([c.point.as_array() for c in corr])
    # refined structure should sit closer to the truth than the
    # triangulated-from-noise starting points
    assert (np.linalg.norm(res.structure - true_pts, axis=1).mean()
            < np.linalg.norm(start - true_pts, axis=1).mean())
    res_mo = refine(RefinementScope.MOTION_ONLY, motion, corr, kitti_calib)
    assert res_mo.structure is None and res_mo.noise is None


def test_refine_noise_scope_recovers_anisotropy(kitti_calib):
    motion = se3_exp([0.1, 0.0, 0.8, 0.0, 0.01, 0.0])
    rng = np.random.default_rng(18)
    corr, _ = make_correspondences(rng, motion, kitti_calib, 300,
                                   sigma_u=2.0, sigma_v=0.5)
    res = refine(RefinementScope.MOTION_STRUCTURE_NOISE, motion, corr,
                 kitti_calib)
    assert res.noise is not None
    sigma = res.noise.sigma()
    # u-type components (0, 1, 3, 4) carry sigma=2 noise, v-type (2, 5)
    # carry sigma=0.5; the fitted covariance must order them accordingly
    u_var = np.mean(sigma[[0, 1, 3, 4], [0, 1, 3, 4]])
    v_var = np.mean(sigma[[2, 5], [2, 5]])
    assert u_var > 4.0 * v_var


def test_refine_noise_scope_scale_compensation(kitti_calib):
    """Scaling all errors by s while replacing Sigma^-1 with Sigma^-1/s^2
    leaves the data term invariant: the costs differ exactly by the
    |Sigma| normalizer offset, and the early covariance trajectory stays
    on the compensated track. (The full runs are not comparable: once the
    pose and structure respond, the two noise realizations are genuinely
    different problems.)"""
    motion = se3_exp([0.1, 0.0, 0.8, 0.0, 0.01, 0.0])
    rng = np.random.default_rng(19)
    _, pts = make_correspondences(rng, motion, kitti_calib, 50)
    s = 2.0
    noise = rng.normal(0.0, 1.0, (50, 6))
    runs = []
    for scale, model in [(1.0, Cauchy.identity(6)),
                         (s, Cauchy(np.eye(6) / s))]:
        corr = []
        for c, n in zip(_exact_correspondences(motion, kitti_calib, pts),
                        noise):
            z = np.array([c.z.ul_prev, c.z.ur_prev, c.z.v_prev,
                          c.z.ul_cur, c.z.ur_cur, c.z.v_cur]) + scale * n
            corr.append(Correspondence(z=StereoMeasurement(*z),
                                       point=c.point))
        runs.append(refine(RefinementScope.MOTION_STRUCTURE_NOISE, motion,
                           corr, kitti_calib, model=model,
                           max_iterations=5))
    a, b = runs
    n_pts, d = 50, 6
    offset = n_pts / (d + 1.0) * 2.0 * d * np.log(s)
    assert abs((b.initial_cost - a.initial_cost) - offset) < 1e-6
    assert a.iterations == 5 and b.iterations == 5
    # Sigma genuinely moved, and moved identically modulo the compensation
    assert not np.allclose(a.noise.sqrt_info, np.eye(6), atol=1e-3)
    assert np.allclose(b.noise.sqrt_info * s, a.noise.sqrt_info,
                       rtol=1e-6, atol=1e-8)


def test_refine_weights_mask_outliers(kitti_calib):
    motion = se3_exp([0.2, 0.0, 1.0, 0.0, 0.0, 0.01])
    rng = np.random.default_rng(20)
    corr, _ = make_correspondences(rng, motion, kitti_calib, 30)
    bad = corr[5]
    corr[5] = Correspondence(
        z=StereoMeasurement(bad.z.ul_prev, bad.z.ur_prev, bad.z.v_prev,
                            bad.z.ul_cur + 80.0, bad.z.ur_cur + 75.0,
                            bad.z.v_cur - 40.0),
        point=bad.point)
    w = np.ones(30)
    w[5] = 0.0
    start = se3_exp([0.03, -0.03, 0.05, 0.005, 0.0, -0.005]).compose(motion)
    res = refine(RefinementScope.MOTION_ONLY, start, corr, kitti_calib,
                 weights=w)
    assert rotation_angle(res.pose.rotation.T @ motion.rotation) < 1e-9
    assert np.linalg.norm(res.pose.translation - motion.translation) < 1e-9
    with pytest.raises(ValueError):
        refine(RefinementScope.MOTION_ONLY, start, corr, kitti_calib,
               weights=-w)


def test_refine_robust_models_accepted(kitti_calib):
    motion = se3_exp([0.1, 0.0, 0.6, 0.0, 0.005, 0.0])
    rng = np.random.default_rng(21)
    corr, _ = make_correspondences(rng, motion, kitti_calib, 50,
                                   sigma_u=0.5, sigma_v=0.5)
    start = se3_exp([0.02, 0.02, -0.04, 0.0, 0.0, 0.004]).compose(motion)
    for model in (Msac(threshold=3.0), PseudoHuber(b=2.0), Cauchy.identity(3)):
        res = refine(RefinementScope.MOTION_ONLY, start, corr, kitti_calib,
                     model=model)
        assert np.linalg.norm(res.pose.translation - motion.translation) < 0.05
    res = refine(RefinementScope.MOTION_STRUCTURE, start, corr, kitti_calib,
                 model=Cauchy.identity(6))
    assert np.linalg.norm(res.pose.translation - motion.translation) < 0.05


def test_refine_model_validation(kitti_calib):
    rng = np.random.default_rng(22)
    motion = se3_exp([0.0, 0.0, 0.5, 0.0, 0.0, 0.0])
    corr, _ = make_correspondences(rng, motion, kitti_calib, 10)
    with pytest.raises(ValueError):
        refine(RefinementScope.MOTION_ONLY, motion, corr, kitti_calib,
               model=Ransac())
    with pytest.raises(ValueError):
        refine(RefinementScope.MOTION_ONLY, motion, corr, kitti_calib,
               model=Mlesac(cov=np.eye(3), nu=10.0))
    with pytest.raises(ValueError):
        refine(RefinementScope.MOTION_STRUCTURE_NOISE, motion, corr,
               kitti_calib, model=PseudoHuber())
    with pytest.raises(ValueError):
        refine(RefinementScope.MOTION_STRUCTURE_NOISE, motion, corr,
               kitti_calib, model=Cauchy.identity(3))
    with pytest.raises(ValueError):
        refine(RefinementScope.MOTION_ONLY, motion, corr, kitti_calib,
               model=Cauchy.identity(6))


def test_refine_too_few_points_raises(kitti_calib):
    rng = np.random.default_rng(23)
    motion = se3_exp([0.0, 0.0, 0.5, 0.0, 0.0, 0.0])
    corr, _ = make_correspondences(rng, motion, kitti_calib, 3)
    with pytest.raises(InsufficientCorrespondences):
        refine(RefinementScope.MOTION_ONLY, motion, corr, kitti_calib)


def test_refine_behind_camera_start_raises(kitti_calib):
    rng = np.random.default_rng(24)
    motion = se3_exp([0.0, 0.0, 0.5, 0.0, 0.0, 0.0])
    corr, _ = make_correspondences(rng, motion, kitti_calib, 10)
    behind = Pose(np.eye(3), np.array([0.0, 0.0, -500.0]))
    with pytest.raises(OptimizerDiverged):
        refine(RefinementScope.MOTION_ONLY, behind, corr, kitti_calib)
