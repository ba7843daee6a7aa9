"""Levenberg-Marquardt refinement of motion, structure and noise parameters.

Three nested variable scopes over the same stereo reprojection residuals:

* MOTION_ONLY: 3-D residual per point, current frame only; the triangulated
  points are fixed and only the 6-DoF motion moves.
* MOTION_STRUCTURE: 6-D residual (previous and current frame); the points
  re-enter as variables. The previous frame is the gauge and stays pinned at
  identity; only the relative motion and the points move.
* MOTION_STRUCTURE_NOISE: additionally optimizes a Cauchy covariance through
  its square-root information factor L (Sigma^-1 = L^T L, lower triangular,
  log-parameterized diagonal), with the normalization term
  N/(d+1) * log|Sigma| keeping the scale identifiable.

The solver is plain LM with multiplicative damping and a Schur complement
over the per-point 3x3 blocks, so structure scopes stay O(N) per iteration.
Updates to the pose are left-multiplicative: pose <- exp(delta) * pose with
twist layout [translation, rotation].
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InsufficientCorrespondences, OptimizerDiverged
from .geometry import MIN_DEPTH, Pose, StereoCalibration, se3_exp
from .noise_models import Cauchy, Gaussian, Msac, NoiseModel, PseudoHuber

LM_LAMBDA0 = 1e-4
LM_LAMBDA_MAX = 1e15
LM_LAMBDA_MIN = 1e-12
GRADIENT_TOL = 1e-9
RELATIVE_COST_TOL = 1e-9
MAX_ITERATIONS = 100
_DIAG_FLOOR = 1e-10
# Trust region for the log-diagonal noise update per accepted step. The
# whitening scale must not outrun the pose/structure variables: letting it
# jump freely stalls the pose in a heavy-tail plateau of its own making.
NOISE_MAX_LOG_STEP = 0.5
# The structure variables can exactly absorb the previous-frame residuals,
# so the joint covariance MLE is unbounded below: |Sigma| -> 0 sends the
# cost to -inf. Three guards bound it. Each log(diag L) is capped at
# log(1e2), a 0.01 px error floor matching the covariance eigenvalue floor
# of the EM estimator; the caps are handled as an active set (gradient
# entries pinned at the cap are frozen).
NOISE_LOG_DIAG_CAP = float(np.log(1e2))
# The spread of log(diag L) is capped: error scales of one pixel detector
# do not differ by a factor beyond 16, and an uncapped spread funds the
# collapse by pushing exactly the absorbable components.
NOISE_MAX_LOG_SPREAD = float(np.log(16.0))
# Backstop on the precision spectrum: correlations can reroute some of the
# collapse through the off-diagonal entries, which the diagonal caps do not
# see, so eigenvalues of Sigma^-1 = L^T L are clamped to the same error
# floor and to a generous condition bound.
NOISE_MAX_PRECISION = 1e4
NOISE_MAX_CONDITION = 1e6


class RefinementScope(Enum):
    MOTION_ONLY = "motion"
    MOTION_STRUCTURE = "ba"
    MOTION_STRUCTURE_NOISE = "ba-noise"


@dataclass(frozen=True)
class NoiseParamBlock:
    """Square-root information factor of the optimized error covariance.

    sqrt_info is lower triangular with positive diagonal and
    Sigma^-1 = sqrt_info^T @ sqrt_info. The packed parameter vector is
    [log(diag) (d entries), strict lower triangle row-major (d(d-1)/2)].
    """

    sqrt_info: np.ndarray

    def __post_init__(self) -> None:
        L = np.array(self.sqrt_info, dtype=np.float64)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError("sqrt_info must be square")
        if np.max(np.abs(np.triu(L, 1))) != 0.0:
            raise ValueError("sqrt_info must be lower triangular")
        if np.any(np.diag(L) <= 0.0):
            raise ValueError("sqrt_info diagonal must be positive")
        L.setflags(write=False)
        object.__setattr__(self, "sqrt_info", L)

    @classmethod
    def identity(cls, dim: int) -> "NoiseParamBlock":
        return cls(np.eye(dim))

    @property
    def dim(self) -> int:
        return self.sqrt_info.shape[0]

    @property
    def n_params(self) -> int:
        d = self.dim
        return d * (d + 1) // 2

    def pack(self) -> np.ndarray:
        d = self.dim
        L = self.sqrt_info
        params = [np.log(np.diag(L))]
        params.append(L[np.tril_indices(d, -1)])
        return np.concatenate(params)

    @classmethod
    def unpack(cls, params, dim: int) -> "NoiseParamBlock":
        params = np.asarray(params, dtype=float).reshape(dim * (dim + 1) // 2)
        L = np.zeros((dim, dim))
        L[np.diag_indices(dim)] = np.exp(params[:dim])
        L[np.tril_indices(dim, -1)] = params[dim:]
        return cls(L)

    def log_det_sigma(self) -> float:
        return float(-2.0 * np.sum(np.log(np.diag(self.sqrt_info))))

    def sigma(self) -> np.ndarray:
        L = self.sqrt_info
        return np.linalg.inv(L.T @ L)


@dataclass(frozen=True)
class RefinementResult:
    pose: Pose
    structure: np.ndarray | None
    noise: NoiseParamBlock | None
    initial_cost: float
    final_cost: float
    iterations: int
    status: str
    cost_history: tuple[float, ...]


@dataclass(frozen=True)
class JacobianBlocks:
    """Analytic derivatives of the whitened residuals f_i = L e_i.

    residuals: (N, d); pose: (N, d, 6) wrt a left-multiplicative twist
    [translation, rotation]; structure: (N, d, 3) wrt each point, None for
    the motion-only scope; noise: (N, d, n_params) wrt the packed noise
    parameters, None unless the scope optimizes noise.
    """

    residuals: np.ndarray
    pose: np.ndarray
    structure: np.ndarray | None
    noise: np.ndarray | None


def _rho_and_weight(model: NoiseModel):
    """Radial kernel rho(s) and its derivative in s = ||f||^2."""
    if isinstance(model, Gaussian):
        return (lambda s: s), (lambda s: np.ones_like(s))
    if isinstance(model, PseudoHuber):
        b2 = model.b * model.b
        return (lambda s: 2.0 * b2 * (np.sqrt(1.0 + s / b2) - 1.0)), \
               (lambda s: 1.0 / np.sqrt(1.0 + s / b2))
    if isinstance(model, Msac):
        t2 = model.threshold ** 2
        return (lambda s: np.minimum(s, t2)), \
               (lambda s: (s < t2).astype(float))
    if isinstance(model, Cauchy):
        return (lambda s: np.log1p(s)), (lambda s: 1.0 / (1.0 + s))
    raise ValueError(f"{type(model).__name__} cannot drive least-squares "
                     "refinement")


def _extract_arrays(correspondences, weights):
    points = np.stack([c.point.as_array() for c in correspondences])
    z_prev = np.stack([c.z.prev() for c in correspondences])
    z_cur = np.stack([c.z.cur() for c in correspondences])
    if weights is None:
        w = np.array([c.weight for c in correspondences], dtype=float)
    else:
        w = np.asarray(weights, dtype=float).reshape(len(correspondences))
    if np.any(w < 0.0):
        raise ValueError("weights must be non-negative")
    return points, z_prev, z_cur, w


def _project_stack(p, calib):
    """Stereo projection of (N,3) camera points; flags non-positive depths."""
    ok = p[:, 2] > MIN_DEPTH
    z = np.where(ok, p[:, 2], 1.0)
    iz = calib.focal / z
    proj = np.column_stack([iz * p[:, 0] + calib.u0,
                            iz * (p[:, 0] - calib.baseline) + calib.u0,
                            iz * p[:, 1] + calib.v0])
    return proj, ok


def _proj_derivative(p, calib):
    """d(projection)/d(camera point) as an (N, 3, 3) stack."""
    n = p.shape[0]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    iz = calib.focal / z
    iz2 = iz / z
    D = np.zeros((n, 3, 3))
    D[:, 0, 0] = iz
    D[:, 0, 2] = -iz2 * x
    D[:, 1, 0] = iz
    D[:, 1, 2] = -iz2 * (x - calib.baseline)
    D[:, 2, 1] = iz
    D[:, 2, 2] = -iz2 * y
    return D


def _skew_stack(v):
    n = v.shape[0]
    S = np.zeros((n, 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def _residuals(pose, points, z_prev, z_cur, calib, two_view: bool):
    """Raw residuals e (N, d) and an all-depths-positive flag."""
    pc = points @ pose.rotation.T + pose.translation
    proj_cur, ok_cur = _project_stack(pc, calib)
    e_cur = z_cur - proj_cur
    if not two_view:
        return e_cur, bool(np.all(ok_cur))
    proj_prev, ok_prev = _project_stack(points, calib)
    e_prev = z_prev - proj_prev
    return np.hstack([e_prev, e_cur]), bool(np.all(ok_cur) and np.all(ok_prev))


def _raw_jacobians(pose, points, calib, two_view: bool):
    """d e / d(pose twist) and d e / d(point) for the raw residuals."""
    n = points.shape[0]
    pc = points @ pose.rotation.T + pose.translation
    D_cur = _proj_derivative(pc, calib)
    J_pose_cur = np.concatenate([-D_cur, D_cur @ _skew_stack(pc)], axis=2)
    J_pt_cur = -np.einsum("nij,jk->nik", D_cur, pose.rotation)
    if not two_view:
        return J_pose_cur, J_pt_cur
    D_prev = _proj_derivative(points, calib)
    J_pose = np.concatenate([np.zeros((n, 3, 6)), J_pose_cur], axis=1)
    J_pt = np.concatenate([-D_prev, J_pt_cur], axis=1)
    return J_pose, J_pt


def _noise_jacobian(e, block: NoiseParamBlock):
    """d(L e)/d(packed params): diagonal entries via the log chain rule."""
    n, d = e.shape
    L = block.sqrt_info
    m = block.n_params
    B = np.zeros((n, d, m))
    diag = np.diag(L)
    for j in range(d):
        B[:, j, j] = diag[j] * e[:, j]
    idx = d
    rows, cols = np.tril_indices(d, -1)
    for i, j in zip(rows, cols):
        B[:, i, idx] = e[:, j]
        idx += 1
    return B


def _effective_model(scope: RefinementScope, model: NoiseModel | None,
                     dim: int) -> NoiseModel:
    if scope is RefinementScope.MOTION_STRUCTURE_NOISE:
        if model is None:
            return Cauchy.identity(dim)
        if not isinstance(model, Cauchy):
            raise ValueError("the noise-optimizing scope requires a Cauchy "
                             "model (or None for identity start)")
        if model.dim != dim:
            raise ValueError("model dimension must be 6 for two-view scopes")
        return model
    if model is None:
        return Gaussian()
    if isinstance(model, Cauchy) and model.dim != dim:
        raise ValueError("Cauchy sqrt_info dimension does not match the "
                         "residual dimension of this scope")
    return model


def _project_precision(lparams, d: int) -> np.ndarray:
    """Clamp the precision spectrum of a packed noise block.

    Eigenvalues of Sigma^-1 = L^T L above min(NOISE_MAX_PRECISION,
    NOISE_MAX_CONDITION * smallest) are clamped and L is refactored. The
    exchange trick turns numpy's lower Cholesky A = G G^T into the lower
    factor with A = L^T L that the packing expects.
    """
    L = NoiseParamBlock.unpack(lparams, d).sqrt_info
    info = L.T @ L
    eigvals, eigvecs = np.linalg.eigh(info)
    # trace > 0 so the top eigenvalue is positive; the relative floor keeps
    # the refactorization positive definite against rounding in eigh
    lo = eigvals[-1] * 1e-12
    top = min(NOISE_MAX_PRECISION,
              NOISE_MAX_CONDITION * max(eigvals[0], lo))
    if eigvals[-1] <= top and eigvals[0] >= lo:
        return lparams
    info = (eigvecs * np.clip(eigvals, lo, top)) @ eigvecs.T
    flipped = np.linalg.cholesky(info[::-1, ::-1])
    return NoiseParamBlock(flipped[::-1, ::-1].T).pack()


def _norm_term(n: int, d: int, lparams) -> float:
    """N/(d+1) * log|Sigma| for the log-diagonal parameters."""
    return float(-2.0 * n / (d + 1.0) * np.sum(lparams[:d]))


def jacobian(scope: RefinementScope, pose: Pose, correspondences,
             calib: StereoCalibration, points=None,
             noise: NoiseParamBlock | None = None) -> JacobianBlocks:
    """Analytic Jacobians of the whitened residuals at the given state.

    points defaults to the correspondences' triangulated coordinates; noise
    defaults to identity (no whitening). The pose block is the derivative
    wrt a left-multiplicative update exp(delta) * pose, translation first.
    """
    pts0, z_prev, z_cur, _ = _extract_arrays(correspondences, None)
    points = pts0 if points is None else np.asarray(points, float).reshape(-1, 3)
    two_view = scope is not RefinementScope.MOTION_ONLY
    d = 6 if two_view else 3
    e, ok = _residuals(pose, points, z_prev, z_cur, calib, two_view)
    if not ok:
        raise OptimizerDiverged("a point projects behind the camera at the "
                                "evaluation state")
    J_pose, J_pt = _raw_jacobians(pose, points, calib, two_view)
    with_noise = scope is RefinementScope.MOTION_STRUCTURE_NOISE
    if noise is None:
        noise = NoiseParamBlock.identity(d)
    if noise.dim != d:
        raise ValueError("noise block dimension does not match the scope")
    L = noise.sqrt_info
    f = e @ L.T
    B_pose = np.einsum("ij,njk->nik", L, J_pose)
    B_pt = np.einsum("ij,njk->nik", L, J_pt) if two_view else None
    B_l = _noise_jacobian(e, noise) if with_noise else None
    return JacobianBlocks(residuals=f, pose=B_pose, structure=B_pt, noise=B_l)


def refine(scope: RefinementScope, pose0: Pose, correspondences,
           calib: StereoCalibration, model: NoiseModel | None = None,
           weights=None, max_iterations: int = MAX_ITERATIONS
           ) -> RefinementResult:
    """Minimize the weighted robust reprojection cost from pose0.

    correspondences: sequence of objects with .z (StereoMeasurement),
    .point (Point3) and .weight; an explicit weights array overrides the
    per-correspondence weights. model defaults to Gaussian for the first two
    scopes and to an identity-initialized Cauchy for the noise scope; Msac,
    PseudoHuber and fixed-covariance Cauchy are accepted for scopes that do
    not optimize noise.

    Costs in the result include the Sigma-dependent normalization term for
    Cauchy models (zero at identity), never constant partition terms. When
    the noise scope optimizes the covariance, the whitening diagonal and the
    precision spectrum are capped (see the NOISE_* constants): the joint
    covariance MLE is otherwise unbounded below on residual directions the
    structure can absorb.

    Raises OptimizerDiverged when the initial cost is non-finite and
    InsufficientCorrespondences for fewer points than the problem needs.
    """
    n = len(correspondences)
    two_view = scope is not RefinementScope.MOTION_ONLY
    with_noise = scope is RefinementScope.MOTION_STRUCTURE_NOISE
    d = 6 if two_view else 3
    if n < 4:
        raise InsufficientCorrespondences(f"need at least 4 points, got {n}")
    points0, z_prev, z_cur, w = _extract_arrays(correspondences, weights)
    model = _effective_model(scope, model, d)
    rho_fn, rho_prime = _rho_and_weight(model)
    cauchy = isinstance(model, Cauchy)

    fixed_L = model.sqrt_info if cauchy else np.eye(d)
    lparams0 = (NoiseParamBlock(fixed_L).pack() if with_noise
                else np.zeros(d * (d + 1) // 2))
    n_l = lparams0.shape[0] if with_noise else 0

    fixed_norm = (_norm_term(n, d, NoiseParamBlock(fixed_L).pack())
                  if cauchy else 0.0)

    def unpack_L(lparams):
        if with_noise:
            return NoiseParamBlock.unpack(lparams, d).sqrt_info
        return fixed_L

    def evaluate(pose, points, lparams):
        e, ok = _residuals(pose, points, z_prev, z_cur, calib, two_view)
        if not ok:
            return np.inf, np.inf, None
        with np.errstate(over="ignore", invalid="ignore"):
            f = e @ unpack_L(lparams).T
            s = np.sum(f * f, axis=-1)
            data = float(np.sum(w * rho_fn(s)))
        norm = _norm_term(n, d, lparams) if with_noise else fixed_norm
        return data + norm, data, e

    pose = pose0
    points = points0.copy()
    lparams = lparams0.copy()

    cost, data_cost, _ = evaluate(pose, points, lparams)
    if not np.isfinite(cost):
        raise OptimizerDiverged("non-finite initial cost; check input data")
    initial_cost = cost
    history = [cost]

    def make_result(status, iterations):
        return RefinementResult(
            pose=pose,
            structure=points.copy() if two_view else None,
            noise=(NoiseParamBlock.unpack(lparams, d) if with_noise
                   else None),
            initial_cost=initial_cost,
            final_cost=cost,
            iterations=iterations,
            status=status,
            cost_history=tuple(history),
        )

    if data_cost == 0.0:
        return make_result("converged", 0)

    lam = LM_LAMBDA0
    it = 0
    while it < max_iterations:
        # assemble at the current (accepted) state
        e, _ = _residuals(pose, points, z_prev, z_cur, calib, two_view)
        L = unpack_L(lparams)
        f = e @ L.T
        s = np.sum(f * f, axis=-1)
        cw = 2.0 * w * rho_prime(s)
        J_pose, J_pt = _raw_jacobians(pose, points, calib, two_view)
        B_pose = np.einsum("ij,njk->nik", L, J_pose)
        if with_noise:
            noise_block = NoiseParamBlock.unpack(lparams, d)
            B_c = np.concatenate([B_pose, _noise_jacobian(e, noise_block)],
                                 axis=2)
        else:
            B_c = B_pose
        nc = B_c.shape[2]
        g_norm = np.zeros(nc)
        if with_noise:
            g_norm[6:6 + d] = -2.0 * n / (d + 1.0)
        g_c = np.einsum("n,nij,ni->j", cw, B_c, f) + g_norm
        # freeze log-diagonal entries pinned at a cap and still pushing up
        if with_noise:
            eff_cap = min(NOISE_LOG_DIAG_CAP,
                          float(np.min(lparams[:d])) + NOISE_MAX_LOG_SPREAD)
            at_cap = lparams[:d] >= eff_cap - 1e-12
            frozen = np.where(at_cap & (g_c[6:6 + d] < 0.0))[0] + 6
            g_c[frozen] = 0.0
        else:
            frozen = np.empty(0, dtype=int)
        if two_view:
            B_pt = np.einsum("ij,njk->nik", L, J_pt)
            g_p = np.einsum("n,nij,ni->nj", cw, B_pt, f)
            grad_inf = max(float(np.max(np.abs(g_c))),
                           float(np.max(np.abs(g_p))))
        else:
            grad_inf = float(np.max(np.abs(g_c)))
        if grad_inf < GRADIENT_TOL:
            return make_result("converged", it)

        U = np.einsum("n,nij,nik->jk", cw, B_c, B_c)
        U[frozen, :] = 0.0
        U[:, frozen] = 0.0
        if two_view:
            W = np.einsum("n,nij,nik->njk", cw, B_c, B_pt)
            W[:, frozen, :] = 0.0
            V = np.einsum("n,nij,nik->njk", cw, B_pt, B_pt)

        accepted = False
        while it < max_iterations:
            it += 1
            U_d = U + np.diag(lam * np.maximum(np.diag(U), _DIAG_FLOOR))
            try:
                if two_view:
                    V_d = V.copy()
                    idx = np.arange(3)
                    V_d[:, idx, idx] += lam * np.maximum(V[:, idx, idx],
                                                         _DIAG_FLOOR)
                    V_inv = np.linalg.inv(V_d)
                    if not np.all(np.isfinite(V_inv)):
                        raise np.linalg.LinAlgError("singular point block")
                    S = U_d - np.einsum("nij,njk,nlk->il", W, V_inv, W)
                    rhs = -g_c + np.einsum("nij,njk,nk->i", W, V_inv, g_p)
                    delta_c = np.linalg.solve(S, rhs)
                else:
                    S, rhs = U_d, -g_c
                    delta_c = np.linalg.solve(S, rhs)
                if not np.all(np.isfinite(delta_c)):
                    raise np.linalg.LinAlgError("non-finite step")

                cand_l = lparams.copy()
                if with_noise:
                    step_l = delta_c[6:].copy()
                    step_l[:d] = np.clip(step_l[:d], -NOISE_MAX_LOG_STEP,
                                         NOISE_MAX_LOG_STEP)
                    cand_l = lparams + step_l
                    cap = min(NOISE_LOG_DIAG_CAP,
                              float(np.min(cand_l[:d])) + NOISE_MAX_LOG_SPREAD)
                    cand_l[:d] = np.minimum(cand_l[:d], cap)
                    cand_l = _project_precision(cand_l, d)
                    if not np.array_equal(cand_l, lparams + delta_c[6:]):
                        # the clamps changed the noise displacement, so the
                        # pose part of the joint step no longer matches it;
                        # re-solve the pose block with the displacement fixed
                        actual = cand_l - lparams
                        delta_c = np.concatenate([
                            np.linalg.solve(
                                S[:6, :6],
                                rhs[:6] - S[:6, 6:] @ actual),
                            actual])
                        if not np.all(np.isfinite(delta_c)):
                            raise np.linalg.LinAlgError("non-finite step")
                if two_view:
                    delta_p = -np.einsum(
                        "nij,nj->ni", V_inv,
                        g_p + np.einsum("nij,i->nj", W, delta_c))
                else:
                    delta_p = None
            except np.linalg.LinAlgError:
                return make_result("rank_deficient", it)

            cand_pose = se3_exp(delta_c[:6]).compose(pose)
            cand_points = points + delta_p if two_view else points
            cand_cost, _, _ = evaluate(cand_pose, cand_points, cand_l)

            if np.isfinite(cand_cost) and cand_cost < cost:
                rel = (cost - cand_cost) / max(abs(cost), 1e-300)
                pose, points, lparams = cand_pose, cand_points, cand_l
                cost = cand_cost
                history.append(cost)
                lam = max(lam / 10.0, LM_LAMBDA_MIN)
                accepted = True
                if rel < RELATIVE_COST_TOL:
                    return make_result("converged", it)
                break
            lam *= 10.0
            if lam > LM_LAMBDA_MAX:
                return make_result("stalled", it)
        if not accepted:
            break
    return make_result("max_iterations", it)
