"""Robust Levenberg-Marquardt local bundle adjustment with Schur elimination of landmarks.

Every landmark variable is a 3D point: point landmarks contribute one
variable each, line landmarks one per guidance point. Residual blocks are

* point edges: 3-vector ``[u, v, u_r]`` whitened by the RGB-D observation
  covariance;
* line edges: ``N`` signed point-to-line distances whitened by ``sigma_line``.

The robust loss acts on the squared Mahalanobis norm of a whole block.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from . import se3
from .errors import EmptyProblemError, GaugeDeficiencyError, InvalidArgumentError, SingularLandmarkError
from .graph import FactorGraph, Selector
from .landmarks import LineLandmark, PointLandmark

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
REG_EPS = 1e-12
GAUGE_RTOL = 1e-10


@dataclass(frozen=True)
class RobustLoss:
    """Pseudo-Huber loss ``2 delta^2 (sqrt(1 + s / delta^2) - 1)`` on squared norms ``s``.

    ``delta`` scales point blocks; ``line_delta`` scales guidance blocks.
    """

    delta: float = 2.45
    line_delta: float = 1.96

    def __post_init__(self):
        if not (self.delta > 0 and self.line_delta > 0):
            raise InvalidArgumentError("robust loss scale must be positive")


DEFAULT_LOSS = RobustLoss()


def pseudo_huber_weight(r, delta):
    """Robust cost and IRLS weight for a residual of norm ``r``."""
    if not delta > 0:
        raise InvalidArgumentError("delta must be positive")
    q = np.sqrt(1.0 + (np.asarray(r, dtype=float) / delta) ** 2)
    return 2.0 * delta * delta * (q - 1.0), 1.0 / q


def _robust_sq(s, delta):
    # cost and weight as functions of the squared norm
    if delta is None:
        return s, np.ones_like(s)
    q = np.sqrt(1.0 + s / (delta * delta))
    return 2.0 * delta * delta * (q - 1.0), 1.0 / q


@dataclass
class SolverOptions:
    max_iters: int = 50
    lambda0: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    lambda_max: float = 1e10
    tol_g: float = 1e-8
    tol_x: float = 1e-12
    tol_f: float = 1e-14
    z_min: float = se3.Z_MIN
    regularize_landmarks: bool = True
    outlier_quantile: float = 0.95

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in (d or {}).items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self):
        return asdict(self)


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    final_chi2: float = 0.0
    cost_trace: list = field(default_factory=list)
    converged: bool = False
    status: str = ""
    outlier_edges: dict = field(default_factory=lambda: {"point": [], "line": []})
    dropped_edges: dict = field(default_factory=lambda: {"point": [], "line": []})
    gradient_norm: float = float("nan")
    min_reduced_eigenvalue: float = float("nan")
    final_lambda: float = 0.0
    regularized_landmarks: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class NormalEquations:
    """Block normal equations ``[[A, B], [B^T, C]]`` with gradient ``(gp, gl)``.

    ``A`` is (6m, 6m), ``B`` (6m, L, 3) and ``C`` (L, 3, 3). ``g`` is the
    gradient of half the weighted cost, so the Gauss-Newton step solves
    ``H delta = -g``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    gp: np.ndarray
    gl: np.ndarray
    cost: float
    chi2: float

    @property
    def gradient_norm(self):
        g = np.concatenate([self.gp, self.gl.reshape(-1)])
        return float(np.max(np.abs(g))) if g.size else 0.0

    def dense(self):
        m6 = self.A.shape[0]
        L = self.C.shape[0]
        H = np.zeros((m6 + 3 * L, m6 + 3 * L))
        H[:m6, :m6] = self.A
        Bd = self.B.reshape(m6, 3 * L)
        H[:m6, m6:] = Bd
        H[m6:, :m6] = Bd.T
        for j in range(L):
            H[m6 + 3 * j : m6 + 3 * j + 3, m6 + 3 * j : m6 + 3 * j + 3] = self.C[j]
        return H, np.concatenate([self.gp, self.gl.reshape(-1)])


@dataclass
class SchurContext:
    """What is needed to recover the landmark update from a pose update."""

    B: np.ndarray
    C_inv: np.ndarray
    b_land: np.ndarray
    regularized: list

    def back_substitute(self, x_pose):
        rhs = self.b_land - np.einsum("ajk,a->jk", self.B, x_pose)
        return np.einsum("jkl,jl->jk", self.C_inv, rhs)


def invert_landmark_blocks(C, names=None, regularize=True):
    """Symmetric inverse of each 3x3 landmark block.

    A block whose condition number exceeds 1e12 gets ``1e-12 * lambda_max * I``
    added before inversion (or raises SingularLandmarkError when
    ``regularize`` is False). Blocks that are identically zero invert to zero,
    which freezes the landmark.
    """
    C = 0.5 * (C + np.swapaxes(C, 1, 2))
    lam, V = np.linalg.eigh(C)
    lam = np.maximum(lam, 0.0)
    lmax = lam[:, -1]
    lmin = lam[:, 0]
    empty = lmax <= 0.0
    ill = ~empty & (lmin * COND_LIMIT < lmax)
    bad = np.flatnonzero(ill | empty)
    if bad.size and not regularize:
        labels = [names[j] if names else j for j in bad]
        raise SingularLandmarkError(f"singular landmark blocks: {labels[:10]}", labels)
    reg = np.where(ill, REG_EPS * lmax, 0.0)
    with np.errstate(divide="ignore"):
        inv_lam = np.where(empty[:, None], 0.0, 1.0 / (lam + reg[:, None]))
    C_inv = np.einsum("jab,jb,jcb->jac", V, inv_lam, V)
    return 0.5 * (C_inv + np.swapaxes(C_inv, 1, 2)), [int(j) for j in np.flatnonzero(ill)]


def schur_blocks(A, B, C, b_pose, b_land, names=None, regularize=True):
    """Reduce ``[[A, B], [B^T, C]] x = b`` to the pose variables.

    Returns ``(S, b_reduced, context)`` where ``S = A - B C^-1 B^T``.
    """
    C_inv, regularized = invert_landmark_blocks(C, names, regularize)
    BC = np.einsum("ajk,jkl->ajl", B, C_inv)
    S = A - np.einsum("ajl,bjl->ab", BC, B)
    S = 0.5 * (S + S.T)
    b_red = b_pose - np.einsum("ajl,jl->a", BC, b_land)
    return S, b_red, SchurContext(B, C_inv, b_land, regularized)


def schur_reduce(H, b, pose_dim, regularize=True):
    """Schur complement of a dense normal matrix whose landmark part is 3x3 block diagonal.

    ``H`` is ``(pose_dim + 3L)`` square. Returns ``((S, b_reduced), context)``;
    ``context.back_substitute(x_pose)`` gives the landmark part of the solution.
    """
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    n = H.shape[0]
    if (n - pose_dim) % 3:
        raise InvalidArgumentError("landmark part must be a multiple of 3")
    L = (n - pose_dim) // 3
    Hc = H[pose_dim:, pose_dim:]
    C = np.stack([Hc[3 * j : 3 * j + 3, 3 * j : 3 * j + 3] for j in range(L)]) if L else np.zeros((0, 3, 3))
    off = Hc.copy()
    for j in range(L):
        off[3 * j : 3 * j + 3, 3 * j : 3 * j + 3] = 0.0
    if np.any(off != 0.0):
        raise InvalidArgumentError("landmark block of H is not 3x3 block diagonal")
    B = H[:pose_dim, pose_dim:].reshape(pose_dim, L, 3)
    S, b_red, ctx = schur_blocks(H[:pose_dim, :pose_dim], B, C, b[:pose_dim], b[pose_dim:].reshape(L, 3), None, regularize)
    return (S, b_red), ctx


def solve_reduced(S, b, pose_names):
    """Cholesky solve of the reduced pose system; names null directions on failure."""
    if S.shape[0] == 0:
        return np.zeros(0)
    try:
        cf = scipy.linalg.cho_factor(S, lower=True)
    except np.linalg.LinAlgError:
        raise GaugeDeficiencyError(
            f"reduced pose system is singular; unconstrained: {null_space_variables(S, pose_names)}",
            null_space_variables(S, pose_names),
        ) from None
    return scipy.linalg.cho_solve(cf, b)


def null_space_variables(S, pose_names, rel_tol=1e-10):
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    scale = max(float(np.max(np.abs(lam))), 1e-300) if lam.size else 1.0
    null = V[:, lam <= rel_tol * scale]
    if null.shape[1] == 0:
        null = V[:, :1]
    names = []
    for k, name in enumerate(pose_names):
        if np.linalg.norm(null[6 * k : 6 * k + 6]) > 1e-3:
            names.append(name)
    return names


@dataclass
class State:
    R: np.ndarray
    t: np.ndarray
    X: np.ndarray


class Problem:
    """Vectorized residual/Jacobian evaluation for one graph and selector."""

    def __init__(self, graph: FactorGraph, selector=Selector.BOTH, z_min=se3.Z_MIN):
        selector = Selector.parse(selector)
        self.graph = graph
        self.selector = selector
        self.K = graph.intrinsics
        self.z_min = z_min
        self.free_ids = list(graph.free_poses)
        self.fixed_ids = list(graph.fixed_poses)
        kf_index = {k: i for i, k in enumerate(self.free_ids + self.fixed_ids)}
        self.m = len(self.free_ids)

        self.point_ids = list(graph.point_landmarks) if selector.uses_points else []
        self.line_ids = list(graph.line_landmarks) if selector.uses_lines else []
        self.var_names = [("point", j, 0) for j in self.point_ids]
        var_of_point = {j: k for k, j in enumerate(self.point_ids)}
        line_start = {}
        for j in self.line_ids:
            line_start[j] = len(self.var_names)
            self.var_names += [("line", j, s) for s in range(graph.line_landmarks[j].n)]
        self.L = len(self.var_names)

        pedges = graph.point_edges if selector.uses_points else []
        ledges = graph.line_edges if selector.uses_lines else []
        if not pedges and not ledges:
            raise EmptyProblemError(f"selector {selector.value!r} selects no edges")

        self.pe_kf = np.array([kf_index[e.keyframe_id] for e in pedges], dtype=int)
        self.pe_var = np.array([var_of_point[e.landmark_id] for e in pedges], dtype=int)
        K = self.K
        if pedges:
            u = np.array([e.u for e in pedges])
            v = np.array([e.v for e in pedges])
            d = np.array([e.d for e in pedges])
            self.pe_meas = np.stack([u, v, u - K.fx * K.baseline / d], axis=1)
            self.pe_sqrt_info = _rgbd_sqrt_information(K, graph.noise, d)
        else:
            self.pe_meas = np.zeros((0, 3))
            self.pe_sqrt_info = np.zeros((0, 3, 3))

        rows_kf, rows_var, rows_l, rows_grp = [], [], [], []
        for g, e in enumerate(ledges):
            n = graph.line_landmarks[e.landmark_id].n
            rows_kf += [kf_index[e.keyframe_id]] * n
            rows_var += list(range(line_start[e.landmark_id], line_start[e.landmark_id] + n))
            rows_l += [e.coeffs] * n
            rows_grp += [g] * n
        self.lr_kf = np.array(rows_kf, dtype=int)
        self.lr_var = np.array(rows_var, dtype=int)
        self.lr_l = np.array(rows_l, dtype=float).reshape(-1, 3)
        self.lr_grp = np.array(rows_grp, dtype=int)
        self.n_pe = len(pedges)
        self.n_le = len(ledges)
        self.le_dim = np.bincount(self.lr_grp, minlength=self.n_le)
        sl = graph.noise.sigma_line
        self.inv_sigma_line = 1.0 / sl if sl > 0 else 0.0
        if pedges and not np.all(np.isfinite(self.pe_sqrt_info)):
            raise InvalidArgumentError("point observation covariance is singular")
        if ledges and sl <= 0:
            raise InvalidArgumentError("sigma_line must be positive")

        self.active_p = np.ones(self.n_pe, dtype=bool)
        self.active_l = np.ones(self.n_le, dtype=bool)
        self.fixed_R, self.fixed_t = _stack(graph.fixed_poses)

    # ------------------------------------------------------------------ state

    def initial_state(self):
        R, t = _stack(self.graph.free_poses)
        X = np.zeros((self.L, 3))
        for k, j in enumerate(self.point_ids):
            X[k] = self.graph.point_landmarks[j].position
        k = len(self.point_ids)
        for j in self.line_ids:
            pts = self.graph.line_landmarks[j].guidance_points
            X[k : k + len(pts)] = pts
            k += len(pts)
        return State(R, t, X)

    def retract(self, state, dx_pose, dx_land):
        R = state.R.copy()
        t = state.t.copy()
        for i in range(self.m):
            D = se3.exp(dx_pose[6 * i : 6 * i + 6])
            R[i] = D.R @ state.R[i]
            t[i] = D.R @ state.t[i] + D.t
        return State(R, t, state.X + dx_land)

    def write_back(self, state):
        g = self.graph.copy()
        g.free_poses = {i: se3.Pose(state.R[k], state.t[k]) for k, i in enumerate(self.free_ids)}
        pts = dict(g.point_landmarks)
        for k, j in enumerate(self.point_ids):
            pts[j] = PointLandmark(j, state.X[k])
        lines = dict(g.line_landmarks)
        k = len(self.point_ids)
        for j in self.line_ids:
            n = g.line_landmarks[j].n
            lines[j] = LineLandmark(j, state.X[k : k + n])
            k += n
        g.point_landmarks = pts
        g.line_landmarks = lines
        return g

    @property
    def pose_names(self):
        return [f"keyframe {i}" for i in self.free_ids]

    @property
    def landmark_names(self):
        return [f"{kind} {j}" + (f"[{s}]" if kind == "line" else "") for kind, j, s in self.var_names]

    # ------------------------------------------------------------- residuals

    def _poses(self, state):
        return np.concatenate([state.R, self.fixed_R]), np.concatenate([state.t, self.fixed_t])

    def evaluate(self, state, loss=None, jacobians=False):
        """Whitened residual blocks, robust cost and (optionally) Jacobians."""
        K = self.K
        Ra, ta = self._poses(state)
        out = {}

        # point blocks
        Rk = Ra[self.pe_kf]
        Xc = np.einsum("eij,ej->ei", Rk, state.X[self.pe_var]) + ta[self.pe_kf]
        valid_p = Xc[:, 2] > self.z_min
        Z = np.where(valid_p, Xc[:, 2], 1.0)
        iz = 1.0 / Z
        u = K.fx * Xc[:, 0] * iz + K.cx
        v = K.fy * Xc[:, 1] * iz + K.cy
        pred = np.stack([u, v, u - K.fx * K.baseline * iz], axis=1)
        r_p = np.einsum("eij,ej->ei", self.pe_sqrt_info, pred - self.pe_meas)
        use_p = valid_p & self.active_p
        r_p[~use_p] = 0.0
        s_p = np.sum(r_p * r_p, axis=1)

        # guidance rows
        Rr = Ra[self.lr_kf]
        Xl = np.einsum("eij,ej->ei", Rr, state.X[self.lr_var]) + ta[self.lr_kf]
        valid_r = Xl[:, 2] > self.z_min
        Zl = np.where(valid_r, Xl[:, 2], 1.0)
        izl = 1.0 / Zl
        ul = K.fx * Xl[:, 0] * izl + K.cx
        vl = K.fy * Xl[:, 1] * izl + K.cy
        r_l = (self.lr_l[:, 0] * ul + self.lr_l[:, 1] * vl + self.lr_l[:, 2]) * self.inv_sigma_line
        bad_rows = np.bincount(self.lr_grp, weights=(~valid_r).astype(float), minlength=self.n_le)
        valid_l = bad_rows == 0
        use_l = valid_l & self.active_l
        r_l[~use_l[self.lr_grp]] = 0.0
        s_l = np.bincount(self.lr_grp, weights=r_l * r_l, minlength=self.n_le)

        dp = loss.delta if loss is not None else None
        dl = loss.line_delta if loss is not None else None
        c_p, w_p = _robust_sq(s_p, dp)
        c_l, w_l = _robust_sq(s_l, dl)
        w_p = np.where(use_p, w_p, 0.0)
        w_l = np.where(use_l, w_l, 0.0)
        out.update(
            r_p=r_p, s_p=s_p, w_p=w_p, valid_p=valid_p, r_l=r_l, s_l=s_l, w_l=w_l, valid_l=valid_l,
            cost=float(np.sum(c_p[use_p]) + np.sum(c_l[use_l])),
            chi2=float(np.sum(s_p[use_p]) + np.sum(s_l[use_l])),
        )
        if not jacobians:
            return out

        Jr = np.zeros((self.n_pe, 3, 3))
        Jr[:, 0, 0] = K.fx * iz
        Jr[:, 0, 2] = -K.fx * Xc[:, 0] * iz * iz
        Jr[:, 1, 1] = K.fy * iz
        Jr[:, 1, 2] = -K.fy * Xc[:, 1] * iz * iz
        Jr[:, 2, 0] = K.fx * iz
        Jr[:, 2, 2] = -K.fx * (Xc[:, 0] - K.baseline) * iz * iz
        Jr = np.einsum("eij,ejk->eik", self.pe_sqrt_info, Jr)
        Jp_pose = np.concatenate([Jr, -np.einsum("eij,ejk->eik", Jr, se3.batch_hat(Xc))], axis=2)
        Jp_land = np.einsum("eij,ejk->eik", Jr, Rk)

        row = np.stack(
            [
                self.lr_l[:, 0] * K.fx * izl,
                self.lr_l[:, 1] * K.fy * izl,
                -(self.lr_l[:, 0] * K.fx * Xl[:, 0] + self.lr_l[:, 1] * K.fy * Xl[:, 1]) * izl * izl,
            ],
            axis=1,
        ) * self.inv_sigma_line
        Jl_pose = np.concatenate([row, np.cross(Xl, row)], axis=1)
        Jl_land = np.einsum("ej,eji->ei", row, Rr)
        out.update(Jp_pose=Jp_pose, Jp_land=Jp_land, Jl_pose=Jl_pose, Jl_land=Jl_land)
        return out

    def normal_equations(self, ev):
        m, L = self.m, self.L
        A = np.zeros((m, 6, 6))
        B = np.zeros((m, L, 6, 3))
        C = np.zeros((L, 3, 3))
        gp = np.zeros((m, 6))
        gl = np.zeros((L, 3))

        w = ev["w_p"]
        Jx, Jl, r = ev["Jp_pose"] * w[:, None, None], ev["Jp_land"], ev["r_p"]
        free = self.pe_kf < m
        kf, var = self.pe_kf[free], self.pe_var[free]
        np.add.at(A, kf, np.einsum("eki,ekj->eij", Jx[free], ev["Jp_pose"][free]))
        np.add.at(B, (kf, var), np.einsum("eki,ekj->eij", Jx[free], Jl[free]))
        np.add.at(gp, kf, np.einsum("eki,ek->ei", Jx[free], r[free]))
        Jlw = Jl * w[:, None, None]
        np.add.at(C, self.pe_var, np.einsum("eki,ekj->eij", Jlw, Jl))
        np.add.at(gl, self.pe_var, np.einsum("eki,ek->ei", Jlw, r))

        wr = ev["w_l"][self.lr_grp]
        Jx, Jl, r = ev["Jl_pose"], ev["Jl_land"], ev["r_l"]
        Jxw = Jx * wr[:, None]
        free = self.lr_kf < m
        kf, var = self.lr_kf[free], self.lr_var[free]
        np.add.at(A, kf, np.einsum("ei,ej->eij", Jxw[free], Jx[free]))
        np.add.at(B, (kf, var), np.einsum("ei,ej->eij", Jxw[free], Jl[free]))
        np.add.at(gp, kf, Jxw[free] * r[free, None])
        Jlw = Jl * wr[:, None]
        np.add.at(C, self.lr_var, np.einsum("ei,ej->eij", Jlw, Jl))
        np.add.at(gl, self.lr_var, Jlw * r[:, None])

        A_full = scipy.linalg.block_diag(*A) if m else np.zeros((0, 0))
        B_full = B.transpose(0, 2, 1, 3).reshape(6 * m, L, 3)
        return NormalEquations(A_full, B_full, C, gp.reshape(-1), gl, ev["cost"], ev["chi2"])

    def linearize(self, state, loss=None):
        ev = self.evaluate(state, loss, jacobians=True)
        return ev, self.normal_equations(ev)

    def jacobian_dense(self, state):
        """Whitened, unweighted Jacobian of the stacked residual (rows: point blocks, then guidance rows)."""
        ev = self.evaluate(state, None, jacobians=True)
        n_rows = 3 * self.n_pe + len(self.lr_kf)
        J = np.zeros((n_rows, 6 * self.m + 3 * self.L))
        for e in range(self.n_pe):
            rows = slice(3 * e, 3 * e + 3)
            k = self.pe_kf[e]
            if k < self.m:
                J[rows, 6 * k : 6 * k + 6] = ev["Jp_pose"][e]
            c = 6 * self.m + 3 * self.pe_var[e]
            J[rows, c : c + 3] = ev["Jp_land"][e]
        off = 3 * self.n_pe
        for q in range(len(self.lr_kf)):
            k = self.lr_kf[q]
            if k < self.m:
                J[off + q, 6 * k : 6 * k + 6] = ev["Jl_pose"][q]
            c = 6 * self.m + 3 * self.lr_var[q]
            J[off + q, c : c + 3] = ev["Jl_land"][q]
        return J, np.concatenate([ev["r_p"].reshape(-1), ev["r_l"]])

    # --------------------------------------------------------------- steps

    def reduced_system(self, neq, lam=0.0, regularize=True):
        A = neq.A.copy()
        C = neq.C.copy()
        if lam > 0:
            A[np.diag_indices_from(A)] *= 1.0 + lam
            idx = np.arange(3)
            C[:, idx, idx] *= 1.0 + lam
        return schur_blocks(A, neq.B, C, -neq.gp, -neq.gl, self.landmark_names, regularize)

    def step(self, neq, lam, regularize=True):
        S, b, ctx = self.reduced_system(neq, lam, regularize)
        dx_pose = solve_reduced(S, b, self.pose_names)
        return dx_pose, ctx.back_substitute(dx_pose), len(ctx.regularized)


def _stack(poses):
    if not poses:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    return np.stack([p.R for p in poses.values()]), np.stack([p.t for p in poses.values()])


def _rgbd_sqrt_information(K, noise, d):
    """Batch of ``L^-1`` with ``L L^T`` the observation covariance, so ``|L^-1 e|^2 = e^T Sigma^-1 e``."""
    sp2 = noise.sigma_p**2
    sd = noise.sigma_depth(d)
    k = K.fx * K.baseline / (d * d)
    cov = np.zeros((len(d), 3, 3))
    cov[:, 0, 0] = cov[:, 1, 1] = sp2
    cov[:, 0, 2] = cov[:, 2, 0] = sp2
    cov[:, 2, 2] = sp2 + (k * sd) ** 2
    with np.errstate(all="ignore"):
        try:
            Lc = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            return np.full_like(cov, np.nan)
        return np.linalg.inv(Lc)


def _predicted_decrease(neq, dx_pose, dx_land):
    # F(x + dx) ~ F + 2 g.dx + dx^T H dx
    g_dot = neq.gp @ dx_pose + np.sum(neq.gl * dx_land)
    Hx_p = neq.A @ dx_pose + np.einsum("ajk,jk->a", neq.B, dx_land)
    Hx_l = np.einsum("ajk,a->jk", neq.B, dx_pose) + np.einsum("jkl,jl->jk", neq.C, dx_land)
    quad = dx_pose @ Hx_p + np.sum(dx_land * Hx_l)
    return -(2.0 * g_dot + quad)


def outlier_gate(problem, ev, quantile=0.95):
    """Edge ids whose squared Mahalanobis norm exceeds the chi-square quantile of their dimension."""
    pts = np.flatnonzero((ev["s_p"] > chi2.ppf(quantile, 3)) & problem.active_p & ev["valid_p"])
    if problem.n_le:
        thr = chi2.ppf(quantile, problem.le_dim)
        lines = np.flatnonzero((ev["s_l"] > thr) & problem.active_l & ev["valid_l"])
    else:
        lines = np.zeros(0, dtype=int)
    return [int(i) for i in pts], [int(i) for i in lines]


def _landmark_rows(problem, ev):
    """Per landmark variable: (pose Jacobian rows over the free poses, landmark Jacobian rows)."""
    m6 = 6 * problem.m
    rows = [[] for _ in range(problem.L)]
    for e in range(problem.n_pe):
        Jx = np.zeros((3, m6))
        k = problem.pe_kf[e]
        if k < problem.m:
            Jx[:, 6 * k : 6 * k + 6] = ev["Jp_pose"][e]
        rows[problem.pe_var[e]].append((Jx, ev["Jp_land"][e]))
    for q in range(len(problem.lr_kf)):
        Jx = np.zeros((1, m6))
        k = problem.lr_kf[q]
        if k < problem.m:
            Jx[0, 6 * k : 6 * k + 6] = ev["Jl_pose"][q]
        rows[problem.lr_var[q]].append((Jx, ev["Jl_land"][q][None, :]))
    return rows


def reduced_information(problem, ev):
    """Undamped reduced pose information from whitened Jacobians, and the norm of the unreduced block.

    Each landmark's rows are projected onto the orthogonal complement of its
    own Jacobian columns before accumulation. This is ``H_A - H_B H_C^-1 H_B^T``
    without the cancellation of forming the two terms separately, and
    landmark directions no row constrains drop out through the pseudo-inverse.
    Rows of edges that are inactive in ``ev`` are zero and contribute nothing.
    """
    m6 = 6 * problem.m
    S = np.zeros((m6, m6))
    A = np.zeros((m6, m6))
    wp = (ev["w_p"] > 0).astype(float)
    wl = (ev["w_l"] > 0).astype(float)[problem.lr_grp]
    ev = dict(ev, Jp_pose=ev["Jp_pose"] * wp[:, None, None], Jp_land=ev["Jp_land"] * wp[:, None, None],
              Jl_pose=ev["Jl_pose"] * wl[:, None], Jl_land=ev["Jl_land"] * wl[:, None])
    for blocks in _landmark_rows(problem, ev):
        if not blocks:
            continue
        Jx = np.concatenate([b[0] for b in blocks])
        Jl = np.concatenate([b[1] for b in blocks])
        A += Jx.T @ Jx
        U, sv, _ = np.linalg.svd(Jl, full_matrices=False)
        tol = max(Jl.shape) * np.finfo(float).eps * sv[0]
        Q = U[:, sv > tol]
        P = Jx - Q @ (Q.T @ Jx)
        S += P.T @ P
    return 0.5 * (S + S.T), (float(np.linalg.norm(A, 2)) if A.size else 0.0)


def _check_gauge(problem, state, rel_tol=GAUGE_RTOL):
    """Raise GaugeDeficiencyError when the undamped reduced system is singular."""
    ev = problem.evaluate(state, None, jacobians=True)
    S, scale = reduced_information(problem, ev)
    if S.size == 0:
        return
    lam = np.linalg.eigvalsh(S)
    if not lam[0] > rel_tol * max(scale, lam[-1]):
        names = null_space_variables(S, problem.pose_names)
        raise GaugeDeficiencyError(f"reduced pose system is singular; unconstrained: {names}", names)


def solve(graph, selector=Selector.BOTH, loss=DEFAULT_LOSS, options=None):
    """Minimize the (robust) weighted reprojection cost over free poses and landmarks.

    Returns ``(updated_graph, SolveReport)``. Fixed keyframes are not part of
    the state. ``loss=None`` gives the plain quadratic cost; ``lambda0 = 0``
    in the options gives undamped Gauss-Newton.
    """
    options = options or SolverOptions()
    selector = Selector.parse(selector)
    unobserved = graph.unobserved_free_poses(selector)
    if unobserved:
        raise GaugeDeficiencyError(
            f"free keyframes without edges: {unobserved}", [f"keyframe {i}" for i in unobserved]
        )
    problem = Problem(graph, selector, options.z_min)
    state = problem.initial_state()
    report = SolveReport()

    ev, neq = problem.linearize(state, loss)
    # edges that start behind a camera are dropped for the whole solve
    problem.active_p &= ev["valid_p"]
    problem.active_l &= ev["valid_l"]
    report.dropped_edges = {
        "point": [int(i) for i in np.flatnonzero(~problem.active_p)],
        "line": [int(i) for i in np.flatnonzero(~problem.active_l)],
    }
    if report.dropped_edges["point"] or report.dropped_edges["line"]:
        ev, neq = problem.linearize(state, loss)

    _check_gauge(problem, state)

    report.initial_cost = neq.cost
    report.cost_trace = [neq.cost]
    lam = options.lambda0
    pure_gn = lam == 0.0
    status = "max_iters"
    n_reg = 0
    it = 0
    while it < options.max_iters:
        if neq.gradient_norm <= options.tol_g:
            status = "converged"
            break
        it += 1
        try:
            dx_pose, dx_land, n_reg_step = problem.step(neq, lam, options.regularize_landmarks)
        except GaugeDeficiencyError:
            # the gauge was checked up front, so this is round-off in a damped
            # system (e.g. a landmark drifting close to a camera): reject the step
            if pure_gn:
                status = "diverged"
                break
            lam *= options.lambda_up
            if lam > options.lambda_max:
                status = "diverged"
                break
            continue
        n_reg = max(n_reg, n_reg_step)
        cand = problem.retract(state, dx_pose, dx_land)
        ev_c = problem.evaluate(cand, loss)
        lost = np.any(problem.active_p & ~ev_c["valid_p"]) or np.any(problem.active_l & ~ev_c["valid_l"])
        actual = neq.cost - ev_c["cost"]
        pred = _predicted_decrease(neq, dx_pose, dx_land)
        step_norm = np.sqrt(dx_pose @ dx_pose + np.sum(dx_land * dx_land))
        x_norm = np.sqrt(np.sum(state.t**2) + np.sum(state.X**2))
        tiny_step = step_norm <= options.tol_x * (x_norm + options.tol_x)
        stalled = abs(actual) <= options.tol_f * max(neq.cost, 1e-300) and abs(pred) <= options.tol_f * max(neq.cost, 1e-300)

        if not lost and (pure_gn or actual > 0):
            state = cand
            ev, neq = problem.linearize(state, loss)
            report.cost_trace.append(neq.cost)
            lam *= options.lambda_down
            if tiny_step or stalled:
                status = "converged"
                break
        else:
            if tiny_step or stalled:
                status = "converged"
                break
            if pure_gn:
                status = "diverged"
                break
            lam *= options.lambda_up
            if lam > options.lambda_max:
                status = "diverged"
                break
    else:
        if neq.gradient_norm <= options.tol_g:
            status = "converged"

    if n_reg:
        log.warning("regularized %d ill-conditioned landmark blocks", n_reg)
    report.iterations = it
    report.status = status
    report.converged = status == "converged"
    report.final_cost = neq.cost
    report.final_chi2 = neq.chi2
    report.gradient_norm = neq.gradient_norm
    report.final_lambda = lam
    report.regularized_landmarks = n_reg
    pts, lines = outlier_gate(problem, ev, options.outlier_quantile)
    report.outlier_edges = {"point": pts, "line": lines}
    try:
        S, _, _ = problem.reduced_system(neq, 0.0, True)
        report.min_reduced_eigenvalue = float(np.linalg.eigvalsh(S)[0]) if S.size else float("nan")
    except Exception:  # reporting only
        pass
    return problem.write_back(state), report


def chi2_cost(graph, selector=Selector.BOTH):
    problem = Problem(graph, selector)
    return problem.evaluate(problem.initial_state())["chi2"]


def assemble_residual(graph, selector=Selector.BOTH, z_min=se3.Z_MIN):
    """Stacked raw residual and its block-diagonal covariance.

    Blocks appear in edge order (keyframe id, then landmark id): point edges
    first, then line edges. Edges behind a camera raise BehindCameraError.
    """
    from .landmarks import guidance_residual, point_observation_covariance, point_residual

    selector = Selector.parse(selector)
    pedges = graph.point_edges if selector.uses_points else []
    ledges = graph.line_edges if selector.uses_lines else []
    if not pedges and not ledges:
        raise EmptyProblemError(f"selector {selector.value!r} selects no edges")
    K = graph.intrinsics
    parts, blocks = [], []
    for e in pedges:
        parts.append(point_residual(graph.pose(e.keyframe_id), K, graph.point_landmarks[e.landmark_id], e, z_min))
        blocks.append(point_observation_covariance(K, e, graph.noise))
    for e in ledges:
        line = graph.line_landmarks[e.landmark_id]
        parts.append(guidance_residual(graph.pose(e.keyframe_id), K, line, e, z_min))
        blocks.append(graph.noise.sigma_line**2 * np.eye(line.n))
    return np.concatenate(parts), scipy.linalg.block_diag(*blocks)
