"""Pose-block covariance of the local BA estimate and the information-additivity certificate.

Everything here is evaluated without robust weights: the covariance results
hold for the Gaussian maximum-likelihood estimate.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import se3
from .ba import Problem, SolverOptions, null_space_variables, reduced_information, solve
from .errors import CertificateInapplicableError, UnderconstrainedPoseError
from .graph import Selector

log = logging.getLogger(__name__)

PD_RTOL = 1e-10


def _at(graph, linearization):
    if linearization is None or linearization == "current":
        return graph
    if hasattr(linearization, "linearization_point"):
        return linearization.linearization_point(graph)
    return linearization


def pose_information(graph, selector=Selector.BOTH, linearization=None):
    """Reduced pose information ``H_A - H_B H_C^-1 H_B^T`` (6m x 6m), unweighted by any robust loss.

    The problem object returned alongside carries ``information_scale``,
    the norm of the unreduced pose block, used as the reference for rank decisions.
    """
    g = _at(graph, linearization)
    problem = Problem(g, selector)
    ev = problem.evaluate(problem.initial_state(), None, jacobians=True)
    S, problem.information_scale = reduced_information(problem, ev)
    return S, problem


def _check_pd(S, names, what, scale=0.0):
    lam, V = np.linalg.eigh(S)
    scale = max(scale, float(np.max(np.abs(lam))) if lam.size else 0.0)
    if lam.size == 0 or scale == 0.0 or lam[0] <= PD_RTOL * scale:
        null = V[:, lam <= PD_RTOL * max(scale, 1e-300)]
        raise UnderconstrainedPoseError(
            f"{what} is not positive definite (min eigenvalue {lam[0] if lam.size else 0:.3g})",
            null_space_variables(S, names) if lam.size else [],
            null,
        )
    return lam


def pose_covariance(graph, selector=Selector.BOTH, linearization=None):
    """First-order covariance of the free keyframe poses, ``(H_A - H_B H_C^-1 H_B^T)^-1``.

    ``linearization`` is ``None``/``"current"`` (the graph's own state), a
    GroundTruth, or a graph sharing the same structure.
    """
    S, problem = pose_information(graph, selector, linearization)
    _check_pd(S, problem.pose_names, "reduced pose information", problem.information_scale)
    C = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S, lower=True), np.eye(S.shape[0]))
    return 0.5 * (C + C.T)


def _descending_eigs(M):
    return np.sort(np.linalg.eigvalsh(0.5 * (M + M.T)))[::-1]


@dataclass
class CovarianceReport:
    C_h: np.ndarray
    C_f: np.ndarray
    C_g: np.ndarray
    eig_h: np.ndarray
    eig_f: np.ndarray
    eig_g: np.ndarray
    additivity_residual: float
    additivity_residual_inverse: float
    margins_h: np.ndarray
    margins_f: np.ndarray
    min_eig_h: float
    min_eig_f: float
    loewner_h: float
    loewner_f: float
    strict: bool
    free_keyframes: list = field(default_factory=list)

    @property
    def min_margin(self):
        return float(min(self.margins_h.min(), self.margins_f.min()))

    def to_dict(self, matrices=False):
        d = {
            "free_keyframes": self.free_keyframes,
            "additivity_residual": self.additivity_residual,
            "additivity_residual_inverse": self.additivity_residual_inverse,
            "min_margin": self.min_margin,
            "ordering_strict": self.strict,
            "min_eig_C_h": self.min_eig_h,
            "min_eig_C_f": self.min_eig_f,
            "loewner_min_eig_C_h_minus_C_g": self.loewner_h,
            "loewner_min_eig_C_f_minus_C_g": self.loewner_f,
            "eigenvalues": [
                {
                    "index": i,
                    "C_g": float(self.eig_g[i]),
                    "C_h": float(self.eig_h[i]),
                    "C_f": float(self.eig_f[i]),
                    "margin_h": float(self.margins_h[i]),
                    "margin_f": float(self.margins_f[i]),
                }
                for i in range(len(self.eig_g))
            ],
        }
        if matrices:
            d.update(C_h=self.C_h.tolist(), C_f=self.C_f.tolist(), C_g=self.C_g.tolist())
        return d


def information_additivity(graph, linearization=None):
    """Relative residual ``|I_g - I_h - I_f|_F / |I_g|_F`` of the reduced pose information matrices.

    ``I`` is the inverse pose covariance, so this is the additivity identity
    stated on inverses, evaluated without inverting anything. It is defined
    even when ``I_h`` or ``I_f`` is singular. Returns
    ``(residual, I_h, I_f, I_g, pose_names, unreduced_scales)``.
    """
    g = _at(graph, linearization)
    S_h, ph = pose_information(g, Selector.POINTS)
    S_f, pf = pose_information(g, Selector.LINES)
    S_g, pg = pose_information(g, Selector.BOTH)
    residual = float(np.linalg.norm(S_g - S_h - S_f) / np.linalg.norm(S_g))
    scales = (ph.information_scale, pf.information_scale, pg.information_scale)
    return residual, S_h, S_f, S_g, ph.pose_names, scales


def theorem_certificate(graph, linearization=None):
    """Check ``C_g^-1 = C_h^-1 + C_f^-1`` and the eigenvalue ordering at one linearization point.

    ``h`` uses point landmarks only, ``f`` line landmarks only and ``g``
    both, all over the same free/fixed keyframes. Raises
    CertificateInapplicableError when ``C_h`` or ``C_f`` does not exist as a
    positive-definite matrix; the error carries ``additivity_residual``,
    which is still meaningful.
    """
    g = _at(graph, linearization)
    additivity, S_h, S_f, S_g, names, scales = information_additivity(g)
    for S, tag, scale in ((S_h, "C_h", scales[0]), (S_f, "C_f", scales[1])):
        try:
            _check_pd(S, names, tag, scale)
        except UnderconstrainedPoseError as exc:
            err = CertificateInapplicableError(
                f"certificate inapplicable: {tag} singular ({exc}); unconstrained {exc.variables}"
            )
            err.additivity_residual = additivity
            raise err from exc
    _check_pd(S_g, names, "C_g", scales[2])

    def inv(S):
        X = scipy.linalg.cho_solve(scipy.linalg.cho_factor(S, lower=True), np.eye(S.shape[0]))
        return 0.5 * (X + X.T)

    C_h, C_f, C_g = inv(S_h), inv(S_f), inv(S_g)
    # the same identity after a round trip through the covariances (diagnostic only)
    Ig, Ih, If = inv(C_g), inv(C_h), inv(C_f)
    additivity_inv = np.linalg.norm(Ig - Ih - If) / np.linalg.norm(Ig)

    eh, ef, eg = _descending_eigs(C_h), _descending_eigs(C_f), _descending_eigs(C_g)
    mh, mf = eh - eg, ef - eg
    lo_h = float(np.linalg.eigvalsh(0.5 * ((C_h - C_g) + (C_h - C_g).T))[0])
    lo_f = float(np.linalg.eigvalsh(0.5 * ((C_f - C_g) + (C_f - C_g).T))[0])
    return CovarianceReport(
        C_h, C_f, C_g, eh, ef, eg, additivity, float(additivity_inv), mh, mf,
        float(eh[-1]), float(ef[-1]), lo_h, lo_f,
        bool(np.all(mh > 0) and np.all(mf > 0)),
        list(g.free_poses),
    )


# ---------------------------------------------------------------- Monte Carlo


def pose_errors(estimate, truth_poses):
    """Stacked left tangent errors ``log(T_est T_true^-1)`` of the free poses."""
    return np.concatenate([se3.log(estimate[i] @ truth_poses[i].inverse()) for i in sorted(truth_poses)])


@dataclass
class MonteCarloResult:
    empirical: np.ndarray
    analytic: np.ndarray | None
    discrepancy: float
    trials: int
    used: int
    failed: list
    mean_error: np.ndarray
    translation_rmse: float
    flagged: bool

    def to_dict(self):
        return {
            "trials": self.trials,
            "used": self.used,
            "failed_trials": self.failed,
            "flagged": self.flagged,
            "frobenius_relative_discrepancy": self.discrepancy,
            "translation_rmse": self.translation_rmse,
            "mean_tangent_error": self.mean_error.tolist(),
            "empirical_covariance": self.empirical.tolist(),
            "analytic_covariance": None if self.analytic is None else self.analytic.tolist(),
        }


def trial_seed(master_seed, index):
    return [int(master_seed), int(index)]


def _mc_trial(args):
    from .synthetic import observe

    truth, config, seed, selector, options = args
    graph = observe(truth, config, seed=seed)
    solved, report = solve(graph, selector, loss=None, options=options)
    errs = pose_errors(solved.free_poses, truth.free_poses)
    return report.converged, errs


def monte_carlo_covariance(config, trials=2000, selector=Selector.BOTH, master_seed=0, options=None, workers=1):
    """Empirical covariance of MLE pose estimates over independent noise draws.

    The scene geometry comes from ``config.seed``; trial ``i`` redraws the
    measurement and initialization noise from ``(master_seed, i)``. Results
    are aggregated in trial order, so they do not depend on ``workers``.
    """
    from .synthetic import build_scene

    if trials < 2:
        raise ValueError("need at least two trials")
    selector = Selector.parse(selector)
    options = options or SolverOptions(max_iters=100)
    truth = build_scene(config)
    jobs = [(truth, config, trial_seed(master_seed, i), selector, options) for i in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_mc_trial, jobs, chunksize=16))
    else:
        results = [_mc_trial(j) for j in jobs]

    failed = [i for i, (ok, _) in enumerate(results) if not ok]
    errs = np.array([e for ok, e in results if ok])
    flagged = len(failed) > 0.05 * trials
    if flagged:
        log.warning("%d of %d Monte Carlo trials did not converge", len(failed), trials)
    empirical = np.cov(errs, rowvar=False) if len(errs) > 1 else np.zeros((6 * config.num_free,) * 2)
    if config.noise_scale == 0:
        analytic = np.zeros_like(empirical)
        discrepancy = float(np.linalg.norm(empirical))
    else:
        # drawn noise is the nominal model times noise_scale; the estimator is unchanged
        tg = truth.graph(config.intrinsics, config.noise)
        analytic = pose_covariance(tg, selector) * config.noise_scale**2
        discrepancy = float(np.linalg.norm(empirical - analytic) / np.linalg.norm(analytic))
    trans = errs.reshape(len(errs), -1, 6)[:, :, :3] if len(errs) else np.zeros((0, 1, 3))
    rmse = float(np.sqrt(np.mean(np.sum(trans**2, axis=2)))) if len(errs) else float("nan")
    return MonteCarloResult(
        empirical, analytic, discrepancy, trials, len(errs), failed,
        errs.mean(axis=0) if len(errs) else np.zeros(6 * config.num_free), rmse, flagged,
    )
