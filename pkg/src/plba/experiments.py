"""Seeded experiment drivers: paired selector comparison and the guidance-count sweep."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from .ba import DEFAULT_LOSS, solve
from .errors import PLBAError
from .evaluation import TrajectoryFile, ate_rmse
from .graph import Selector
from .synthetic import generate

log = logging.getLogger(__name__)


def trajectory_of(poses):
    """Trajectory over all keyframes in a pose map; the keyframe id is used as the timestamp."""
    ids = sorted(poses)
    return TrajectoryFile.from_poses(np.array(ids, dtype=float), [poses[i] for i in ids])


def translational_rmse(estimate, truth_poses):
    """RMSE of camera-center errors over the keyframes of ``truth_poses`` (no alignment)."""
    err = [estimate[i].center - truth_poses[i].center for i in sorted(truth_poses)]
    return float(np.sqrt(np.mean(np.sum(np.square(err), axis=1))))


def _map(fn, jobs, workers):
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [fn(j) for j in jobs]


# ---------------------------------------------------------- paired study


def _paired_job(args):
    config, loss, options = args
    graph, truth = generate(config)
    out = []
    for sel in (Selector.POINTS, Selector.BOTH):
        est, report = solve(graph, sel, loss=loss, options=options)
        out.append((translational_rmse(est.free_poses, truth.free_poses), report.converged))
    return out


@dataclass
class PairedResult:
    seeds: list
    rmse_points: np.ndarray
    rmse_both: np.ndarray
    converged: np.ndarray
    wins: int
    losses: int
    p_value: float

    @property
    def mean_points(self):
        return float(np.mean(self.rmse_points))

    @property
    def mean_both(self):
        return float(np.mean(self.rmse_both))

    def to_dict(self):
        return {
            "seeds": self.seeds,
            "mean_rmse_points": self.mean_points,
            "mean_rmse_both": self.mean_both,
            "wins_both": self.wins,
            "wins_points": self.losses,
            "sign_test_p_value": self.p_value,
            "rmse_points": self.rmse_points.tolist(),
            "rmse_both": self.rmse_both.tolist(),
        }


def paired_selector_study(config, seeds, loss=DEFAULT_LOSS, options=None, workers=1):
    """Solve each seeded scene with points only and with points plus lines.

    The sign test is one-sided: it asks whether ``both`` beats ``points``
    more often than chance. Exact ties are dropped from the test.
    """
    seeds = list(seeds)
    jobs = [(config.replace(seed=s), loss, options) for s in seeds]
    res = _map(_paired_job, jobs, workers)
    rp = np.array([r[0][0] for r in res])
    rb = np.array([r[1][0] for r in res])
    conv = np.array([[r[0][1], r[1][1]] for r in res], dtype=bool).reshape(-1, 2)
    wins = int(np.sum(rb < rp))
    losses = int(np.sum(rb > rp))
    p = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
    return PairedResult(seeds, rp, rb, conv, wins, losses, float(p))


# ----------------------------------------------------------- guidance sweep


def _sweep_job(args):
    config, n, loss, options = args
    graph, truth = generate(config.replace(guidance_count=max(n, 2)))
    selector = Selector.POINTS if n == 0 else Selector.BOTH
    try:
        est, report = solve(graph, selector, loss=loss, options=options)
    except PLBAError as exc:
        log.warning("sweep N=%d seed=%s failed: %s", n, config.seed, exc)
        return float("nan"), False
    poses = {**est.free_poses, **est.fixed_poses}
    ref = {**truth.free_poses, **truth.fixed_poses}
    return ate_rmse(trajectory_of(poses), trajectory_of(ref)), bool(report.converged)


@dataclass
class SweepRow:
    n: int
    mean_ate: float
    std_ate: float
    convergence_rate: float
    repetitions: int
    ates: np.ndarray


def sweep_guidance(config, counts, repetitions=50, master_seed=0, loss=DEFAULT_LOSS, options=None, workers=1):
    """Mean ATE over seeded repetitions for each guidance count.

    ``N = 0`` is the points-only baseline. Repetition ``r`` uses the scene
    seed ``(master_seed, r)`` for every count, so the rows are paired.
    """
    counts = [int(n) for n in counts]
    for n in counts:
        if n == 1 or n < 0:
            raise ValueError(f"guidance count must be 0 (baseline) or >= 2, got {n}")
    jobs = [
        (config.replace(seed=[int(master_seed), r]), n, loss, options)
        for n in counts
        for r in range(repetitions)
    ]
    res = _map(_sweep_job, jobs, workers)
    rows = []
    for k, n in enumerate(counts):
        chunk = res[k * repetitions : (k + 1) * repetitions]
        ates = np.array([a for a, _ in chunk])
        ok = np.isfinite(ates)
        rows.append(
            SweepRow(
                n,
                float(np.mean(ates[ok])) if ok.any() else float("nan"),
                float(np.std(ates[ok], ddof=1)) if ok.sum() > 1 else 0.0,
                float(np.mean([c for _, c in chunk])),
                repetitions,
                ates,
            )
        )
    return rows


def sweep_csv(rows):
    lines = ["N,mean_ate,std_ate,convergence_rate,repetitions"]
    for r in rows:
        lines.append("%d,%.17g,%.17g,%.17g,%d" % (r.n, r.mean_ate, r.std_ate, r.convergence_rate, r.repetitions))
    return "\n".join(lines) + "\n"
