"""Simulation settings, large-sample truth oracle and Monte Carlo runner."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dataset import Cohort, Schema, continuous_basis, ehr_basis, make_cohort
from .imputation import DegenerateWeightError
from .regressors import (ConvergenceError, SeparationError, SingularSystemError,
                         make_imputer, sigmoid)
from .ssq import fit_supervised_q, param_names
from .value_dr import DegeneratePropensityError, fit_pipeline

log = logging.getLogger(__name__)

SETTINGS = ("continuous", "ehr")
MISSPECS = ("none", "q", "pi")
IMPUTERS = ("be", "rf")

# continuous setting
XI1 = np.array([0.3, -0.5])
BETA1 = np.array([1.0, 1.0])
GAMMA1 = np.array([1.0, -2.0])
DELTA = np.array([0.0, 0.5, -0.75, 0.25])
XI2 = np.array([0.0, 0.5, 0.1, -1.0, -0.1])
BETA2 = np.array([0.1, 3.0, 0.0, 0.1, -0.5, -0.5])
GAMMA2 = np.array([1.0, 0.25, 0.5])
# surrogate noise sd; unpublished, exposed as a knob
SIGMA_Z = 1.0

# EHR-like setting
E_XI1 = np.array([-0.1, 1.0, -1.0, 0.1])
E_BETA1 = np.array([0.5, 0.2, -1.0, -1.0, 0.1, -0.1, 0.1])
E_GAMMA1 = np.array([1.0, -2.0, -2.0, -0.1, 0.1, -1.5])
E_XI2 = np.array([0.0, 0.5, 0.1, -1.0, 1.0, -0.1])
E_BETA2 = np.concatenate([[1.0], E_BETA1, [0.25, -1.0, -0.5]])
E_GAMMA2 = np.array([1.0, 0.1, -0.1, 0.1, -0.1, 0.25, -1.0, -0.5])
E_DELTA = np.array([1.0, 1.0])
E_ALPHA = (1.0, 1.0)  # intercept and outcome loadings of the count surrogates


def _pad(v, m):
    out = np.zeros(m)
    out[: v.size] = v
    return out


def _bern(rng, p):
    return (rng.random(np.shape(p)) < p).astype(float)


@dataclass(frozen=True)
class Policy:
    """Deterministic regime ``A_t = I(H_t1'gamma_t > 0)`` for the generators."""

    gamma1: np.ndarray
    gamma2: np.ndarray


def _draw_continuous(m, misspec, rng, policy=None, sigma_z=SIGMA_Z):
    xi26 = 1.0 if misspec == "pi" else 0.0
    b27 = 1.0 if misspec == "q" else 0.0
    one = np.ones(m)
    o1 = _bern(rng, np.full(m, 0.5))
    h10 = np.column_stack([one, o1])
    if policy is None:
        a1 = _bern(rng, sigmoid(h10 @ XI1))
    else:
        a1 = (h10 @ policy.gamma1 > 0).astype(float)
    y2 = rng.normal(h10 @ BETA1 + a1 * (h10 @ GAMMA1), 1.0)
    o2 = rng.normal(np.column_stack([one, o1, a1, o1 * a1]) @ DELTA, math.sqrt(2.0))
    h20 = np.column_stack([one, o1, a1, o1 * a1, o2])
    h21 = np.column_stack([one, a1, o2])
    if policy is None:
        a2 = _bern(rng, sigmoid(h20 @ XI2 + xi26 * o2 ** 2))
    else:
        a2 = (h21 @ policy.gamma2 > 0).astype(float)
    m3 = BETA2[0] * y2 + h20 @ BETA2[1:] + a2 * (h21 @ GAMMA2)
    if b27:
        with np.errstate(divide="ignore", invalid="ignore"):
            extra = o2 ** 2 * y2 * np.sin(1.0 / (o2 ** 2 * (y2 + 1.0)))
        m3 = m3 + b27 * np.nan_to_num(extra, nan=0.0, posinf=0.0, neginf=0.0)
    y3 = rng.normal(m3, math.sqrt(2.0))
    w1 = np.floor(y2 + rng.normal(0.0, sigma_z, m))
    w2 = np.floor(y3 + rng.normal(0.0, sigma_z, m))
    return {"o1": o1[:, None], "a1": a1, "w1": w1[:, None], "o2": o2[:, None],
            "a2": a2, "w2": w2[:, None], "y2": y2, "y3": y3}


def _draw_ehr(m, misspec, rng, policy=None, p_w=3):
    xi_t = np.full(2, 1 / math.sqrt(2)) if misspec == "pi" else np.zeros(2)
    b_t = np.full(2, 1 / math.sqrt(2)) if misspec == "q" else np.zeros(2)
    one = np.ones(m)
    o1 = rng.normal(size=(m, 6))
    h10 = np.column_stack([one, o1])
    h11 = np.column_stack([one, o1[:, 1:]])
    if policy is None:
        a1 = _bern(rng, sigmoid(h10 @ _pad(E_XI1, 7)))
    else:
        a1 = (h11 @ policy.gamma1 > 0).astype(float)
    y2 = _bern(rng, sigmoid(h10 @ E_BETA1 + a1 * (h11 @ E_GAMMA1)))
    z = o1[:, :2] * E_DELTA + rng.normal(size=(m, 2))
    o2 = (z > 0).astype(float)
    h20 = np.column_stack([one, o1, a1, o2])
    h21 = np.column_stack([one, o1[:, :4], a1, o2])
    if policy is None:
        a2 = _bern(rng, sigmoid(h20 @ _pad(E_XI2, 10) + o2 @ xi_t))
    else:
        a2 = (h21 @ policy.gamma2 > 0).astype(float)
    lin = E_BETA2[0] * y2 + h20 @ E_BETA2[1:] + a2 * (h21 @ E_GAMMA2)
    lin = lin + (o2 @ b_t) * y2 * np.sin(np.sum(o2 ** 2, axis=1) / (y2 + 1.0))
    y3 = _bern(rng, sigmoid(lin))
    w1 = np.floor(rng.normal(E_ALPHA[0] + E_ALPHA[1] * y2[:, None], 1.0, size=(m, p_w)))
    w2 = np.floor(rng.normal(E_ALPHA[0] + E_ALPHA[1] * y3[:, None], 1.0, size=(m, p_w)))
    return {"o1": o1, "a1": a1, "w1": w1, "o2": o2, "a2": a2, "w2": w2, "y2": y2, "y3": y3}


def draw(setting, m, misspec="none", rng=None, policy=None, **kw) -> dict:
    if misspec not in MISSPECS:
        raise ValueError(f"misspec must be one of {MISSPECS}")
    rng = np.random.default_rng(rng)
    if setting == "continuous":
        return _draw_continuous(m, misspec, rng, policy, kw.get("sigma_z", SIGMA_Z))
    if setting == "ehr":
        return _draw_ehr(m, misspec, rng, policy, kw.get("p_w", 3))
    raise ValueError(f"setting must be one of {SETTINGS}")


def schema_for(setting, p_w=3) -> Schema:
    return Schema(1, 1, 1, 1) if setting == "continuous" else Schema(6, p_w, 2, p_w)


def basis_for(setting):
    return continuous_basis() if setting == "continuous" else ehr_basis()


def _cohort(setting, n, N, misspec, rng, **kw) -> Cohort:
    raw = draw(setting, n + N, misspec, rng, **kw)
    lab = {k: v[:n] for k, v in raw.items()}
    unl = {k: v[n:] for k, v in raw.items() if k not in ("y2", "y3")} if N else None
    p_w = kw.get("p_w", 3)
    return make_cohort(lab, unl, schema_for(setting, p_w), basis_for(setting))


def gen_continuous(n, N, misspec="none", seed=None, sigma_z=SIGMA_Z) -> Cohort:
    """First ``n`` rows labeled, remaining ``N`` unlabeled."""
    return _cohort("continuous", n, N, misspec, np.random.default_rng(seed), sigma_z=sigma_z)


def gen_ehr(n, N, misspec="none", seed=None, p_w=3) -> Cohort:
    return _cohort("ehr", n, N, misspec, np.random.default_rng(seed), p_w=p_w)


def generate(setting, n, N, misspec="none", seed=None, **kw) -> Cohort:
    if setting == "continuous":
        return gen_continuous(n, N, misspec, seed, **kw)
    if setting == "ehr":
        return gen_ehr(n, N, misspec, seed, **kw)
    raise ValueError(f"setting must be one of {SETTINGS}")


@dataclass(frozen=True)
class OracleResult:
    setting: str
    misspec: str
    M: int
    value: float
    value_se: float
    theta1: list
    theta2: list
    names1: list
    names2: list
    seed: int


def true_value_oracle(setting, misspec="none", M=1_000_000, seed=0, **kw) -> OracleResult:
    """Population policy parameters and the value of the implied regime.

    Supervised Q-learning on ``M`` fully labeled draws gives the population
    targets; a fresh batch of ``M`` trajectories then follows the fitted regime
    at both stages and ``Y2 + Y3`` is averaged.
    """
    if M < 100_000:
        raise ValueError("oracle needs M >= 1e5")
    ss = np.random.SeedSequence([int(seed), 0x0A]).spawn(2)
    cohort = _cohort(setting, M, 0, misspec, np.random.default_rng(ss[0]), **kw)
    q = fit_supervised_q(cohort.labeled)
    pol = Policy(q.gamma1.copy(), q.gamma2.copy())
    cf = draw(setting, M, misspec, np.random.default_rng(ss[1]), policy=pol, **kw)
    total = cf["y2"] + cf["y3"]
    n1, n2 = param_names(cohort.names)
    return OracleResult(setting, misspec, int(M), float(total.mean()),
                        float(total.std(ddof=1) / math.sqrt(M)),
                        q.theta1.tolist(), q.theta2.tolist(), n1, n2, int(seed))


@lru_cache(maxsize=16)
def _oracle_cached(setting, misspec, M, seed, kw_items):
    return true_value_oracle(setting, misspec, M, seed, **dict(kw_items))


# ---------------------------------------------------------------- Monte Carlo


@dataclass(frozen=True)
class ScenarioConfig:
    setting: str = "continuous"
    n: int = 135
    N: int = 1272
    misspec: str = "none"
    imputer: str = "be"
    k_folds: int = 5
    reps: int = 1000
    seed: int = 0
    sigma_z: float = SIGMA_Z
    p_w: int = 3
    n_trees: int = 500
    h: float = 1.0
    oracle_M: int = 1_000_000
    oracle_seed: int = 20240101

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        if self.misspec not in MISSPECS:
            raise ValueError(f"misspec must be one of {MISSPECS}")
        if self.imputer not in IMPUTERS:
            raise ValueError(f"imputer must be one of {IMPUTERS}")
        if self.n < 20:
            raise ValueError("n must be at least 20")
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if not 2 <= self.k_folds <= self.n:
            raise ValueError("need 2 <= k_folds <= n")

    def gen_kw(self) -> dict:
        return {"sigma_z": self.sigma_z} if self.setting == "continuous" else {"p_w": self.p_w}


def oracle_for(cfg: ScenarioConfig) -> OracleResult:
    return _oracle_cached(cfg.setting, cfg.misspec, cfg.oracle_M, cfg.oracle_seed,
                          tuple(sorted(cfg.gen_kw().items())))


_FAILURES = (SingularSystemError, SeparationError, ConvergenceError, DegenerateWeightError,
             DegeneratePropensityError, np.linalg.LinAlgError, FloatingPointError)


def run_replication(cfg: ScenarioConfig, rep: int) -> dict | None:
    """One replication; returns a flat record or ``None`` on a numerical failure."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), int(rep)]))
    cohort = generate(cfg.setting, cfg.n, cfg.N, cfg.misspec, rng, **cfg.gen_kw())
    imp_seed = int(rng.integers(2 ** 31))
    imputer = make_imputer(cfg.imputer, seed=imp_seed, n_trees=cfg.n_trees) \
        if cfg.imputer == "rf" else make_imputer("be")
    rec = {"rep": rep}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sup = fit_pipeline(cohort, "sup-dr", h=cfg.h)
            ssl = fit_pipeline(cohort, "ssl-dr", imputer, cfg.k_folds,
                               seed=int(rng.integers(2 ** 31)), h=cfg.h)
    except _FAILURES as e:
        log.warning("replication %d failed: %s", rep, e)
        return None
    for tag, fit in (("sup", sup), ("ssl", ssl)):
        theta = np.concatenate([fit.bundle.q.theta1, fit.bundle.q.theta2])
        for j, (est, se) in enumerate(zip(theta, fit.qvar.ase)):
            rec[f"{tag}_theta{j}"] = float(est)
            rec[f"{tag}_theta{j}_se"] = float(se)
        rec[f"{tag}_value"] = fit.value.estimate
        rec[f"{tag}_value_se"] = fit.value.se
    return rec


@dataclass
class McSummary:
    config: dict
    truth: dict
    rows: list
    reps_completed: int
    reps_requested: int
    records: list = field(repr=False, default_factory=list)

    def row(self, name) -> dict:
        for r in self.rows:
            if r["name"] == name:
                return r
        raise KeyError(name)

    def to_json(self) -> dict:
        return {"config": self.config, "truth": self.truth, "rows": self.rows,
                "reps_completed": self.reps_completed, "reps_requested": self.reps_requested}


def _agg(est, se, truth):
    est, se = np.asarray(est, float), np.asarray(se, float)
    r = {"truth": truth, "bias": float(est.mean() - truth)}
    r["ese"] = float(est.std(ddof=1)) if est.size > 1 else None
    r["ase"] = float(se.mean())
    r["covp"] = float(np.mean(np.abs(est - truth) <= 1.959963984540054 * se))
    return r


def summarize(cfg: ScenarioConfig, records: list, oracle: OracleResult) -> McSummary:
    truth_theta = oracle.theta1 + oracle.theta2
    names = oracle.names1 + oracle.names2
    rows = []
    for j, name in enumerate(names + ["value"]):
        key = f"theta{j}" if name != "value" else "value"
        truth = truth_theta[j] if name != "value" else oracle.value
        out = {"name": name}
        for tag in ("sup", "ssl"):
            a = _agg([r[f"{tag}_{key}"] for r in records],
                     [r[f"{tag}_{key}_se"] for r in records], truth)
            out["truth"] = a["truth"]
            for k in ("bias", "ese", "ase", "covp"):
                out[f"{k}_{tag}"] = a[k]
        e_sup, e_ssl = out["ese_sup"], out["ese_ssl"]
        out["re"] = e_sup / e_ssl if e_sup is not None and e_ssl else None
        rows.append(out)
    return McSummary(asdict(cfg), asdict(oracle), rows, len(records), cfg.reps, records)


def run_monte_carlo(cfg: ScenarioConfig, jobs: int = 1, progress=None) -> McSummary:
    """Run all replications (in parallel when ``jobs > 1``) and aggregate."""
    oracle = oracle_for(cfg)
    reps = range(cfg.reps)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(run_replication, [cfg] * cfg.reps, reps,
                                  chunksize=max(1, cfg.reps // (4 * jobs))))
    else:
        results = []
        for r in reps:
            results.append(run_replication(cfg, r))
            if progress is not None:
                progress(r)
    records = [r for r in results if r is not None]
    if not records:
        raise RuntimeError("every replication failed")
    return summarize(cfg, records, oracle)


# ---------------------------------------------------------------- outputs

SUMMARY_FIELDS = ("name", "truth", "bias_sup", "ese_sup", "ase_sup", "covp_sup",
                  "bias_ssl", "ese_ssl", "ase_ssl", "covp_ssl", "re")


def _fmt(v):
    if v is None:
        return ""
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def write_outputs(summary: McSummary, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for r in summary.rows:
            w.writerow([_fmt(r[k]) for k in SUMMARY_FIELDS])
    if summary.records:
        keys = list(summary.records[0].keys())
        with open(out / "reps.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for r in summary.records:
                w.writerow([_fmt(r[k]) for k in keys])
    with open(out / "oracle.json", "w") as fh:
        json.dump(summary.truth, fh, indent=2, sort_keys=True)
    (out / "summary.md").write_text(markdown_table(summary))


def markdown_table(summary: McSummary) -> str:
    """Supervised (Bias, ESE) beside semi-supervised (Bias, ESE, ASE, CovP, RE)."""
    c = summary.config

    def f(v):
        return "" if v is None else f"{v:.2f}"

    lines = [
        f"setting={c['setting']} n={c['n']} N={c['N']} misspec={c['misspec']} "
        f"imputer={c['imputer']} reps={summary.reps_completed}/{summary.reps_requested}",
        "",
        "| Parameter | SUP Bias | SUP ESE | SSL Bias | SSL ESE | SSL ASE | SSL CovP | RE |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in summary.rows:
        lines.append(
            f"| {r['name']}={r['truth']:.2f} | {f(r['bias_sup'])} | {f(r['ese_sup'])} | "
            f"{f(r['bias_ssl'])} | {f(r['ese_ssl'])} | {f(r['ase_ssl'])} | "
            f"{f(r['covp_ssl'])} | {f(r['re'])} |"
        )
    return "\n".join(lines) + "\n"
