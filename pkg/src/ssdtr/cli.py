"""Command-line entry point: ``ssdtr simulate | fit | evaluate``.

Settings resolve as flags > JSON config (``--config``) > ``SSQ_SEED`` (seed
only) > built-in defaults. Exit codes are 0 on success, 1 on runtime or
statistical failure and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import BasisConfig, SchemaError, default_basis, load_csv, read_csv_rows
from .imputation import DegenerateWeightError
from .regressors import (ConvergenceError, OracleImputer, SeparationError, SingularSystemError,
                         make_imputer)
from .simulate import SIGMA_Z, ScenarioConfig, run_monte_carlo, write_outputs
from .ssq import QParams, decide, dims_of, param_names
from .value_dr import (DegeneratePropensityError, crossvalidated_value, evaluate_policy,
                       fit_pipeline)


EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MIN_COMPLETED = 0.95

SIM_DEFAULTS = {
    "setting": "continuous", "n": 135, "N": 1272, "reps": 1000, "misspec": "none",
    "imputer": "be", "folds": 5, "seed": 0, "sigma_z": SIGMA_Z, "p_w": 3, "trees": 500,
    "h": 1.0, "oracle_m": 1_000_000, "jobs": 1, "out": None,
}
DATA_DEFAULTS = {
    "labeled": None, "unlabeled": None, "basis": None, "imputer": "be", "trees": 500,
    "imputer_columns": None, "folds": 5, "seed": 0, "h": 1.0, "out": None,
    "oracle_imputer": False,
}
FIT_DEFAULTS = {**DATA_DEFAULTS, "method": "sup"}
EVAL_DEFAULTS = {**DATA_DEFAULTS, "method": "sup-dr", "cv": None, "fit": None}

_RUNTIME_ERRORS = (SchemaError, SingularSystemError, SeparationError, ConvergenceError,
                   DegenerateWeightError, DegeneratePropensityError, np.linalg.LinAlgError,
                   ArithmeticError, OSError, RuntimeError, KeyError, ValueError)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    # a manifest carries the resolved settings under "config"
    return dict(doc.get("config", doc))


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults, the optional JSON config and explicit flags."""
    cfg = dict(defaults)
    file_cfg = _load_json(args.config) if getattr(args, "config", None) else {}
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    env_seed = os.environ.get("SSQ_SEED")
    if env_seed is not None and "seed" not in file_cfg:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"SSQ_SEED must be an integer, got {env_seed!r}") from None
    cfg.update(file_cfg)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None and v is not False:
            cfg[k] = v
    return cfg


def _versions() -> dict:
    import numba
    import scipy

    return {"ssdtr": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def write_manifest(out: Path, command: str, cfg: dict) -> None:
    doc = {"command": command, "config": cfg, "seed": cfg.get("seed"), "versions": _versions()}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _emit(doc: dict, out, name: str, command: str, cfg: dict) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        (path / name).write_text(text)
        write_manifest(path, command, cfg)
    sys.stdout.write(text)


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    cfg = resolve(args, SIM_DEFAULTS)
    if not cfg["out"]:
        raise UsageError("simulate needs --out")
    if cfg["jobs"] < 1:
        raise UsageError("--jobs must be at least 1")
    try:
        sc = ScenarioConfig(
            setting=cfg["setting"], n=cfg["n"], N=cfg["N"], misspec=cfg["misspec"],
            imputer=cfg["imputer"], k_folds=cfg["folds"], reps=cfg["reps"], seed=cfg["seed"],
            sigma_z=cfg["sigma_z"], p_w=cfg["p_w"], n_trees=cfg["trees"], h=cfg["h"],
            oracle_M=cfg["oracle_m"],
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    summary = run_monte_carlo(sc, jobs=cfg["jobs"])
    out = Path(cfg["out"])
    write_outputs(summary, out)
    write_manifest(out, "simulate", cfg)
    done = summary.reps_completed / summary.reps_requested
    if done < MIN_COMPLETED:
        print(f"only {summary.reps_completed} of {summary.reps_requested} replications "
              f"completed; see the log for the failures", file=sys.stderr)
        return EXIT_FAIL
    print(f"wrote {out}/summary.csv ({summary.reps_completed} replications)", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- fit / evaluate


def _cohort(cfg):
    if not cfg["labeled"]:
        raise UsageError("--labeled is required")
    for key in ("labeled", "unlabeled", "basis"):
        if cfg[key] and not Path(cfg[key]).exists():
            raise UsageError(f"--{key} file {cfg[key]} does not exist")
    if cfg["basis"]:
        basis = BasisConfig.load(cfg["basis"])
    else:
        schema, _, _ = read_csv_rows(cfg["labeled"])
        basis = default_basis(schema)
    return load_csv(cfg["labeled"], basis, unlabeled_path=cfg["unlabeled"])


def _imputer(cfg, cohort):
    if cfg["oracle_imputer"]:
        return OracleImputer()
    cols = cfg["imputer_columns"]
    if cols is not None:
        known = list(cohort.schema.imputer_columns)
        if isinstance(cols, str):
            cols = [c.strip() for c in cols.split(",") if c.strip()]
        bad = [c for c in cols if c not in known]
        if bad:
            raise UsageError(f"unknown imputer columns {bad}; available: {known}")
        cols = [known.index(c) for c in cols]
    if cfg["imputer"] not in ("be", "rf"):
        raise UsageError("--imputer must be be or rf")
    return make_imputer(cfg["imputer"], seed=cfg["seed"], n_trees=cfg["trees"], columns=cols)


def _named(names, values) -> dict:
    return {n: float(v) for n, v in zip(names, values)}


def policy_report(q: QParams, cohort, ase=None) -> tuple[dict, list]:
    """Per-stage rule description plus warnings about indistinct treatment effects."""
    names = cohort.names
    n1, n2 = param_names(names)
    p10, p11, p20, _ = q.dims
    se1 = None if ase is None else ase[p10: p10 + p11]
    se2 = None if ase is None else ase[len(n1) + 1 + p20:]
    out, warns = {}, []
    for t, gamma, feats, se in ((1, q.gamma1, names["h11"], se1), (2, q.gamma2, names["h21"], se2)):
        out[f"stage{t}"] = {"features": list(feats), "gamma": [float(g) for g in gamma],
                            "rule": f"treat (a{t}=1) when h{t}1'gamma{t} > 0"}
        if se is not None and np.all(np.abs(gamma) < 1.959963984540054 * np.asarray(se)):
            warns.append(f"stage {t}: no treatment-interaction coefficient differs from zero "
                         f"at the 5% level; the estimated rule may be arbitrary")
    for t, key in ((1, "h11"), (2, "h21")):
        H = getattr(cohort.labeled, key)
        g = q.gamma1 if t == 1 else q.gamma2
        lin = H @ g
        if np.any(np.abs(lin) <= 1e-8 * max(1.0, float(np.abs(lin).max()))):
            warns.append(f"stage {t}: some rows have h{t}1'gamma{t} numerically zero")
    return out, warns


def _recommendations(q: QParams, sample) -> dict:
    return {"d1": decide(sample.h11, q.gamma1).astype(int).tolist(),
            "d2": decide(sample.h21, q.gamma2).astype(int).tolist()}


def _collect(caught) -> list:
    return [f"{w.category.__name__}: {w.message}" for w in caught]


def cmd_fit(args) -> int:
    cfg = resolve(args, FIT_DEFAULTS)
    if cfg["method"] not in ("sup", "ssl"):
        raise UsageError("--method must be sup or ssl")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cohort = _cohort(cfg)
        if cfg["method"] == "ssl" and cohort.N == 0:
            raise UsageError("--method ssl needs unlabeled rows (--unlabeled)")
        if cfg["method"] == "ssl":
            fit = fit_pipeline(cohort, "ssl-dr", _imputer(cfg, cohort), cfg["folds"],
                               seed=cfg["seed"], h=cfg["h"])
        else:
            fit = fit_pipeline(cohort, "sup-dr", h=cfg["h"])
    q, ase = fit.bundle.q, fit.qvar.ase
    n1, n2 = param_names(cohort.names)
    pol, pol_warns = policy_report(q, cohort, ase)
    doc = {
        "method": cfg["method"], "n": cohort.n, "N": cohort.N,
        "basis": cohort.basis.to_json(), "dims": list(q.dims),
        "coefficients": {"theta1": _named(n1, q.theta1), "theta2": _named(n2, q.theta2)},
        "ase": {"theta1": _named(n1, ase[: len(n1)]), "theta2": _named(n2, ase[len(n1):])},
        "propensity": {"xi1": fit.bundle.prop.xi1.tolist(), "xi2": fit.bundle.prop.xi2.tolist()},
        "policy": pol,
        "recommendations": {"labeled": _recommendations(q, cohort.labeled)},
        "value": fit.value.to_json(),
        "warnings": _collect(caught) + pol_warns,
    }
    if cohort.N:
        doc["recommendations"]["unlabeled"] = _recommendations(q, cohort.unlabeled)
    _emit(doc, cfg["out"], "fit.json", "fit", cfg)
    return EXIT_OK


def _q_from_fit(path, cohort) -> QParams:
    try:
        doc = json.loads(Path(path).read_text())
        t1, t2 = doc["coefficients"]["theta1"], doc["coefficients"]["theta2"]
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise UsageError(f"cannot read fit JSON {path}: {e}") from None
    n1, n2 = param_names(cohort.names)
    if set(t1) != set(n1) or set(t2) != set(n2):
        raise UsageError("fit JSON parameters do not match the data's feature blocks")
    return QParams(np.array([t1[k] for k in n1]), np.array([t2[k] for k in n2]),
                   dims_of(cohort.labeled), str(doc.get("method", "SUP")).upper())


def cmd_evaluate(args) -> int:
    cfg = resolve(args, EVAL_DEFAULTS)
    method = cfg["method"]
    if method not in ("q-plugin", "sup-dr", "ssl-dr"):
        raise UsageError("--method must be q-plugin, sup-dr or ssl-dr")
    if cfg["cv"] is not None and cfg["fit"]:
        raise UsageError("--cv refits the policy in every fold and cannot take --fit")
    if cfg["cv"] is not None and cfg["cv"] < 2:
        raise UsageError("--cv needs at least 2 folds")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cohort = _cohort(cfg)
        if method == "ssl-dr" and cohort.N == 0:
            raise UsageError("--method ssl-dr needs unlabeled rows (--unlabeled)")
        imputer = _imputer(cfg, cohort) if method == "ssl-dr" else None
        if cfg["fit"]:
            q = _q_from_fit(cfg["fit"], cohort)
            est = evaluate_policy(cohort, method, q, imputer, cfg["folds"], cfg["seed"], cfg["h"])
        elif cfg["cv"] is not None:
            est = crossvalidated_value(cohort, method, imputer, cfg["cv"], cfg["seed"], cfg["h"],
                                       inner_folds=cfg["folds"])
        else:
            fit = fit_pipeline(cohort, method, imputer, cfg["folds"], seed=cfg["seed"], h=cfg["h"])
            est = fit.value
    doc = est.to_json()
    doc["warnings"] = list(doc["warnings"]) + _collect(caught)
    _emit(doc, cfg["out"], "evaluate.json", "evaluate", cfg)
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssdtr", description="Semi-supervised Q-learning and doubly robust value.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="Monte Carlo study of one scenario")
    s.add_argument("--config")
    s.add_argument("--setting", choices=("continuous", "ehr"))
    s.add_argument("--n", type=int)
    s.add_argument("--N", type=int)
    s.add_argument("--reps", type=int)
    s.add_argument("--misspec", choices=("none", "q", "pi"))
    s.add_argument("--imputer", choices=("be", "rf"))
    s.add_argument("--folds", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--sigma-z", dest="sigma_z", type=float)
    s.add_argument("--p-w", dest="p_w", type=int)
    s.add_argument("--trees", type=int)
    s.add_argument("--h", type=float)
    s.add_argument("--oracle-m", dest="oracle_m", type=int)
    s.add_argument("--jobs", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    def data_flags(q):
        q.add_argument("--config")
        q.add_argument("--labeled")
        q.add_argument("--unlabeled")
        q.add_argument("--basis", help="JSON feature-block config")
        q.add_argument("--imputer", choices=("be", "rf"))
        q.add_argument("--trees", type=int)
        q.add_argument("--imputer-columns", dest="imputer_columns",
                       help="comma-separated subset of o1_*,a1,w1_*,o2_*,a2,w2_*")
        q.add_argument("--folds", type=int)
        q.add_argument("--seed", type=int)
        q.add_argument("--h", type=float)
        q.add_argument("--out")
        q.add_argument("--oracle-imputer", dest="oracle_imputer", action="store_true",
                       help=argparse.SUPPRESS)

    f = sub.add_parser("fit", help="fit Q-functions, propensities and the policy")
    data_flags(f)
    f.add_argument("--method", choices=("sup", "ssl"))
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("evaluate", help="estimate the value of the fitted policy")
    data_flags(e)
    e.add_argument("--method", choices=("q-plugin", "sup-dr", "ssl-dr"))
    e.add_argument("--cv", type=int)
    e.add_argument("--fit", help="fit JSON whose Q-parameters define the policy")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except _RUNTIME_ERRORS as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
