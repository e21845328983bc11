"""Command-line front end: ``ratiocate {fit, validate, simulate, toy, check}``.

Exit codes: 0 success, 2 input or schema error, 3 numerical non-convergence,
4 internal invariant violation. Failures print a JSON error document on
stderr. Every random choice derives from ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .contrast import ContrastConfig, SingularDerivativeError, fit_contrast
from .data import DataError, load_csv, make_folds, normalize_exposure
from .glm import ConvergenceError
from .nuisance import NuisanceConfig, fit_nuisance_bundle, outcome_fitter
from .rng import child_seed
from .validate import (
    DEFAULT_Q_GRID,
    NonPositiveMeanError,
    SubgroupError,
    ValidationConfig,
    median_split,
    quantile_threshold,
    validation_curve,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INTERNAL = 0, 2, 3, 4
FIT_METHODS = ("contrast", "tworeg", "naive", "boost")

DEFAULTS = {
    "input": None,
    "schema": None,
    "method": "contrast,tworeg,naive",
    "learner": "boost",
    "folds": 7,
    "partition_replicates": 3,
    "seed": 0,
    "survival": False,
    "tau": None,
    "symmetric": True,
    "q_grid": ",".join(f"{q:g}" for q in DEFAULT_Q_GRID),
    "jobs": 1,
    "out": "out",
    "scores": None,
    "score_column": None,
    "oracle": None,
    "setting": None,
    "replicates": 50,
    "n": 5000,
    "adjusted": False,
    "randomized": False,
}


class InputError(Exception):
    pass


class InvariantError(Exception):
    pass


def _learner(name: str) -> str:
    return {"boost": "boosted", "boosted": "boosted", "glm": "glm"}[name]


def _methods(spec: str, valid) -> list[str]:
    names = [m.strip() for m in spec.split(",") if m.strip()]
    bad = [m for m in names if m not in valid]
    if bad or not names:
        raise InputError(f"unknown method(s) {bad}; valid: {', '.join(valid)}")
    return names


def _q_grid(spec) -> tuple:
    try:
        vals = tuple(float(x) for x in str(spec).split(",") if x.strip())
    except ValueError:
        raise InputError(f"bad --q-grid {spec!r}") from None
    if not vals:
        raise InputError("empty --q-grid")
    return vals


def provenance(cfg: dict) -> dict:
    canon = json.dumps({k: cfg[k] for k in sorted(cfg) if k not in ("jobs", "out")}, sort_keys=True, default=str)
    return {"tool": "ratiocate", "version": __version__, "seed": cfg.get("seed"), "config_hash": hashlib.sha256(canon.encode()).hexdigest()[:16]}


def _header_lines(prov: dict) -> list[str]:
    return [f"# {prov['tool']} {prov['version']} seed={prov['seed']} config={prov['config_hash']}"]


def _write_csv(path: Path, header: list[str], rows, prov: dict):
    with path.open("w", newline="", encoding="utf-8") as fh:
        for line in _header_lines(prov):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, doc: dict, prov: dict):
    path.write_text(json.dumps({"provenance": prov, **doc}, indent=2, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise InputError(f"{path}: empty file")
    return rows[0], [r for r in rows[1:] if r]


def _load(cfg) -> object:
    if not cfg["input"]:
        raise InputError("--input is required")
    schema = None
    if cfg["schema"]:
        schema = cfg["schema"] if isinstance(cfg["schema"], dict) else json.loads(Path(cfg["schema"]).read_text())
    mode = "survival" if cfg["survival"] else "count"
    if cfg["survival"] and cfg["tau"] is None:
        raise InputError("--tau is required with --survival")
    if not cfg["survival"] and cfg["tau"] is not None:
        raise InputError("--tau only applies with --survival")
    ds = load_csv(cfg["input"], schema, mode)
    if mode == "count" and ds.exposure is not None:
        ds = normalize_exposure(ds)
    return ds


# fit


def _weight_table(fits: dict, terms) -> str:
    names = list(fits)
    width = max(12, *(len(t) for t in terms))
    lines = ["Estimated weights of the log CATE score", f"{'term':<{width}}" + "".join(f"{m:>14}" for m in names)]
    for j, t in enumerate(terms):
        cells = []
        for m in names:
            w = fits[m]["weights"]
            cells.append(f"{w[j]:>14.4f}" if w is not None else f"{'-':>14}")
        lines.append(f"{t:<{width}}" + "".join(cells))
    if "contrast" in fits:
        se = fits["contrast"].get("std_errors")
        lines.append("")
        lines.append("contrast standard errors: " + ", ".join(f"{t}={s:.4f}" for t, s in zip(terms, se)))
    return "\n".join(lines) + "\n"


def cmd_fit(cfg: dict) -> int:
    ds = _load(cfg)
    methods = _methods(cfg["method"], FIT_METHODS)
    seed = int(cfg["seed"])
    learner = _learner(cfg["learner"])
    nuis = NuisanceConfig(outcome_learner=learner, seed=child_seed(seed, "nuisance"))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg)
    terms = ["intercept", *ds.covariate_names]
    fits, scores = {}, {}

    if cfg["survival"]:
        _fit_survival(ds, cfg, methods, nuis, fits, scores)
    else:
        _fit_count(ds, cfg, methods, nuis, fits, scores)

    _write_json(
        out / "fit.json",
        {"mode": ds.mode, "symmetric": cfg["symmetric"], "n": ds.n, "terms": terms, "methods": fits},
        prov,
    )
    _write_csv(out / "scores.csv", ["row", *scores], [[i, *(repr(float(scores[m][i])) for m in scores)] for i in range(ds.n)], prov)
    (out / "weights.txt").write_text("\n".join(_header_lines(prov)) + "\n" + _weight_table(fits, terms), encoding="utf-8")
    print(f"wrote {out / 'fit.json'}, {out / 'scores.csv'}, {out / 'weights.txt'}")
    return EXIT_OK


def _replicate_bundles(ds, cfg, nuis):
    from joblib import Parallel, delayed

    seed = int(cfg["seed"])
    reps = int(cfg["partition_replicates"])

    def one(rep):
        plan = make_folds(ds.n, int(cfg["folds"]), ds.r, child_seed(seed, "folds", rep))
        return fit_nuisance_bundle(ds, plan, replace(nuis, seed=child_seed(seed, "nuisance", rep)))

    if int(cfg["jobs"]) > 1 and reps > 1:
        return Parallel(n_jobs=int(cfg["jobs"]))(delayed(one)(k) for k in range(reps))
    return [one(k) for k in range(reps)]


def _fit_count(ds, cfg, methods, nuis, fits, scores):
    from .tworeg import fit_naive, fit_two_regression

    bundles = _replicate_bundles(ds, cfg, nuis) if {"contrast", "tworeg"} & set(methods) else None
    if "contrast" in methods:
        cc = ContrastConfig(symmetric=cfg["symmetric"], folds=int(cfg["folds"]), replicates=int(cfg["partition_replicates"]))
        fit = fit_contrast(ds, cc, nuis, int(cfg["seed"]), bundles=bundles)
        fits["contrast"] = {**fit.to_dict(), "weights": fit.delta.tolist()}
        scores["contrast"] = fit.predict_cate(ds.z)
    if "tworeg" in methods:
        tws = [fit_two_regression(ds, b) for b in bundles]
        beta0 = np.mean([t.beta0 for t in tws], axis=0)
        beta1 = np.mean([t.beta1 for t in tws], axis=0)
        doc = tws[0].to_dict()
        doc.update(beta0=beta0.tolist(), beta1=beta1.tolist(), log_cate_weights=(beta1 - beta0).tolist(), partition_replicates=len(tws))
        fits["tworeg"] = {**doc, "weights": (beta1 - beta0).tolist()}
        scores["tworeg"] = np.exp(ds.design @ (beta1 - beta0))
    if "naive" in methods:
        nv = fit_naive(ds)
        fits["naive"] = {**nv.to_dict(), "weights": nv.delta_implied.tolist()}
        scores["naive"] = nv.predict_cate(ds.z)
    if "boost" in methods:
        models = []
        for arm in (0, 1):
            rows = ds.r == arm
            models.append(outcome_fitter(replace(nuis, outcome_learner="boosted"))(ds.z[rows], ds.y[rows]))
        fits["boost"] = {"method": "boost", "arm0": models[0].to_dict(), "arm1": models[1].to_dict(), "weights": None}
        scores["boost"] = models[1].predict(ds.z) / models[0].predict(ds.z)


def _fit_survival(ds, cfg, methods, nuis, fits, scores):
    from .survival import (
        SurvivalConfig,
        fit_rmtl_boosting,
        fit_rmtl_naive,
        fit_rmtl_two_regression,
        fit_survival_nuisance,
        solve_rmtl_contrast,
    )

    tau = float(cfg["tau"])
    scfg = SurvivalConfig(tau=tau, folds=int(cfg["folds"]), nuisance=nuis, outcome_learner="boosted" if nuis.outcome_learner == "boosted" else "rmst")
    seed = int(cfg["seed"])
    nuisances = []
    if {"contrast", "tworeg"} & set(methods):
        for rep in range(int(cfg["partition_replicates"])):
            plan = make_folds(ds.n, int(cfg["folds"]), ds.r, child_seed(seed, "folds", rep))
            nuisances.append(fit_survival_nuisance(ds, plan, replace(scfg, nuisance=replace(nuis, seed=child_seed(seed, "nuisance", rep)))))
    if "contrast" in methods:
        cc = ContrastConfig(symmetric=cfg["symmetric"], folds=int(cfg["folds"]))
        cf = [solve_rmtl_contrast(ds, nu, cc) for nu in nuisances]
        fit = replace(cf[0], delta=np.mean([f.delta for f in cf], axis=0), partition_replicates=len(cf))
        fits["contrast"] = {**fit.to_dict(), "metric": "rmtl_ratio", "tau": tau, "weights": fit.delta.tolist()}
        scores["contrast"] = fit.predict_cate(ds.z)
    if "tworeg" in methods:
        tws = [fit_rmtl_two_regression(ds, nu) for nu in nuisances]
        w = np.mean([t.delta_implied for t in tws], axis=0)
        fits["tworeg"] = {**tws[0].to_dict(), "log_cate_weights": w.tolist(), "metric": "rmtl_ratio", "tau": tau, "weights": w.tolist()}
        scores["tworeg"] = np.exp(ds.design @ w)
    if "naive" in methods:
        nv = fit_rmtl_naive(ds, tau)
        fits["naive"] = {**nv.to_dict(), "metric": "rmtl_ratio", "tau": tau, "weights": nv.delta_implied.tolist()}
        scores["naive"] = nv.predict_cate(ds.z)
    if "boost" in methods:
        m0, m1 = fit_rmtl_boosting(ds, tau, nuis)
        fits["boost"] = {"method": "boost", "metric": "rmtl_ratio", "tau": tau, "arm0": m0.to_dict(), "arm1": m1.to_dict(), "weights": None}
        scores["boost"] = m1.predict(ds.z) / m0.predict(ds.z)


# validate


def _read_scores(path, column, n) -> tuple[str, np.ndarray]:
    header, rows = _read_table(path)
    cols = [h for h in header if h != "row"]
    name = column or (cols[0] if cols else None)
    if name is None or name not in header:
        raise InputError(f"score column {name!r} not found in {path}; columns: {', '.join(header)}")
    j = header.index(name)
    try:
        vals = np.array([float(r[j]) for r in rows])
    except (ValueError, IndexError):
        raise InputError(f"non-numeric or missing score in column {name!r}") from None
    if vals.size != n:
        raise InputError(f"score file has {vals.size} rows but the dataset has {n}")
    return name, vals


def cmd_validate(cfg: dict) -> int:
    ds = _load(cfg)
    if not cfg["scores"]:
        raise InputError("--scores is required")
    name, scores = _read_scores(cfg["scores"], cfg["score_column"], ds.n)
    q_grid = _q_grid(cfg["q_grid"])
    # subgroup outcome models are always the log-linear working model
    vcfg = ValidationConfig(seed=int(cfg["seed"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg)

    if cfg["survival"]:
        from .survival import ipcw_weights_quiet, rmst_fitter, rmtl_outcome, rmtl_validation_curve

        tau = float(cfg["tau"])
        curve = rmtl_validation_curve(ds, scores, tau, q_grid, vcfg, score_name=name)
        # censoring weights are refitted within each half
        high = scores >= quantile_threshold(scores, 0.5)
        w = np.zeros(ds.n)
        for mask in (high, ~high):
            if mask.any():
                w[mask] = ipcw_weights_quiet(ds.subset(np.flatnonzero(mask)), tau)
        split = median_split(ds, scores, vcfg, outcome=rmtl_outcome(ds, tau), row_weights=w, fit_outcome=rmst_fitter(tau))
    else:
        curve = validation_curve(ds, scores, q_grid, vcfg, score_name=name)
        split = median_split(ds, scores, vcfg)

    recs = curve.records()
    header = ["q", "threshold", "m_c", "mu1", "mu0", "ad"]
    oracle = None
    if cfg["oracle"]:
        oracle = _oracle_column(cfg["oracle"], ds, scores, q_grid)
        header.append("oracle_ad")
    rows = []
    for i, rec in enumerate(recs):
        row = ["" if rec[k] is None else repr(float(rec[k])) for k in header[:6]]
        if oracle is not None:
            row.append(repr(float(oracle[i])))
        rows.append(row)
    _write_csv(out / f"curve_{name}.csv", header, rows, prov)
    doc = json.loads(curve.to_json())
    if oracle is not None:
        doc["oracle_ad"] = oracle.tolist()
    doc["median_split"] = split.to_dict()
    _write_json(out / f"curve_{name}.json", doc, prov)
    (out / f"curve_{name}.dat").write_text(curve.gnuplot_table(), encoding="utf-8")
    print(f"{name}: {curve.sparkline()}  (q = {q_grid[0]:g} .. {q_grid[-1]:g})")
    print(f"median split: high {split.high.ad:.4f} (n={split.high.m_c}), low {split.low.ad:.4f} (n={split.low.m_c})")
    return EXIT_OK


def _oracle_column(setting, ds, scores, q_grid) -> np.ndarray:
    """Exact AD over the dataset's covariates using the named setting's true means."""
    from .sim.dgp import get_setting
    from .sim.study import population_ad_curve

    try:
        spec = get_setting(setting)
    except KeyError as exc:
        raise InputError(str(exc.args[0])) from None
    if ds.d != 10 and spec.kind != "toy":
        raise InputError("the oracle needs the 10 simulation covariates")
    return population_ad_curve(spec, scores, q_grid, ds.z)


# simulate / toy / check


def cmd_simulate(cfg: dict) -> int:
    from .sim.dgp import SETTINGS
    from .sim.study import METHODS, StudyConfig, run_study

    setting = cfg["setting"]
    if setting not in SETTINGS:
        raise InputError(f"unknown setting {setting!r}; valid names: {', '.join(SETTINGS)}")
    if setting == "toy_confounding":
        return cmd_toy(cfg)
    methods = cfg["method"] if cfg["method"] != DEFAULTS["method"] else ",".join(METHODS)
    methods = [("boosting_ratio" if m == "boost" else m) for m in _methods(methods.replace("boosting_ratio", "boost"), FIT_METHODS)]
    scfg = StudyConfig(
        n=int(cfg["n"]),
        replicates=int(cfg["replicates"]),
        seed=int(cfg["seed"]),
        methods=tuple(methods),
        folds=int(cfg["folds"]),
        partition_replicates=1,
        symmetric=cfg["symmetric"],
        learner=_learner(cfg["learner"]),
        q_grid=_q_grid(cfg["q_grid"]),
        jobs=int(cfg["jobs"]),
    )
    res = run_study(setting, scfg)
    out = Path(cfg["out"])
    paths = res.write_csvs(out)
    prov = provenance(cfg)
    summary = {
        "setting": setting,
        "replicates": scfg.replicates,
        "n": scfg.n,
        "failures": res.failure_counts(),
        "median_pearson": {m: res.median_correlation(m) for m in methods},
        "median_spearman": {m: res.median_correlation(m, "spearman") for m in methods},
        "bias_coverage": res.bias_coverage_table(),
    }
    _write_json(out / f"{setting}_summary.json", summary, prov)
    for m in methods:
        print(f"{m:>15}: median correlation {summary['median_pearson'][m]:.3f}")
    for row in summary["bias_coverage"]:
        print(f"{row['term']:>10}: bias {row['bias']:+.4f}  coverage {row['coverage']:.3f}")
    print("wrote " + ", ".join(paths + [str(out / f'{setting}_summary.json')]))
    return EXIT_OK


def cmd_toy(cfg: dict) -> int:
    from .sim.study import toy_confounding_check

    n = int(cfg["n"]) if cfg["n"] != DEFAULTS["n"] else 100_000
    rep = toy_confounding_check(n, int(cfg["seed"]), randomized=bool(cfg["randomized"]), adjusted=bool(cfg["adjusted"]), learner=_learner(cfg["learner"]))
    doc = {"n": n, **rep.to_dict()}
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "toy_confounding.json", doc, provenance(cfg))
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_check(cfg: dict) -> int:
    from .contrast import DiscreteInstance, orthogonality_check
    from .survival import check_spurious_hr
    from .validate import check_monotone_ad, odds_ratio_counterexample, random_discrete_law
    from .rng import stream

    rng = stream(int(cfg["seed"]), "check")
    laws = [random_discrete_law(rng) for _ in range(100)]
    held = sum(check_monotone_ad(law).holds for law in laws)
    ore = odds_ratio_counterexample()
    hr = check_spurious_hr(int(cfg["n"]) if cfg["n"] != DEFAULTS["n"] else 100_000, int(cfg["seed"]))
    inst = DiscreteInstance.from_contrast([-1.0, 0.0, 1.0], [0.3, 0.4, 0.3], [1.0, 2.0, 1.5], [0.3, 0.5, 0.6], [0.2, 0.4])
    orth = orthogonality_check(inst, [0.2, 0.4], 1.0, 0.1)
    report = {
        "monotone_ad_laws_holding": f"{held}/100",
        "odds_ratio_top10": ore.top_marginal_or,
        "odds_ratio_best10": ore.best_marginal_or,
        "spurious_hr": hr,
        "orthogonality_derivative": orth,
    }
    ok = held == 100 and ore.best_marginal_or > ore.top_marginal_or and orth <= 1e-6
    report["passed"] = ok
    print(json.dumps(report, indent=2, default=_jsonable))
    if not ok:
        raise InvariantError("a property check failed")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "validate": cmd_validate, "simulate": cmd_simulate, "toy": cmd_toy, "check": cmd_check}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ratiocate", description="Ratio-scale CATE estimation and validation.")
    p.add_argument("--version", action="version", version=f"ratiocate {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("fit", "fit CATE scores on a training file"),
        ("validate", "validation curve of a score on a held-out file"),
        ("simulate", "run a Monte-Carlo study"),
        ("toy", "confounded toy example"),
        ("check", "run the exact property checks"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON file with option values; flags override it")
        s.add_argument("--input")
        s.add_argument("--schema", help="JSON file mapping roles (y, r, z, f, time, status) to columns")
        s.add_argument("--method", help="comma list of contrast, tworeg, naive, boost")
        s.add_argument("--learner", choices=["glm", "boost"])
        s.add_argument("--folds", type=int)
        s.add_argument("--partition-replicates", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--survival", action="store_const", const=True)
        s.add_argument("--tau", type=float)
        s.add_argument("--symmetric", dest="symmetric", action="store_const", const=True)
        s.add_argument("--no-symmetric", dest="symmetric", action="store_const", const=False)
        s.add_argument("--q-grid")
        s.add_argument("--jobs", type=int)
        s.add_argument("--out")
        s.add_argument("--scores", help="score CSV written by fit")
        s.add_argument("--score-column")
        s.add_argument("--oracle", help="simulation setting whose true means give an oracle column")
        s.add_argument("--setting")
        s.add_argument("--replicates", type=int)
        s.add_argument("--n", type=int)
        s.add_argument("--adjusted", action="store_const", const=True)
        s.add_argument("--randomized", action="store_const", const=True)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config file: {exc}") from None
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    for k in ("input", "scores", "schema"):
        if isinstance(cfg[k], str) and not os.path.exists(cfg[k]):
            raise InputError(f"{k} path {cfg[k]!r} does not exist")
    return cfg


def _fail(code: int, exc: BaseException) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    report = getattr(exc, "report", None)
    if report:
        doc["report"] = report
    print(json.dumps(doc, default=_jsonable), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (InputError, DataError, SubgroupError, KeyError) as exc:
        return _fail(EXIT_INPUT, exc)
    except (ConvergenceError, SingularDerivativeError, NonPositiveMeanError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except ValueError as exc:
        return _fail(EXIT_INPUT, exc)
    except Exception as exc:  # anything else is a bug or a violated invariant
        return _fail(EXIT_INTERNAL, exc)


if __name__ == "__main__":
    sys.exit(main())
