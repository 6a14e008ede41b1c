"""Batch command-line front end: simulate, fit, gate, identify, sensitivity, demo-nonid.

Every command resolves its configuration as built-in defaults, then an
optional ``--config`` JSON file, then explicit flags, and records the
resolved configuration (including the seed) in each JSON it writes.
Floats are written with 12 significant digits so reruns are byte-identical.

Exit codes: 0 success or gate PASS, 1 input error, 2 gate FAIL,
3 identification refused.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .errors import MulticauseError, OverlapViolation, ZhatMismatch
from .factor import LatentClassModel, bic_table, em_fit, zhat_many
from .gate import run_gate
from .identify import FocalPartition, adjust, estimand_to_dict, overlap_check, thm7_estimand, thm8_estimand
from .scm import (
    ScmSpec,
    default_template,
    full_joint,
    ground_truth_po,
    make_confounded_pair,
    observed_joint,
    sample,
)
from .sensitivity import sensitivity_report
from .tables import Dataset, VarSpec, conditional_array, marginalize, total_variation

EXIT_OK, EXIT_INPUT, EXIT_FAIL, EXIT_REFUSED = 0, 1, 2, 3

DEFAULTS = {
    "simulate": {"scm": "default", "n": 2000, "interventions": None},
    "fit": {"data": "data.csv", "classes": 2, "class_range": None, "restarts": 5, "max_iter": 2000,
            "tol": 1e-8, "covariate": None},
    "gate": {"data": "data.csv", "model": None, "zhat": None, "alpha": 0.05, "n_permutations": 199,
             "power_trials": 20, "bonferroni": False},
    "identify": {"estimand": "thm7", "scm": None, "data": None, "latent": None, "model": None,
                 "focal": None, "a": None, "a_prime": None},
    "sensitivity": {"scm": None, "data": None, "latent": None, "model": None, "a": None,
                    "budgets": [0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0]},
    "demo-nonid": {"scm": "default", "a_star": None},
}
COMMON = {"seed": 0, "out_dir": ".", "format": "json", "outcome": "Y", "covariate_name": "X"}


class InputError(Exception):
    pass


# ---------------------------------------------------------------- output


def _clean(obj):
    """Plain JSON types with floats fixed to 12 significant digits."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        v = float(f"{v:.12g}")
        return 0.0 if v == 0 else v
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _envelope(command, config, result):
    return {"command": command, "version": __version__, "config": config, "seed": config["seed"], "result": result}


# ---------------------------------------------------------------- inputs


def _ints(v, what):
    if v is None:
        return None
    if isinstance(v, str):
        v = [s for s in v.split(",") if s.strip()]
    try:
        return [int(x) for x in v]
    except (TypeError, ValueError):
        raise InputError(f"{what} must be a comma-separated list of integers") from None


def _floats(v, what):
    if isinstance(v, str):
        v = [s for s in v.split(",") if s.strip()]
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError):
        raise InputError(f"{what} must be a comma-separated list of numbers") from None


def _names(v):
    if v is None:
        return None
    return [s.strip() for s in v.split(",")] if isinstance(v, str) else list(v)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path} is not valid JSON: {e}") from None


def _load_scm(ref) -> ScmSpec:
    if ref in (None, "default"):
        return default_template()
    d = _read_json(ref)
    d = d.get("result", d)
    return ScmSpec.from_dict(d.get("scm", d))


def _load_data(path) -> Dataset:
    if path is None:
        raise InputError("a --data CSV is required")
    try:
        return Dataset.from_csv(path)
    except FileNotFoundError:
        raise InputError(f"no such file: {path}") from None


def _load_column(path) -> np.ndarray:
    ds = _load_data(path)
    if len(ds.names) != 1:
        raise InputError(f"{path} must hold exactly one column")
    return ds.values[:, 0]


def _load_model(path) -> LatentClassModel:
    d = _read_json(path)
    return LatentClassModel.from_dict(d["result"]["model"] if "result" in d else d)


def _roles(data: Dataset, cfg):
    """(cause names, covariate name or None) for a dataset."""
    skip = {cfg["outcome"], cfg["covariate_name"]}
    causes = [n for n in data.names if n not in skip]
    if len(causes) < 2:
        raise InputError("need at least two cause columns")
    cov = cfg["covariate_name"] if cfg["covariate_name"] in data.names else None
    return causes, cov


def _assignment(v, m, what):
    a = _ints(v, what)
    if a is None or len(a) != m:
        raise InputError(f"{what} must list one level per cause ({m})")
    return tuple(a)


def _model_zhat(model: LatentClassModel, data: Dataset) -> np.ndarray:
    cols = [c.name for c in model.columns]
    missing = [c for c in cols if c not in data.names]
    if missing:
        raise InputError(f"data lacks model columns {missing}")
    return zhat_many(model, data.select(cols).values)


def _causes_only(model: LatentClassModel) -> LatentClassModel:
    return LatentClassModel(model.pi, model.theta, model.causes)


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg, out: Path):
    scm = _load_scm(cfg["scm"])
    if int(cfg["n"]) < 1:
        raise InputError("n must be positive")
    s = sample(scm, int(cfg["n"]), int(cfg["seed"]))
    write_atomic(out / "data.csv", _csv_text([list(s.data.names)] + s.data.values.tolist()))
    write_atomic(out / "latent.csv", _csv_text([[scm.z.name]] + [[int(z)] for z in s.hidden_z]))
    write_atomic(out / "scm.json", dumps(_envelope("simulate", cfg, {"scm": scm.to_dict()})))
    if cfg["interventions"] is None:
        targets = list(np.ndindex(*scm.cause_cards))
    else:
        targets = [_assignment(a, scm.m, "intervention") for a in cfg["interventions"]]
    truth = {
        "observed_joint": observed_joint(scm).to_dict(),
        "potential_outcomes": [ground_truth_po(scm, a).to_dict() for a in targets],
    }
    write_atomic(out / "ground_truth.json", dumps(_envelope("simulate", cfg, truth)))
    return EXIT_OK, {"n": int(cfg["n"]), "files": ["data.csv", "latent.csv", "scm.json", "ground_truth.json"]}


def cmd_fit(cfg, out: Path):
    data = _load_data(cfg["data"])
    causes, cov = _roles(data, cfg)
    if cfg["covariate"] is not None:
        cov = cfg["covariate"] or None
    L = int(cfg["classes"])
    if L < 1:
        raise InputError("classes must be at least 1")
    kw = dict(causes=causes, covariate=cov, restarts=int(cfg["restarts"]), max_iter=int(cfg["max_iter"]),
              tol=float(cfg["tol"]), seed=int(cfg["seed"]))
    model, report = em_fit(data, L, **kw)
    class_range = _ints(cfg["class_range"], "class_range") or list(range(1, L + 2))
    bic = bic_table(data, class_range, **kw)
    write_atomic(out / "model.json", dumps(_envelope("fit", cfg, {"model": model.to_dict(),
                                                                  "fit_report": report.to_dict()})))
    write_atomic(out / "bic.json", dumps(_envelope("fit", cfg, {"bic": bic})))
    keys = ["n_classes", "loglik", "n_params", "bic", "converged"]
    write_atomic(out / "bic.csv", _csv_text([keys] + [[_clean(r[k]) for k in keys] for r in bic]))
    z = _model_zhat(model, data)
    write_atomic(out / "zhat.csv", _csv_text([["zhat"]] + [[int(v)] for v in z]))
    summary = {"n_classes": L, "final_loglik": report.final_loglik, "converged": report.converged}
    return EXIT_OK, {**summary, "bic": bic}


def cmd_gate(cfg, out: Path):
    data = _load_data(cfg["data"])
    causes, _ = _roles(data, cfg)
    if cfg["zhat"] is not None:
        z = _load_column(cfg["zhat"])
    elif cfg["model"] is not None:
        z = _model_zhat(_load_model(cfg["model"]), data)
    else:
        raise InputError("gate needs --zhat (label column) or --model")
    if len(z) != len(data):
        raise InputError("zhat must have one label per data row")
    alpha = float(cfg["alpha"])
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    report = run_gate(data.select(causes), z, alpha, int(cfg["n_permutations"]), int(cfg["seed"]),
                      bonferroni=bool(cfg["bonferroni"]), power_kwargs={"n_trials": int(cfg["power_trials"])})
    result = {"causes": causes, **report.to_dict()}
    write_atomic(out / "gate.json", dumps(_envelope("gate", cfg, result)))
    return (EXIT_OK if report.decision == "PASS" else EXIT_FAIL), result


def _observed_for_identify(cfg):
    if cfg["scm"] is not None:
        scm = _load_scm(cfg["scm"])
        causes = list(scm.cause_names)
        full = marginalize(full_joint(scm), causes + [scm.y.name, scm.z.name])
        return causes, scm.y.name, full, scm.z.name
    data = _load_data(cfg["data"])
    causes, _ = _roles(data, cfg)
    outcome = cfg["outcome"]
    if outcome not in data.names:
        raise InputError(f"data has no outcome column {outcome!r}")
    if cfg["latent"] is not None:
        z = _load_column(cfg["latent"])
        if len(z) != len(data):
            raise InputError("latent column must align with the data rows")
        zvar = VarSpec("Z", int(z.max()) + 1)
        sub = data.select(causes + [outcome])
        joined = Dataset(tuple(sub.vars) + (zvar,), np.column_stack([sub.values, z]))
        return causes, outcome, joined.empirical_joint(), "Z"
    return causes, outcome, data.empirical_joint(causes + [outcome]), None


def cmd_identify(cfg, out: Path):
    causes, outcome, table, latent = _observed_for_identify(cfg)
    observed = marginalize(table, causes + [outcome])
    kind = cfg["estimand"]
    overlap = None
    if kind == "adjust":
        if latent is None:
            raise InputError("adjust needs the confounder: pass --scm or --latent")
        a = _assignment(cfg["a"], len(causes), "a")
        dist = adjust(table, dict(zip(causes, a)), outcome, latent)
        overlap = overlap_check(table, causes, [latent])
        inputs = {"a": a}
    elif kind == "thm7":
        focal = _names(cfg["focal"])
        if not focal:
            raise InputError("thm7 needs --focal")
        unknown = [f for f in focal if f not in causes]
        if unknown:
            raise InputError(f"unknown focal causes {unknown}")
        part = FocalPartition(tuple(focal), tuple(c for c in causes if c not in focal))
        a = _assignment(cfg["a"], len(focal), "a")
        overlap = overlap_check(observed, part.focal, part.auxiliary)
        dist = thm7_estimand(observed, part, a, outcome)
        inputs = {"focal": list(part.focal), "auxiliary": list(part.auxiliary), "a_focal": a}
    elif kind == "thm8":
        if cfg["model"] is None:
            raise InputError("thm8 needs --model for zhat")
        model = _causes_only(_load_model(cfg["model"]))
        if [c.name for c in model.causes] != causes:
            raise InputError("model causes do not match the data")
        a = _assignment(cfg["a"], len(causes), "a")
        a_prime = _assignment(cfg["a_prime"], len(causes), "a_prime")
        zfn = lambda v: int(zhat_many(model, np.asarray(v)[None])[0])  # noqa: E731
        dist = thm8_estimand(observed, a, a_prime, zfn, outcome, causes)
        inputs = {"a": a, "a_prime": a_prime, "zhat_a": zfn(a)}
    else:
        raise InputError(f"unknown estimand {kind!r}")
    result = estimand_to_dict(kind, inputs, dist, overlap)
    write_atomic(out / "estimand.json", dumps(_envelope("identify", cfg, result)))
    return EXIT_OK, result


def cmd_sensitivity(cfg, out: Path):
    budgets = _floats(cfg["budgets"], "budgets")
    if any(b < 0 or math.isnan(b) for b in budgets):
        raise InputError("budgets must be non-negative")
    zsrc = _load_model(cfg["model"]) if cfg["model"] is not None else "true"
    if cfg["scm"] is not None:
        scm = _load_scm(cfg["scm"])
        a = _assignment(cfg["a"], scm.m, "a")
        report = sensitivity_report(scm, a, budgets, zhat=zsrc)
    else:
        data = _load_data(cfg["data"])
        causes, _ = _roles(data, cfg)
        a = _assignment(cfg["a"], len(causes), "a")
        hidden = _load_column(cfg["latent"]) if cfg["latent"] is not None else None
        if zsrc == "true" and hidden is None:
            raise InputError("sensitivity on data needs --latent or --model")
        report = sensitivity_report(data, a, budgets, zhat=zsrc, hidden_z=hidden, outcome=cfg["outcome"],
                                    causes=causes)
    if not report.monotone:
        raise RuntimeError("region widths are not monotone in the budget")
    result = report.to_dict()
    write_atomic(out / "sensitivity.json", dumps(_envelope("sensitivity", cfg, result)))
    write_atomic(out / "sensitivity.csv", _csv_text(report.csv_rows()))
    return EXIT_OK, result


def cmd_demo_nonid(cfg, out: Path):
    template = _load_scm(cfg["scm"])
    a_star = _assignment(cfg["a_star"], template.m, "a_star") if cfg["a_star"] is not None \
        else tuple(c - 1 for c in template.cause_cards)
    first, second, gap = make_confounded_pair(template, a_star)
    o1, o2 = observed_joint(first), observed_joint(second)
    diff = float(np.abs(o1.probs - o2.probs).max())
    naive = conditional_array(marginalize(o2, list(second.cause_names) + [second.y.name]),
                              [second.y.name], list(second.cause_names))[0][a_star]
    po1, po2 = ground_truth_po(first, a_star).dist, ground_truth_po(second, a_star).dist
    indep_err = float(np.abs(po2 - naive).max())
    result = {
        "a_star": a_star,
        "max_observed_cell_diff": diff,
        "tv_potential_outcomes": total_variation(po1, po2),
        "po_template": po1,
        "po_independence_member": po2,
        "naive_conditional": naive,
        "independence_member_error": indep_err,
        "checks": {
            "identical_observables": diff <= 1e-10,
            "tv_at_least_0.05": gap >= 0.05,
            "independence_member_is_naive": indep_err <= 1e-12,
        },
    }
    write_atomic(out / "scm_template.json", dumps(_envelope("demo-nonid", cfg, {"scm": first.to_dict()})))
    write_atomic(out / "scm_other.json", dumps(_envelope("demo-nonid", cfg, {"scm": second.to_dict()})))
    write_atomic(out / "nonid_report.json", dumps(_envelope("demo-nonid", cfg, result)))
    return EXIT_OK, result


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "gate": cmd_gate,
    "identify": cmd_identify,
    "sensitivity": cmd_sensitivity,
    "demo-nonid": cmd_demo_nonid,
}


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multicause", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def command(name, help):
        p = sub.add_parser(name, help=help, argument_default=S)
        p.add_argument("--config", help="JSON file of settings; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--format", choices=["json", "csv"], help="format of the stdout summary")
        return p

    p = command("simulate", "sample data from an SCM and write ground truth")
    p.add_argument("--scm", help="SCM JSON or 'default'")
    p.add_argument("--n", type=int)

    p = command("fit", "fit a latent-class model to the causes")
    p.add_argument("--data")
    p.add_argument("--classes", type=int)
    p.add_argument("--class-range", dest="class_range")
    p.add_argument("--restarts", type=int)
    p.add_argument("--max-iter", dest="max_iter", type=int)

    p = command("gate", "test mutual independence of the causes given zhat")
    p.add_argument("--data")
    p.add_argument("--model")
    p.add_argument("--zhat")
    p.add_argument("--alpha", type=float)
    p.add_argument("--n-permutations", dest="n_permutations", type=int)
    p.add_argument("--power-trials", dest="power_trials", type=int)
    p.add_argument("--bonferroni", action="store_true")

    p = command("identify", "evaluate an identification formula")
    p.add_argument("--estimand", choices=["thm7", "thm8", "adjust"])
    p.add_argument("--scm")
    p.add_argument("--data")
    p.add_argument("--latent")
    p.add_argument("--model")
    p.add_argument("--focal")
    p.add_argument("--a")
    p.add_argument("--a-prime", dest="a_prime")

    p = command("sensitivity", "bounds on E[Y(a)] across dependence budgets")
    p.add_argument("--scm")
    p.add_argument("--data")
    p.add_argument("--latent")
    p.add_argument("--model")
    p.add_argument("--a")
    p.add_argument("--budgets")

    p = command("demo-nonid", "two SCMs with identical observables and different effects")
    p.add_argument("--scm")
    p.add_argument("--a-star", dest="a_star")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    flags = vars(args).copy()
    command = flags.pop("command")
    cfg = {**COMMON, **DEFAULTS[command]}
    path = flags.pop("config", None)
    if path is not None:
        loaded = _read_json(path)
        if not isinstance(loaded, dict):
            raise InputError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise InputError(f"unknown config keys {sorted(unknown)}")
        cfg.update(loaded)
    cfg.update(flags)
    return cfg


def _summary(result, fmt):
    if fmt == "csv":
        flat = {k: v for k, v in _clean(result).items() if not isinstance(v, (dict, list))}
        return _csv_text([list(flat), list(flat.values())])
    return dumps(result)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    command = args.command
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out_dir"])
        code, result = COMMANDS[command](cfg, out)
    except (ZhatMismatch, OverlapViolation) as e:
        print(f"refused: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_REFUSED
    except (InputError, MulticauseError, ValueError, KeyError, TypeError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INPUT
    sys.stdout.write(_summary(result, cfg["format"]))
    return code
