"""Command-line interface: ``cimeta {estimate,bootstrap,simulate,oracle,diagnose}``.

Options come from an optional YAML config file (``--config``) and from the
command line, which wins.  Every run prints a text summary; with ``--output
DIR`` it also writes ``report.json`` (versioned by ``schema_version``),
``summary.txt`` and CSV tables, each atomically.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

import argparse
import csv
import io
import json
import os
import sys

import jsonschema
import numpy as np
import yaml

from .errors import CimetaError, ConfigError
from .estimators import (DR, DR_NORMALIZED, DR_SAMPLE_SPLIT, G_FORMULA, NAIVE_POOLED,
                         WEIGHTING, WEIGHTING_NORMALIZED)
from .glm import BINOMIAL, GAUSSIAN, ModelSpec
from .inference import MODES, INTERVALS, BootstrapPlan, bootstrap
from .ingest import atomic_write, read_csv
from .nuisance import NuisanceSpec, exchangeability_diagnostic
from .oracle import DiscretePopulation, exact_psi_outcome, exact_psi_weighting
from .pipeline import EstimatorConfig, Statistic
from .simulation import ALLOCATIONS, SCENARIOS, SimScenario, run_study, true_psi
from .weights import SCHEMES, WeightScheme

SCHEMA_VERSION = 1

ESTIMATORS = ("g-formula", "weighting", "dr", "naive-pooled")
ALIASES = {"gf": "g-formula", "w": "weighting", "naive": "naive-pooled"}

_model = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "degree": {"enum": [1, 2]},
        "terms": {"type": "object", "additionalProperties": {"enum": [0, 1, 2]}},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "input": {"type": "string"},
        "covariates": {
            "type": "array",
            "items": {"oneOf": [
                {"type": "string"},
                {"type": "object", "additionalProperties": False, "required": ["name"],
                 "properties": {"name": {"type": "string"},
                                "type": {"enum": ["continuous", "indicator"]}}},
            ]},
        },
        "outcome_type": {"enum": ["continuous", "binary"]},
        "models": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"outcome": _model, "participation": _model, "treatment": _model,
                           "saturated": {"type": "boolean"}},
        },
        "estimator": {"enum": list(ESTIMATORS) + list(ALIASES)},
        "normalized": {"type": "boolean"},
        "sample_split": {"type": "boolean"},
        "complete_case": {"type": "boolean"},
        "survey_mode": {"type": "boolean"},
        "weights": {"oneOf": [{"enum": [s for s in SCHEMES if s != "fixed"]},
                              {"type": "array", "items": {"type": "number", "minimum": 0}}]},
        "project_simplex": {"type": "boolean"},
        "treatment": {"type": ["string", "integer"]},
        "contrast": {"type": ["string", "integer"]},
        "bootstrap": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"replicates": {"type": "integer", "minimum": 2},
                           "mode": {"enum": list(MODES)},
                           "interval": {"enum": list(INTERVALS)},
                           "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"scenario": {"enum": list(SCENARIOS)},
                           "n_total": {"type": "integer", "minimum": 10},
                           "reps": {"type": "integer", "minimum": 2},
                           "allocation": {"enum": list(ALLOCATIONS)},
                           "truth_mc_n": {"type": "integer", "minimum": 1000}},
        },
        "population": {"type": "string"},
        "output": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "jobs": {"type": "integer", "minimum": 1},
    },
}


# configuration ---------------------------------------------------------


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            config = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", module="cli") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}", module="cli") from None
    return config


def validate_config(config):
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "(top level)"
        raise ConfigError(f"invalid config at {where}: {exc.message}", module="cli",
                          hint="see the README for the configuration schema") from None
    return config


FLAG_KEYS = {
    "input": "input", "covariates": "covariates", "outcome_type": "outcome_type",
    "estimator": "estimator", "weights": "weights", "treatment": "treatment",
    "contrast": "contrast", "output": "output", "seed": "seed", "jobs": "jobs",
    "population": "population", "normalized": "normalized", "sample_split": "sample_split",
    "complete_case": "complete_case", "survey_mode": "survey_mode",
    "project_simplex": "project_simplex", "saturated": ("models", "saturated"),
    "outcome_degree": ("models", "outcome", "degree"),
    "participation_degree": ("models", "participation", "degree"),
    "treatment_degree": ("models", "treatment", "degree"),
    "B": ("bootstrap", "replicates"), "mode": ("bootstrap", "mode"),
    "interval": ("bootstrap", "interval"), "level": ("bootstrap", "level"),
    "scenario": ("simulation", "scenario"), "n_total": ("simulation", "n_total"),
    "reps": ("simulation", "reps"), "allocation": ("simulation", "allocation"),
    "truth_mc_n": ("simulation", "truth_mc_n"),
}


def merge_flags(config, args):
    """Overlay command-line values (those actually given) onto the config."""
    merged = json.loads(json.dumps(config))
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if attr == "weights":
            value = _parse_weights(value)
        if attr == "covariates":
            value = [v for v in value.split(",") if v]
        path = key if isinstance(key, tuple) else (key,)
        node = merged
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return validate_config(merged)


def _parse_weights(text):
    if text in SCHEMES:
        return text
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--weights must be a scheme name or comma-separated numbers, got {text!r}",
                          module="cli") from None


def _covariates(config):
    names, indicators = [], set()
    for item in config.get("covariates", []):
        if isinstance(item, str):
            names.append(item)
        else:
            names.append(item["name"])
            if item.get("type") == "indicator":
                indicators.add(item["name"])
    return names or None, indicators


def _model_spec(section, names, family, default_degree, indicators):
    degree = section.get("degree", default_degree)
    terms = []
    overrides = section.get("terms", {})
    for name in overrides:
        if name not in names:
            raise ConfigError(f"model term references unknown covariate {name!r}", module="cli")
    for j, name in enumerate(names):
        d = overrides.get(name, degree)
        if name in indicators:
            d = min(d, 1)
        if d >= 1:
            terms.append((j, 1))
    for j, name in enumerate(names):
        d = overrides.get(name, degree)
        if d == 2 and name not in indicators:
            terms.append((j, 2))
    return ModelSpec(tuple(terms), family)


def nuisance_spec(config, dataset):
    names = list(dataset.covariate_names)
    _, indicators = _covariates(config)
    family = BINOMIAL if config.get("outcome_type") == "binary" else GAUSSIAN
    models = config.get("models", {})
    survey = bool(config.get("survey_mode", False))
    if models.get("saturated"):
        return NuisanceSpec.saturated(range(len(names)), family, survey)
    return NuisanceSpec(
        _model_spec(models.get("outcome", {}), names, family, 2, indicators),
        _model_spec(models.get("participation", {}), names, BINOMIAL, 2, indicators),
        _model_spec(models.get("treatment", {}), names, BINOMIAL, 1, indicators),
        survey,
    )


def estimator_kind(config):
    kind = ALIASES.get(config.get("estimator", "dr"), config.get("estimator", "dr"))
    normalized = config.get("normalized", False)
    if config.get("sample_split"):
        if kind != "dr" or normalized:
            raise ConfigError("sample splitting applies to the unnormalized DR estimator only",
                              module="cli")
        return DR_SAMPLE_SPLIT
    if kind == "g-formula":
        return G_FORMULA
    if kind == "weighting":
        return WEIGHTING_NORMALIZED if normalized else WEIGHTING
    if kind == "dr":
        return DR_NORMALIZED if normalized else DR
    return NAIVE_POOLED


def estimator_config(config, dataset):
    weights = config.get("weights", "sample-size")
    scheme = WeightScheme.parse(weights, bool(config.get("project_simplex", False)))
    family = BINOMIAL if config.get("outcome_type") == "binary" else GAUSSIAN
    return EstimatorConfig(
        estimator_kind(config), nuisance_spec(config, dataset), scheme,
        complete_case=bool(config.get("complete_case", False)),
        survey_mode=bool(config.get("survey_mode", False)),
        outcome_family=family, seed=int(config.get("seed", 0)),
    )


def _level(dataset, value, what):
    for level in dataset.treatment_levels:
        if str(level) == str(value):
            return level
    raise ConfigError(f"{what} {value!r} is not a treatment level {list(dataset.treatment_levels)}",
                      module="cli")


def _arms(config, dataset):
    if "treatment" not in config:
        raise ConfigError("specify the treatment of interest (--treatment)", module="cli")
    a = _level(dataset, config["treatment"], "treatment")
    b = _level(dataset, config["contrast"], "contrast") if "contrast" in config else None
    return a, b


def _load_dataset(config):
    if "input" not in config:
        raise ConfigError("an input CSV is required (--input)", module="cli")
    names, _ = _covariates(config)
    return read_csv(config["input"], names, config.get("outcome_type", "continuous"))


def _jobs(config):
    return int(config.get("jobs", os.cpu_count() or 1))


# reports ---------------------------------------------------------------


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def _json(report):
    return json.dumps(_plain({"schema_version": SCHEMA_VERSION, **report}), indent=2,
                      sort_keys=True) + "\n"


def _csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _emit(config, summary, report, tables=()):
    sys.stdout.write(summary)
    out = config.get("output")
    if out:
        for name, text in tables:
            atomic_write(os.path.join(out, name), text)
        atomic_write(os.path.join(out, "summary.txt"), summary)
        atomic_write(os.path.join(out, "report.json"), _json(report))


def _pattern_rows(dataset, result):
    components = result.components or (result,)
    rows = []
    for comp in components:
        if not comp.per_pattern:
            continue
        for p, w in zip(comp.per_pattern, comp.pattern_weights):
            rows.append([comp.estimand[1], p.pattern_id, p.n_k_star, p.gamma_hat, p.psi_k_hat, float(w)])
    return rows


def _summary_estimate(result, dataset):
    lines = [f"estimator: {result.estimator_kind}", f"estimand: {' '.join(map(str, result.estimand))}",
             f"psi_hat: {result.value:.6g}"]
    for comp in result.components or (result,):
        if comp.per_pattern:
            lines.append(f"patterns for a={comp.estimand[1]}:")
            for p, w in zip(comp.per_pattern, comp.pattern_weights):
                lines.append(f"  k={p.pattern_id}  n_k*={p.n_k_star}  psi_k_hat={p.psi_k_hat:.6g}  w={w:.4f}")
    return "\n".join(lines) + "\n"


def _dataset_info(dataset):
    return {
        "n": dataset.n, "n_target": dataset.n_target,
        "patterns": [{"k": p.pattern_id, "trials": list(p.trial_ids),
                      "observed_covariates": [dataset.covariate_names[j] for j in p.observed_covariates],
                      "n_k_star": p.n_k_star} for p in dataset.patterns],
    }


# commands --------------------------------------------------------------


def cmd_estimate(config):
    dataset = _load_dataset(config)
    a, b = _arms(config, dataset)
    stat = Statistic(estimator_config(config, dataset), a, b)
    result = stat.result(dataset)
    report = {"command": "estimate", "data": _dataset_info(dataset), "estimate": result.to_dict()}
    table = _csv(["a", "k", "n_k_star", "gamma_hat", "psi_k_hat", "w"], _pattern_rows(dataset, result))
    _emit(config, _summary_estimate(result, dataset), report, [("patterns.csv", table)])


def cmd_bootstrap(config):
    dataset = _load_dataset(config)
    a, b = _arms(config, dataset)
    section = config.get("bootstrap", {})
    plan = BootstrapPlan(section.get("replicates", 1000), int(config.get("seed", 0)),
                         section.get("mode", "stratified-by-source"),
                         section.get("interval", "percentile"), section.get("level", 0.95))
    plan.check(dataset)
    stat = Statistic(estimator_config(config, dataset), a, b)
    result = stat.result(dataset)
    interval = bootstrap(dataset, stat, plan, _jobs(config), point=result.value)
    report = {"command": "bootstrap", "data": _dataset_info(dataset), "estimate": result.to_dict(),
              "bootstrap": {**interval.to_dict(), "mode": plan.mode, "seed": plan.seed}}
    summary = _summary_estimate(result, dataset) + (
        f"bootstrap ({plan.mode}, B={interval.B}, effective {interval.B_effective}): se={interval.se:.6g}\n"
        f"{interval.level:.0%} {interval.interval} interval: [{interval.lower:.6g}, {interval.upper:.6g}]\n")
    reps = _csv(["replicate", "estimate"], [[i, float(v)] for i, v in enumerate(interval.replicates)])
    _emit(config, summary, report, [("replicates.csv", reps)])


def cmd_simulate(config):
    section = config.get("simulation", {})
    scenario = SimScenario(section.get("scenario", "K2"), section.get("n_total", 2000),
                           int(config.get("seed", 0)), section.get("allocation", "fixed"))
    reps = section.get("reps", 1000)
    truth = None
    if "truth_mc_n" in section:
        truth = (true_psi(0, section["truth_mc_n"]), true_psi(1, section["truth_mc_n"]))
    study = run_study(scenario, reps, jobs=_jobs(config), truth=truth)
    lines = [f"scenario {scenario.missingness}, n={scenario.n_total}, reps={reps}, "
             f"allocation={scenario.allocation}, seed={scenario.seed}",
             f"true psi: a=0 {study.truth[0]:.5f}, a=1 {study.truth[1]:.5f}",
             "estimator      outcome  partic.  complete  a   bias*sqrt(n)  sd*sqrt(n)  reps"]
    for r in study.rows:
        lines.append(f"{r.estimator:14s} {'x' if r.correct_outcome else ' ':^7s}  "
                     f"{'x' if r.quadratic_participation else ' ':^7s}  {'x' if r.complete_case else ' ':^8s}  "
                     f"{r.a}  {r.bias_sqrt_n:12.3f}  {r.sd_sqrt_n:10.3f}  {r.reps}")
    report = {"command": "simulate", **study.to_dict()}
    _emit(config, "\n".join(lines) + "\n", report, [("table.csv", study.to_csv())])


def cmd_oracle(config):
    if "population" not in config:
        raise ConfigError("a population file is required (--population)", module="cli")
    pop = DiscretePopulation.load(config["population"])
    levels = pop.treatment_levels
    if "treatment" in config:
        matches = [lv for lv in levels if str(lv) == str(config["treatment"])]
        if not matches:
            raise ConfigError(f"treatment {config['treatment']!r} not in {list(levels)}", module="cli")
        levels = tuple(matches)
    rows, lines = [], []
    for a in levels:
        for pattern in pop.patterns:
            k = pattern.pattern_id
            out, wt = exact_psi_outcome(pop, k, a), exact_psi_weighting(pop, k, a)
            rows.append({"a": a, "k": k, "trials": list(pattern.trial_ids),
                         "psi_outcome": out, "psi_weighting": wt, "difference": out - wt})
            lines.append(f"a={a} k={k} trials={list(pattern.trial_ids)}  outcome route {out:.12g}  "
                         f"weighting route {wt:.12g}  |diff| {abs(out - wt):.2e}")
    report = {"command": "oracle", "patterns": rows}
    table = _csv(["a", "k", "psi_outcome", "psi_weighting"],
                 [[r["a"], r["k"], r["psi_outcome"], r["psi_weighting"]] for r in rows])
    _emit(config, "\n".join(lines) + "\n", report, [("oracle.csv", table)])


def cmd_diagnose(config):
    dataset = _load_dataset(config)
    a, _ = _arms(config, dataset)
    spec = nuisance_spec(config, dataset)
    results, lines = [], []
    for pattern in dataset.patterns:
        rep = exchangeability_diagnostic(dataset, pattern.pattern_id, a, spec.outcome_spec)
        entry = {"k": rep.k, "applicable": rep.applicable, "reason": rep.reason,
                 "grid_size": rep.grid_size, "coefficients": rep.coefficients,
                 "discrepancies": [{"trials": list(pair), "max_abs_difference": v}
                                   for pair, v in rep.discrepancies.items()]}
        results.append(entry)
        if rep.applicable:
            lines.append(f"pattern {rep.k}: max prediction difference across trials "
                         f"{rep.max_discrepancy:.4g} over {rep.grid_size} target points")
        else:
            lines.append(f"pattern {rep.k}: {rep.reason}")
    report = {"command": "diagnose", "treatment": a, "patterns": results}
    _emit(config, "\n".join(lines) + "\n", report)


COMMANDS = {"estimate": cmd_estimate, "bootstrap": cmd_bootstrap, "simulate": cmd_simulate,
            "oracle": cmd_oracle, "diagnose": cmd_diagnose}


def _flag(parser, *names, **kw):
    parser.add_argument(*names, default=None, **kw)


def _bool_flag(parser, name, dest):
    parser.add_argument(name, dest=dest, action="store_const", const=True, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="cimeta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _flag(common, "--config", help="YAML configuration file")
    _flag(common, "--output", help="directory for report files")
    _flag(common, "--seed", type=int)
    _flag(common, "--jobs", type=int, help="worker processes (default: available cores)")
    data = argparse.ArgumentParser(add_help=False)
    _flag(data, "--input", help="composite-data CSV")
    _flag(data, "--covariates", help="comma-separated covariate columns")
    _flag(data, "--outcome-type", dest="outcome_type", choices=["continuous", "binary"])
    _flag(data, "--treatment", help="treatment level of interest")
    _flag(data, "--outcome-degree", dest="outcome_degree", type=int, choices=[1, 2])
    _flag(data, "--participation-degree", dest="participation_degree", type=int, choices=[1, 2])
    _flag(data, "--treatment-degree", dest="treatment_degree", type=int, choices=[1, 2])
    _bool_flag(data, "--saturated", "saturated")
    est = argparse.ArgumentParser(add_help=False)
    _flag(est, "--estimator", choices=list(ESTIMATORS) + list(ALIASES))
    _flag(est, "--weights", help="sample-size | inverse-variance | optimal | w1,w2,...")
    _flag(est, "--contrast", help="comparison level a' for psi(a) - psi(a')")
    _bool_flag(est, "--normalized", "normalized")
    _bool_flag(est, "--sample-split", "sample_split")
    _bool_flag(est, "--complete-case", "complete_case")
    _bool_flag(est, "--survey-mode", "survey_mode")
    _bool_flag(est, "--project-simplex", "project_simplex")

    sub.add_parser("estimate", parents=[common, data, est], help="point estimate")
    boot = sub.add_parser("bootstrap", parents=[common, data, est], help="bootstrap interval")
    _flag(boot, "--B", dest="B", type=int, help="replicates (default 1000)")
    _flag(boot, "--mode", choices=list(MODES))
    _flag(boot, "--interval", choices=list(INTERVALS))
    _flag(boot, "--level", type=float)
    sim = sub.add_parser("simulate", parents=[common], help="simulation study")
    _flag(sim, "--scenario", choices=list(SCENARIOS))
    _flag(sim, "--reps", type=int)
    _flag(sim, "--n", dest="n_total", type=int)
    _flag(sim, "--allocation", choices=list(ALLOCATIONS))
    _flag(sim, "--truth-mc-n", dest="truth_mc_n", type=int)
    orc = sub.add_parser("oracle", parents=[common], help="exact functionals on a population file")
    _flag(orc, "--population", help="population definition (JSON or YAML)")
    _flag(orc, "--treatment")
    sub.add_parser("diagnose", parents=[common, data], help="exchangeability diagnostic")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = merge_flags(validate_config(load_config(args.config)), args)
        COMMANDS[args.command](config)
    except CimetaError as exc:
        sys.stderr.write(exc.describe() + "\n")
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
