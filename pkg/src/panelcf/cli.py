"""Command-line interface.

Subcommands: ``fit``, ``test``, ``placebo``, ``did``, ``simulate``. Settings
come from defaults, then an optional TOML file (``--config``), then flags.
Every report carries the config hash, seed, package version and dataset
dimensions, and contains no timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import estimators as est
from .baselines import fit_did_continuous
from .inference import SCHEMES
from .io import Dataset, ingest, write_dataset, write_json
from .panel import PanelError, PanelMatrix, PreprocessConfig, TreatmentPlan, build_mask
from .pipeline import counterfactual_frame, effects_frame, run_pipeline, tests_report
from .placebo import PlaceboConfig, SyntheticSpec, backdating_test, generate_synthetic_panel, plant_effect, run_placebo_suite

COMMANDS = ("fit", "test", "placebo", "did", "simulate")
logger = logging.getLogger("panelcf")


@dataclass
class RunConfig:
    # data
    outcomes: Optional[str] = None
    covariates: Optional[str] = None
    treatment: Optional[str] = None
    intensity: Optional[str] = None
    log_transform: bool = False
    split_time: Optional[int] = None
    out: str = "out"
    # estimation and inference
    estimator: str = "MC-NNM"
    q: tuple = (1.0, 2.0)
    scheme: tuple = SCHEMES
    n_perms: int = 1000
    bootstrap: int = 1000
    level: float = 0.95
    event_time: bool = False
    refit: bool = False
    seed: int = 0
    threads: int = 1
    # placebo
    tau: tuple = (1, 10, 25)
    t0_ratios: tuple = (0.25, 0.5, 0.75)
    n_trials: int = 20
    treated_fraction: float = 0.5
    adoption: str = "staggered"
    estimators: tuple = tuple(est.ESTIMATORS)
    # continuous DID
    ci_method: str = "percentile"
    # simulate
    n_units: int = 30
    n_periods: int = 60
    rank: int = 3
    noise_sd: float = 0.1
    effect: float = 0.0
    unit_time_effects: bool = False
    n_treated: int = 5
    t0: Optional[int] = None
    phi: float = 0.0

    def validate(self) -> None:
        unknown = [s for s in self.scheme if s not in SCHEMES]
        if unknown:
            raise ValueError(f"unknown scheme {unknown[0]!r}; choose from {list(SCHEMES)}")
        for name in (self.estimator, *self.estimators):
            est.get(name)
        if self.n_perms < 1:
            raise ValueError("n_perms must be >= 1")
        if self.bootstrap and self.bootstrap < 100:
            raise ValueError("bootstrap must be 0 (off) or >= 100")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def hashed(self) -> dict:
        # output location and worker count do not change results
        d = dataclasses.asdict(self)
        d.pop("out")
        d.pop("threads")
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(_jsonable(self.hashed()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


TUPLE_FIELDS = {f.name for f in fields(RunConfig) if f.type == "tuple"}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def load_config(path: Optional[str]) -> dict:
    """Read a TOML file; keys must be :class:`RunConfig` field names."""
    if path is None:
        return {}
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    names = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown config key {unknown[0]!r} in {path}")
    return data


def _coerce(values: dict) -> dict:
    out = {}
    for k, v in values.items():
        if k in TUPLE_FIELDS:
            v = tuple(v) if isinstance(v, (list, tuple)) else (v,)
        out[k] = v
    if "q" in out:
        out["q"] = tuple(float(x) for x in out["q"])
    if "tau" in out:
        out["tau"] = tuple(int(x) for x in out["tau"])
    if "t0_ratios" in out:
        out["t0_ratios"] = tuple(float(x) for x in out["t0_ratios"])
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panelcf", description="Counterfactual prediction and inference for panel data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p, treatment=True, intensity=False):
        p.add_argument("outcomes", nargs="?", help="outcomes CSV (unit,time,value)")
        p.add_argument("--covariates", help="covariates CSV (unit,name,value)")
        if treatment:
            p.add_argument("--treatment", help="treatment CSV (unit,t0)")
        if intensity:
            p.add_argument("--intensity", help="intensity CSV (unit,time,intensity)")
        p.add_argument("--log-transform", action="store_const", const=True, dest="log_transform")
        p.add_argument("--split-time", type=int, dest="split_time")

    def common(p):
        p.add_argument("--config", help="TOML file with RunConfig keys")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    def inference_args(p):
        p.add_argument("--estimator", choices=sorted(est.ESTIMATORS))
        p.add_argument("--q", type=float, action="append", help="repeatable; default 1 and 2")
        p.add_argument("--scheme", choices=SCHEMES, action="append", help="repeatable; default all")
        p.add_argument("--n-perms", type=int, dest="n_perms")
        p.add_argument("--refit", action="store_const", const=True,
                       help="impose the null and fit MC-NNM on all cells before testing")
        p.add_argument("--event-time", action="store_const", const=True, dest="event_time")

    p = sub.add_parser("fit", help="counterfactual predictions and effect series")
    data_args(p)
    common(p)
    p.add_argument("--estimator", choices=sorted(est.ESTIMATORS))
    p.add_argument("--bootstrap", type=int, help="block-bootstrap replicates (0 disables)")
    p.add_argument("--event-time", action="store_const", const=True, dest="event_time")
    p.add_argument("--refit", action="store_const", const=True)

    p = sub.add_parser("test", help="randomization tests of the sharp null")
    data_args(p)
    common(p)
    inference_args(p)
    p.add_argument("--bootstrap", type=int)

    p = sub.add_parser("placebo", help="backdating tests and control-only RMSE suite")
    data_args(p)
    common(p)
    inference_args(p)
    p.add_argument("--tau", type=int, action="append", help="repeatable; default 1, 10, 25")
    p.add_argument("--n-trials", type=int, dest="n_trials")
    p.add_argument("--ratio", type=float, action="append", dest="t0_ratios")
    p.add_argument("--estimators", nargs="+", choices=sorted(est.ESTIMATORS))

    p = sub.add_parser("did", help="continuous-intensity difference-in-differences")
    data_args(p, intensity=True)
    common(p)
    p.add_argument("--bootstrap", type=int)
    p.add_argument("--ci-method", choices=("percentile", "normal"), dest="ci_method")

    p = sub.add_parser("simulate", help="emit a synthetic dataset")
    common(p)
    p.add_argument("--n-units", type=int, dest="n_units")
    p.add_argument("--n-periods", type=int, dest="n_periods")
    p.add_argument("--rank", type=int)
    p.add_argument("--noise-sd", type=float, dest="noise_sd")
    p.add_argument("--effect", type=float)
    p.add_argument("--n-treated", type=int, dest="n_treated")
    p.add_argument("--t0", type=int)
    p.add_argument("--phi", type=float)
    p.add_argument("--unit-time-effects", action="store_const", const=True, dest="unit_time_effects")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = _coerce(load_config(getattr(args, "config", None)))
    names = {f.name for f in fields(RunConfig)}
    flags = {k: v for k, v in vars(args).items() if k in names and v is not None}
    values.update(_coerce(flags))
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _header(cfg: RunConfig, command: str, dims: dict) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "dimensions": dims,
        "config": _jsonable(cfg.hashed()),
    }


def _csv(df: pd.DataFrame, path: Path, header: dict) -> None:
    with open(path, "w") as fh:
        fh.write(f"# panelcf {header['version']} config_hash={header['config_hash']} seed={header['seed']}\n")
        df.to_csv(fh, index=False, float_format="%.12g", lineterminator="\n")


def _load(cfg: RunConfig, need_plan: bool = True, intensity: bool = False) -> Dataset:
    if cfg.outcomes is None:
        raise ValueError("an outcomes CSV is required")
    pre = PreprocessConfig(split_time=cfg.split_time, log_transform=cfg.log_transform)
    data = ingest(cfg.outcomes, cfg.covariates, cfg.treatment, cfg.intensity if intensity else None, pre)
    if need_plan and data.plan is None:
        raise ValueError("a treatment CSV is required for this command")
    return data


def _dims(data: Dataset) -> dict:
    n, t = data.panel.shape
    return {"n_units": n, "n_periods": t, "n_treated": data.plan.treated_count if data.plan else 0}


def cmd_fit(cfg: RunConfig, out: Path) -> dict:
    data = _load(cfg)
    res = run_pipeline(data.panel, data.plan, data.covariates, cfg.estimator, (), (), 1, cfg.bootstrap or None,
                       cfg.seed, cfg.threads, cfg.refit, cfg.event_time, cfg.level)
    header = _header(cfg, "fit", _dims(data))
    _csv(counterfactual_frame(data.panel, res.Y_hat, res.mask), out / "counterfactuals.csv", header)
    _csv(effects_frame(res.effects, res.band), out / "effects.csv", header)
    report = dict(header, validation=_jsonable(data.report.to_dict()),
                  block_length=res.band.block_length if res.band else None)
    write_json(report, out / "fit.json")
    return report


def cmd_test(cfg: RunConfig, out: Path) -> dict:
    data = _load(cfg)
    res = run_pipeline(data.panel, data.plan, data.covariates, cfg.estimator, cfg.q, cfg.scheme, cfg.n_perms,
                       cfg.bootstrap or None, cfg.seed, cfg.threads, cfg.refit, cfg.event_time, cfg.level)
    header = _header(cfg, "test", _dims(data))
    _csv(effects_frame(res.effects, res.band), out / "effects.csv", header)
    report = dict(header, validation=_jsonable(data.report.to_dict()), post_length=res.effects.post_length,
                  tests=_jsonable(tests_report(res.tests)))
    write_json(report, out / "test.json")
    return report


def cmd_placebo(cfg: RunConfig, out: Path) -> dict:
    data = _load(cfg, need_plan=False)
    header = _header(cfg, "placebo", _dims(data))
    report = dict(header, validation=_jsonable(data.report.to_dict()))
    panel = data.panel
    covs = data.covariates
    if data.plan is not None:
        table = backdating_test(panel, data.plan, covs, cfg.tau, cfg.q, cfg.scheme, cfg.seed, cfg.estimator,
                                cfg.n_perms, cfg.refit)
        _csv(table, out / "backdating.csv", header)
        report["backdating"] = "backdating.csv"
        rows = data.plan.control_rows()
        panel = panel.select_units([panel.unit_ids[i] for i in rows])
        covs = covs.select_units(rows) if covs is not None else None
    pcfg = PlaceboConfig(cfg.treated_fraction, cfg.t0_ratios, cfg.n_trials, cfg.adoption, cfg.estimators, cfg.seed)
    suite = run_placebo_suite(panel, pcfg, covs, threads=cfg.threads)
    _csv(suite.trials, out / "placebo_trials.csv", header)
    _csv(suite.summary, out / "placebo_summary.csv", header)
    report["suite"] = {"trials": "placebo_trials.csv", "summary": "placebo_summary.csv",
                       "n_control_units": panel.shape[0]}
    write_json(report, out / "placebo.json")
    return report


def cmd_did(cfg: RunConfig, out: Path) -> dict:
    data = _load(cfg, intensity=True)
    if data.intensity is None:
        raise ValueError("an intensity CSV is required for did")
    mask = build_mask(data.plan, *data.panel.shape, data.panel.time_ids)
    fit = fit_did_continuous(data.panel, mask, data.intensity, data.covariates, cfg.bootstrap, cfg.seed,
                             cfg.level, cfg.ci_method)
    report = dict(_header(cfg, "did", _dims(data)), validation=_jsonable(data.report.to_dict()),
                  result=_jsonable(fit.to_report()))
    write_json(report, out / "did.json")
    return report


def simulate_dataset(cfg: RunConfig) -> tuple[PanelMatrix, TreatmentPlan, np.ndarray]:
    """Synthetic panel with ``n_treated`` units adopting after ``t0``.

    The binary ``effect`` is added to treated post cells; ``phi`` times a
    positive unit intensity is added on top, and that intensity is emitted.
    """
    spec = SyntheticSpec(cfg.n_units, cfg.n_periods, cfg.rank, cfg.noise_sd, cfg.effect, cfg.unit_time_effects,
                         cfg.seed)
    panel, _ = generate_synthetic_panel(spec)
    if not 1 <= cfg.n_treated < cfg.n_units:
        raise ValueError("n_treated must lie in [1, n_units)")
    t0 = cfg.t0 if cfg.t0 is not None else cfg.n_periods // 2
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    treated = sorted(rng.choice(cfg.n_units, cfg.n_treated, replace=False))
    plan = TreatmentPlan({panel.unit_ids[i]: t0 for i in treated}, panel.unit_ids)
    mask = build_mask(plan, *panel.shape, panel.time_ids)
    panel = plant_effect(panel, mask, cfg.effect)
    strength = np.zeros(cfg.n_units)
    strength[treated] = rng.lognormal(0.0, 0.5, len(treated))
    intensity = strength[:, None] * mask.entries
    panel = panel.with_values(panel.values + cfg.phi * intensity)
    return panel, plan, intensity


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    panel, plan, intensity = simulate_dataset(cfg)
    paths = write_dataset(out, panel, plan, intensity=intensity)
    n, t = panel.shape
    report = dict(_header(cfg, "simulate", {"n_units": n, "n_periods": t, "n_treated": plan.treated_count}),
                  files={k: Path(v).name for k, v in sorted(paths.items())})
    write_json(report, out / "simulate.json")
    return report


HANDLERS = {"fit": cmd_fit, "test": cmd_test, "placebo": cmd_placebo, "did": cmd_did, "simulate": cmd_simulate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out)
    except (PanelError, ValueError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
