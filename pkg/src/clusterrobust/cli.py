"""Command-line front end.

Every command validates its configuration, runs, and writes one JSON report
(``--out`` or stdout). Exit status is 0 on success, 1 on an estimation error
and 2 on a configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import warnings
from typing import Literal, Optional

import numpy as np
import scipy
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from . import __version__
from .core import ClusterIndex, ClusteredSample, heterogeneity_diagnostics
from .errors import ClusterRobustError, ConfigError, EstimationError, WrongConfig
from .gmm import LinearIV, WeightSpec, gmm_fit
from .inference import EstimateReport, wald_test
from .io import dumps, ingest_csv, ingest_index
from .linear import LinearDesign, fit_ols, fit_tsls
from .mc.dgp import FAMILIES, DgpSpec
from .mc.experiments import (
    EstimatorConfig,
    IvDgpConfig,
    coverage_experiment,
    jsize_experiment,
    rate_experiment,
    second_moment_clt_check,
)
from .mle import MODELS, fit_pseudo_mle, make_model

__all__ = ["main", "run", "CONFIGS", "ingest_csv"]

Family = Literal[FAMILIES]  # type: ignore[valid-type]


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FitConfig(_Config):
    data: str
    cluster: str
    y: str
    x: list[str] = []
    z: Optional[list[str]] = None
    intercept: bool = True
    dof: Literal["none", "hansen", "stata"] = "stata"


class TslsConfig(FitConfig):
    z: list[str]


class MleConfig(_Config):
    data: str
    cluster: str
    model: str
    y: Optional[str] = None
    x: list[str] = []
    intercept: bool = False
    init: Optional[list[float]] = None

    @model_validator(mode="after")
    def _known_model(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {sorted(MODELS)}")
        return self


class GmmConfig(_Config):
    data: str
    cluster: str
    y: str
    x: list[str] = []
    z: list[str]
    intercept: bool = True
    weight: Literal["identity", "conventional", "clustered"] = "clustered"
    centered: bool = True
    two_step: bool = True
    init: Optional[list[float]] = None


class DiagnoseConfig(_Config):
    data: Optional[str] = None
    cluster: Optional[str] = None
    sizes: Optional[list[int]] = None
    r: float = 2.0

    @model_validator(mode="after")
    def _one_source(self):
        if (self.sizes is None) == (self.data is None):
            raise ValueError("give either sizes or data with a cluster column")
        if self.data is not None and self.cluster is None:
            raise ValueError("data needs a cluster column")
        return self


class RateConfig(_Config):
    family: Family
    alpha: float
    n_grid: list[int]
    reps: int = 1000
    seed: int = 0
    lag_offset: float = 0.0


class _DgpConfig(_Config):
    family: Family
    alpha: Optional[float] = None
    n: Optional[int] = None
    clusters: Optional[int] = None
    cluster_size: Optional[int] = None
    lag_offset: float = 0.0

    def dgp(self) -> DgpSpec:
        return DgpSpec(self.family, self.alpha, self.n, self.clusters, self.cluster_size,
                       1, self.lag_offset)


class CoverageConfig(_DgpConfig):
    estimator: Literal["ols_intercept", "studentized_mean"] = "ols_intercept"
    dof: Literal["none", "hansen", "stata"] = "stata"
    truth: float = 0.0
    reps: int = 2000
    seed: int = 0
    level: float = 0.95


class JsizeConfig(_Config):
    clusters: int = 300
    cluster_size: int = 10
    instruments: int = 2
    regressors: int = 1
    rho: float = 0.5
    endogeneity: float = 0.5
    first_stage: float = 1.0
    reps: int = 2000
    seed: int = 0
    size: float = 0.05


class Clt2Config(_DgpConfig):
    reps: int = 2000
    seed: int = 0
    centered: bool = False


CONFIGS = {
    "fit-ols": FitConfig,
    "fit-tsls": TslsConfig,
    "fit-mle": MleConfig,
    "fit-gmm": GmmConfig,
    "diagnose": DiagnoseConfig,
    "mc-rate": RateConfig,
    "mc-coverage": CoverageConfig,
    "mc-jsize": JsizeConfig,
    "mc-clt2": Clt2Config,
}


# helpers

def _load(cfg, columns: list[str]) -> ClusteredSample:
    return ingest_csv(cfg.data, cfg.cluster, columns)


def _with_const(sample: ClusteredSample, cols: list[int], add: bool) -> tuple[np.ndarray, list[int]]:
    if not add:
        return sample.data, cols
    data = np.column_stack([sample.data, np.ones(sample.n)])
    return data, [data.shape[1] - 1] + cols


def _unique(seq):
    return list(dict.fromkeys(seq))


def _estimate_block(rep: EstimateReport, names: list[str]) -> dict:
    out = {
        "names": names,
        "params": rep.params,
        "se": rep.se,
        "t": rep.t_ratios,
        "V_hat": rep.V_hat,
        "n": rep.n,
        "G": rep.G,
    }
    try:
        out["wald_all_zero"] = wald_test(rep, np.eye(rep.k)).to_dict()
    except EstimationError as exc:
        out["wald_all_zero"] = {"error": exc.code, "message": str(exc)}
    return out


def _diagnostics(index: ClusterIndex) -> dict:
    return heterogeneity_diagnostics(index, warn=True).to_dict()


def _linear(cfg: FitConfig) -> dict:
    z = cfg.z if cfg.z is not None else []
    cols = _unique([cfg.y] + cfg.x + z)
    sample = _load(cfg, cols)
    if not cfg.x and not cfg.intercept:
        raise WrongConfig("no regressors: give --x or keep the intercept")
    pos = {c: j for j, c in enumerate(cols)}
    data, xcols = _with_const(sample, [pos[c] for c in cfg.x], cfg.intercept)
    zcols = xcols if cfg.z is None else _with_const(sample, [pos[c] for c in z], cfg.intercept)[1]
    design = LinearDesign(data[:, pos[cfg.y]], data[:, xcols], data[:, zcols], sample.index)
    rep = fit_tsls(design, cfg.dof) if cfg.z is not None else fit_ols(design.y, design.X,
                                                                       design.index, cfg.dof)
    names = (["const"] if cfg.intercept else []) + cfg.x
    out = _estimate_block(rep, names)
    out.update({
        "dof": cfg.dof,
        "d_n": rep.d_n,
        "Q_hat": rep.Q_hat,
        "W_hat": rep.W_hat,
        "Omega_hat": rep.Omega_hat.matrix,
        "Omega_min_eigenvalue": rep.Omega_hat.min_eigenvalue,
        "diagnostics": _diagnostics(sample.index),
    })
    return out


def _mle(cfg: MleConfig) -> dict:
    cols = ([cfg.y] if cfg.y else []) + cfg.x
    if not cols:
        raise WrongConfig("fit-mle needs data columns via --y and/or --x")
    sample = _load(cfg, _unique(cols))
    pos = {c: j for j, c in enumerate(_unique(cols))}
    data = sample.data[:, [pos[c] for c in cols]]
    names = list(cols)
    if cfg.intercept:
        lead = 1 if cfg.y else 0
        data = np.insert(data, lead, 1.0, axis=1)
        names.insert(lead, "const")
    sample = sample.with_data(data)
    model = make_model(cfg.model, sample.p)
    init = np.zeros(model.k) if cfg.init is None else np.asarray(cfg.init, float)
    if init.shape != (model.k,):
        raise WrongConfig(f"init must have {model.k} entries")
    rep = fit_pseudo_mle(sample, model, init)
    pnames = names[1:] if cfg.model == "logit" else (names if cfg.model == "gaussian_location" else ["log_rate"])
    out = _estimate_block(rep, pnames)
    out.update({
        "loglik": rep.loglik,
        "iterations": rep.iterations,
        "grad_norm": rep.grad_norm,
        "converged": rep.converged,
        "termination": rep.termination,
        "H_hat": rep.H_hat,
        "Omega_hat": rep.Omega_hat.matrix,
        "diagnostics": _diagnostics(sample.index),
    })
    return out


def _gmm(cfg: GmmConfig) -> dict:
    cols = _unique([cfg.y] + cfg.x + cfg.z)
    sample = _load(cfg, cols)
    pos = {c: j for j, c in enumerate(cols)}
    data, xcols = _with_const(sample, [pos[c] for c in cfg.x], cfg.intercept)
    zcols = _with_const(sample, [pos[c] for c in cfg.z], cfg.intercept)[1]
    if not xcols:
        raise WrongConfig("no regressors: give --x or keep the intercept")
    sample = sample.with_data(data)
    model = LinearIV(pos[cfg.y], xcols, zcols)
    if cfg.init is None:
        init = np.zeros(model.k)
    else:
        init = np.asarray(cfg.init, dtype=np.float64)
        if init.shape != (model.k,):
            raise WrongConfig(f"init must have {model.k} entries")
    rep = gmm_fit(sample, model, init, weight=WeightSpec(cfg.weight, cfg.centered),
                  two_step=cfg.two_step)
    names = (["const"] if cfg.intercept else []) + cfg.x
    out = _estimate_block(rep, names)
    out.update({
        "J": {"statistic": rep.J_statistic, "df": rep.J_df, "p_value": rep.J_p_value},
        "steps": rep.steps,
        "iterations": rep.iterations,
        "converged": rep.converged,
        "termination": rep.termination,
        "first_step_params": rep.first_step_params,
        "W_hat": rep.W_hat,
        "Omega_hat": rep.Omega_hat.matrix,
        "diagnostics": _diagnostics(sample.index),
    })
    return out


def _diagnose(cfg: DiagnoseConfig) -> dict:
    if cfg.sizes is not None:
        index = ClusterIndex.from_sizes(cfg.sizes)
    else:
        index = ingest_index(cfg.data, cfg.cluster)
    return heterogeneity_diagnostics(index, cfg.r, warn=True).to_dict()


def _mc(command: str, cfg, threads: int):
    if command == "mc-rate":
        return rate_experiment(cfg.family, cfg.alpha, cfg.n_grid, cfg.reps, cfg.seed,
                               lag_offset=cfg.lag_offset, threads=threads)
    if command == "mc-coverage":
        est = EstimatorConfig(cfg.estimator, cfg.dof, cfg.truth)
        return coverage_experiment(est, cfg.dgp(), cfg.reps, cfg.seed, cfg.level, threads=threads)
    if command == "mc-jsize":
        iv = IvDgpConfig(cfg.clusters, cfg.cluster_size, cfg.instruments, cfg.regressors,
                         cfg.rho, cfg.endogeneity, cfg.first_stage)
        return jsize_experiment(iv, cfg.reps, cfg.seed, size=cfg.size, threads=threads)
    return second_moment_clt_check(cfg.dgp(), cfg.reps, cfg.seed, centered=cfg.centered,
                                   threads=threads)


def versions() -> dict:
    return {
        "clusterrobust": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def run(command: str, config: dict, *, threads: int = 1, rep_csv: str | None = None) -> tuple[int, dict]:
    """Validate ``config`` for ``command``, execute it and build the report.

    Returns the exit status and the JSON-ready report. ``threads`` only caps
    Monte Carlo workers and is not part of the echoed configuration.
    """
    report: dict = {"command": command, "versions": versions()}
    caught: list[warnings.WarningMessage] = []
    try:
        if command not in CONFIGS:
            raise WrongConfig(f"unknown command {command!r}")
        try:
            cfg = CONFIGS[command].model_validate(config)
        except ValidationError as exc:
            raise WrongConfig(_validation_message(exc)) from None
        report["config"] = cfg.model_dump()
        if threads < 1:
            raise WrongConfig("threads must be at least 1")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            if command.startswith("mc-"):
                res = _mc(command, cfg, threads)
                report["seed"] = res.seed
                report["result"] = res.to_dict()
                if rep_csv:
                    res.write_csv(rep_csv)
            else:
                handler = {"fit-ols": _linear, "fit-tsls": _linear, "fit-mle": _mle,
                           "fit-gmm": _gmm, "diagnose": _diagnose}[command]
                report["result"] = handler(cfg)
        status = 0
        report["status"] = "ok"
    except ClusterRobustError as exc:
        status = 2 if isinstance(exc, ConfigError) else 1
        report["status"] = "error"
        report["error"] = {"code": exc.code, "message": str(exc)}
    except OSError as exc:
        status = 2
        report["status"] = "error"
        report["error"] = {"code": "IO_ERROR", "message": str(exc)}
    report["warnings"] = [
        {"category": w.category.__name__, "message": str(w.message)} for w in caught
    ]
    return status, report


def _validation_message(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "config"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


# argument parsing

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in _names(text)]


def _ints(text: str) -> list[int]:
    """Comma list of integers, or a power range such as ``2^10..2^16``."""
    if ".." in text:
        lo, hi = text.split("..")
        if "^" in lo and "^" in hi:
            b1, e1 = lo.split("^")
            b2, e2 = hi.split("^")
            if b1 != b2:
                raise argparse.ArgumentTypeError("power range needs a common base")
            return [int(b1) ** e for e in range(int(e1), int(e2) + 1)]
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in _names(text)]


# flag -> (config key, parser, help)
_FLAGS = {
    "--data": ("data", str, "CSV file with a header row"),
    "--cluster": ("cluster", str, "name of the cluster-label column"),
    "--y": ("y", str, "outcome column"),
    "--x": ("x", _names, "comma-separated regressor columns"),
    "--z": ("z", _names, "comma-separated instrument columns"),
    "--intercept": ("intercept", _bool, "include a constant (true|false)"),
    "--dof": ("dof", str, "dof adjustment: none|hansen|stata"),
    "--weight": ("weight", str, "final GMM weight: identity|conventional|clustered"),
    "--centered": ("centered", _bool, "center moments in the weight (true|false)"),
    "--two-step": ("two_step", _bool, "run the second GMM step (true|false)"),
    "--model": ("model", str, f"likelihood model: {'|'.join(sorted(MODELS))}"),
    "--init": ("init", _floats, "comma-separated starting values"),
    "--sizes": ("sizes", _ints, "comma-separated cluster sizes"),
    "--r": ("r", float, "moment order r >= 2"),
    "--family": ("family", str, f"DGP family: {'|'.join(FAMILIES)}"),
    "--alpha": ("alpha", float, "cluster growth exponent in [0, 1)"),
    "--n": ("n", int, "target sample size"),
    "--n-grid": ("n_grid", _ints, "sample sizes, e.g. 1024,2048 or 2^10..2^16"),
    "--clusters": ("clusters", int, "number of clusters"),
    "--size": ("cluster_size", int, "cluster size"),
    "--lag-offset": ("lag_offset", float, "offset in the inverse-distance covariance"),
    "--estimator": ("estimator", str, "ols_intercept|studentized_mean"),
    "--truth": ("truth", float, "true parameter value"),
    "--level": ("level", float, "interval confidence level"),
    "--instruments": ("instruments", int, "number of instruments"),
    "--rho": ("rho", float, "intraclass correlation of instruments and errors"),
    "--endogeneity": ("endogeneity", float, "correlation of first-stage and structural errors"),
    "--first-stage": ("first_stage", float, "first-stage strength"),
    "--test-size": ("size", float, "nominal size of the J test"),
    "--reps": ("reps", int, "Monte Carlo replications"),
    "--seed": ("seed", int, "master seed"),
}

_COMMAND_FLAGS = {
    "fit-ols": ["--data", "--cluster", "--y", "--x", "--intercept", "--dof"],
    "fit-tsls": ["--data", "--cluster", "--y", "--x", "--z", "--intercept", "--dof"],
    "fit-mle": ["--data", "--cluster", "--y", "--x", "--intercept", "--model", "--init"],
    "fit-gmm": ["--data", "--cluster", "--y", "--x", "--z", "--intercept", "--weight",
                "--centered", "--two-step", "--init"],
    "diagnose": ["--data", "--cluster", "--sizes", "--r"],
    "mc-rate": ["--family", "--alpha", "--n-grid", "--reps", "--seed", "--lag-offset"],
    "mc-coverage": ["--family", "--alpha", "--n", "--clusters", "--size", "--lag-offset",
                    "--estimator", "--dof", "--truth", "--level", "--reps", "--seed"],
    "mc-jsize": ["--clusters", "--size", "--instruments", "--rho", "--endogeneity",
                 "--first-stage", "--test-size", "--reps", "--seed"],
    "mc-clt2": ["--family", "--alpha", "--n", "--clusters", "--size", "--lag-offset",
                "--centered", "--reps", "--seed"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterrobust", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for command, flags in _COMMAND_FLAGS.items():
        p = sub.add_parser(command)
        for flag in flags:
            key, conv, help_ = _FLAGS[flag]
            p.add_argument(flag, dest=key, type=conv, default=None, help=help_)
        p.add_argument("--config", default=None, help="JSON file with configuration keys")
        p.add_argument("--out", default=None, help="write the JSON report here (default stdout)")
        if command.startswith("mc-"):
            p.add_argument("--threads", type=int, default=1, help="worker threads")
            p.add_argument("--rep-csv", default=None, help="write per-replication records here")
    return parser


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    out = args.pop("out")
    threads = args.pop("threads", 1)
    rep_csv = args.pop("rep_csv", None)
    config_path = args.pop("config")
    config: dict = {}
    status = 0
    if config_path is not None:
        try:
            with open(config_path, encoding="utf-8") as fh:
                config = json.load(fh)
            if not isinstance(config, dict):
                raise ValueError("top level must be an object")
        except (OSError, ValueError) as exc:
            report = {"command": command, "status": "error", "versions": versions(),
                      "error": {"code": "WRONG_CONFIG", "message": f"{config_path}: {exc}"},
                      "warnings": []}
            status = 2
    if status == 0:
        config.update({k: v for k, v in args.items() if v is not None})
        status, report = run(command, config, threads=threads, rep_csv=rep_csv)
    text = dumps(report)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if status:
        err = report["error"]
        print(f"error [{err['code']}]: {err['message']}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
