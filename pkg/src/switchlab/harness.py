"""Experiment configuration, replication driver, tail fitting and verdicts."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, InsufficientDataError, SwitchLabError
from .sfa import analytic_report, md1_lower_bound, mean_workload, tail_exponent, mean_queue_bound
from .sn import LOAD_INVARIANTS, POLICIES, CoupledConfig, TraceSummary, run_coupled
from .topologies import Topology, from_spec

MIN_TAIL_SAMPLES = 10_000
MIN_EXCEEDANCES = 100
MEAN_SIGMAS = 3.0
SLOPE_TOLERANCE = 0.15


# ---------------------------------------------------------------------- config
@dataclass(frozen=True)
class ExperimentConfig:
    topology: str
    rho: float | None = None
    rates: tuple | None = None
    policy: str = "emul"
    mw_alpha: float = 1.0
    horizon: int = 100_000
    warmup_fraction: float = 0.2
    seed: int = 0
    replications: int = 1
    workers: int = 1
    batches: int = 32
    summary_path: str | None = None
    csv_path: str | None = None
    ccdf_path: str | None = None
    trace_path: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        """Validate a parsed JSON document; every problem is reported against its field."""
        if not isinstance(doc, dict):
            raise ConfigError({"<root>": "config must be a JSON object"})
        errors: dict[str, str] = {}
        known = {f for f in cls.__dataclass_fields__}
        for key in doc:
            if key not in known:
                errors[key] = "unknown field"
        if "topology" not in doc:
            errors["topology"] = "required"
        elif not isinstance(doc["topology"], str):
            errors["topology"] = "must be a string such as 'iq:2'"

        def number(key, kind, default):
            value = doc.get(key, default)
            if value is None:
                return None
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                errors[key] = f"must be a {kind.__name__}"
                return default
            if kind is int and value != int(value):
                errors[key] = "must be an integer"
                return default
            return kind(value)

        values = {
            "rho": number("rho", float, None),
            "mw_alpha": number("mw_alpha", float, 1.0),
            "horizon": number("horizon", int, 100_000),
            "warmup_fraction": number("warmup_fraction", float, 0.2),
            "seed": number("seed", int, 0),
            "replications": number("replications", int, 1),
            "workers": number("workers", int, 1),
            "batches": number("batches", int, 32),
        }
        rates = doc.get("rates")
        if rates is not None:
            if not isinstance(rates, list) or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in rates
            ):
                errors["rates"] = "must be a list of numbers"
                rates = None
            else:
                rates = tuple(float(x) for x in rates)
        policy = doc.get("policy", "emul")
        paths = {}
        for key in ("summary_path", "csv_path", "ccdf_path", "trace_path"):
            value = doc.get(key)
            if value is not None and not isinstance(value, str):
                errors[key] = "must be a path string"
                value = None
            paths[key] = value
        topology = doc.get("topology") if isinstance(doc.get("topology"), str) else ""
        config = cls(topology=topology, rates=rates, policy=policy, **values, **paths)
        try:
            config.validate()
        except ConfigError as exc:
            for key, msg in exc.errors.items():
                errors.setdefault(key, msg)
        if errors:
            raise ConfigError(errors)
        return config

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError({"<root>": f"not valid JSON: {exc}"}) from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        errors: dict[str, str] = {}
        try:
            topo = from_spec(self.topology)
        except SwitchLabError as exc:
            errors["topology"] = str(exc)
            topo = None
        if (self.rho is None) == (self.rates is None):
            errors["rho"] = "give exactly one of 'rho' and 'rates'"
        if self.rho is not None and not 0 < self.rho < 1:
            errors["rho"] = "must lie in (0, 1)"
        if self.rates is not None and topo is not None:
            lam = np.asarray(self.rates, dtype=float)
            if lam.size != topo.n_queues:
                errors["rates"] = f"needs {topo.n_queues} entries for {topo.name}"
            elif np.any(lam < 0):
                errors["rates"] = "entries must be nonnegative"
            elif topo.load(lam) >= 1:
                errors["rates"] = f"load {topo.load(lam):.6g} must be below 1"
        if self.policy not in POLICIES:
            errors["policy"] = f"must be one of {list(POLICIES)}"
        if not self.mw_alpha > 0:
            errors["mw_alpha"] = "must be positive"
        if self.horizon < 1:
            errors["horizon"] = "must be positive"
        if not 0 <= self.warmup_fraction < 1:
            errors["warmup_fraction"] = "must lie in [0, 1)"
        elif int(self.horizon * (1 - self.warmup_fraction)) < 1:
            errors["horizon"] = "must exceed the warmup"
        if self.seed < 0:
            errors["seed"] = "must be nonnegative"
        if self.replications < 1:
            errors["replications"] = "must be at least 1"
        if self.workers < 1:
            errors["workers"] = "must be at least 1"
        if self.batches < 2:
            errors["batches"] = "must be at least 2"
        if errors:
            raise ConfigError(errors)

    def resolve(self) -> tuple[Topology, np.ndarray]:
        topo = from_spec(self.topology)
        if self.rates is not None:
            return topo, np.asarray(self.rates, dtype=float)
        return topo, uniform_rates(topo, self.rho)

    def to_json(self) -> dict:
        doc = asdict(self)
        if self.rates is not None:
            doc["rates"] = list(self.rates)
        return doc


def uniform_switch_rates(n: int, rho: float) -> np.ndarray:
    """lambda_kl = rho / n on an n x n switch, flattened row-major."""
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    if n < 1:
        raise DomainError("switch needs at least one port")
    return np.full(n * n, rho / n)


def uniform_rates(topology: Topology, rho: float) -> np.ndarray:
    """Equal rates on every queue, scaled so the load is ``rho``."""
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    ports = switch_ports(topology)
    if ports is not None:
        return uniform_switch_rates(ports, rho)
    ones = np.ones(topology.n_queues)
    return ones * (rho / topology.load(ones))


def switch_ports(topology: Topology) -> int | None:
    match = re.fullmatch(r"iq:(\d+)", topology.name)
    return int(match.group(1)) if match else None


# ---------------------------------------------------------------------- tail fit
@dataclass(frozen=True)
class TailFit:
    slope: float
    window: tuple[int, int]
    samples: int
    levels: np.ndarray = field(repr=False)
    log_ccdf: np.ndarray = field(repr=False)


def estimate_tail_exponent(hist) -> TailFit:
    """Least-squares slope of log P(X >= l) over [median, last l with >= 100 exceedances].

    ``hist[l]`` is the number of samples equal to ``l``; use ``np.bincount``
    to build it from raw samples.
    """
    counts = np.asarray(hist, dtype=np.int64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise DomainError("histogram must be a 1-d array of nonnegative counts")
    total = int(counts.sum())
    if total < MIN_TAIL_SAMPLES:
        raise InsufficientDataError(f"{total} samples; need at least {MIN_TAIL_SAMPLES}")
    exceed = np.cumsum(counts[::-1])[::-1]  # exceed[l] = #{X >= l}
    lo = int(np.searchsorted(np.cumsum(counts), 0.5 * total))  # smallest l with F(l) >= 1/2
    hi = int(np.flatnonzero(exceed >= MIN_EXCEEDANCES).max())
    if hi - lo < 1:
        raise InsufficientDataError(f"fitting window [{lo}, {hi}] has fewer than two levels")
    levels = np.arange(lo, hi + 1)
    log_ccdf = np.log(exceed[lo : hi + 1] / total)
    slope = float(np.polyfit(levels, log_ccdf, 1)[0])
    return TailFit(slope, (lo, hi), total, levels, log_ccdf)


# ---------------------------------------------------------------------- verdicts
@dataclass(frozen=True)
class Verdict:
    claim: str
    simulated: float
    stderr: float
    analytic: float
    status: str  # "pass", "fail" or "skip"
    tolerance: str
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status != "fail"


def _analytics(topo: Topology, lam: np.ndarray) -> dict:
    rho_tilde = topo.polytope.resource_loads(lam)
    rho = float(rho_tilde.max())
    ports = _uniform_ports(topo, lam)
    return {
        "rho": rho,
        "rho_tilde": rho_tilde.tolist(),
        "mean_workload": mean_workload(rho_tilde),
        "mean_queue_bound": mean_queue_bound(rho_tilde, topo.k_max, topo.n_queues),
        "theta_star": tail_exponent(rho),
        "md1_lower_bound": md1_lower_bound(ports, rho) if ports is not None else None,
        "exact_polytope": topo.exact_polytope,
    }


def verdict_suite(summary: TraceSummary, analytics: dict) -> list[Verdict]:
    """Bound-vs-simulation checks; claims that do not apply are marked skip."""
    q, se = summary.mean_q, summary.stderr
    se_term = 0.0 if math.isnan(se) else MEAN_SIGMAS * se
    emul = summary.policy == "emul"
    out = []

    bound = analytics["mean_queue_bound"]
    if emul and analytics["exact_polytope"]:
        status = "pass" if q <= bound + se_term else "fail"
        detail = ""
    else:
        status = "skip"
        detail = "emulation policy only" if not emul else "R,C does not describe conv(S)"
    out.append(Verdict("a:mean_queue_bound", q, se, bound, status, "3 stderr", detail))

    md1 = analytics["md1_lower_bound"]
    if md1 is None:
        out.append(Verdict("b:md1_lower_bound", q, se, math.nan, "skip", "3 stderr", "uniform switch only"))
    else:
        out.append(Verdict("b:md1_lower_bound", q, se, md1, "pass" if q >= md1 - se_term else "fail", "3 stderr"))

    theta = analytics["theta_star"]
    if not emul:
        out.append(Verdict("c:tail_exponent", math.nan, math.nan, -theta, "skip", "15% rel", "emulation policy only"))
    else:
        try:
            fit = estimate_tail_exponent(summary.q_hist)
        except InsufficientDataError as exc:
            out.append(Verdict("c:tail_exponent", math.nan, math.nan, -theta, "skip", "15% rel", str(exc)))
        else:
            ok = abs(fit.slope + theta) <= SLOPE_TOLERANCE * theta
            out.append(Verdict("c:tail_exponent", fit.slope, math.nan, -theta, "pass" if ok else "fail", "15% rel",
                               f"window=[{fit.window[0]},{fit.window[1]}]"))

    counted = summary.violations.items()
    if not analytics["exact_polytope"]:  # load-based checks carry no guarantee there
        counted = [(k, v) for k, v in counted if k not in LOAD_INVARIANTS]
    bad = sum(v for _, v in counted)
    out.append(Verdict("d:invariants", float(bad), 0.0, 0.0, "pass" if bad == 0 else "fail", "exact",
                       ";".join(f"{k}={v}" for k, v in summary.violations.items() if v)))
    return out


# ---------------------------------------------------------------------- driver
@dataclass
class Report:
    config: ExperimentConfig
    analytics: dict
    replications: list
    merged: TraceSummary
    verdicts: list

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def to_json(self) -> dict:
        return _finite({
            "config": self.config.to_json(),
            "analytics": self.analytics,
            "summary": self.merged.to_json(),
            "replications": [
                {"mean_sum_q": r.mean_q, "mean_sum_w": r.mean_w, "stderr_sum_q": r.stderr,
                 "violations": dict(r.violations)}
                for r in self.replications
            ],
            "verdicts": [asdict(v) for v in self.verdicts],
        })

    def verdict_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["claim", "status", "simulated", "stderr", "analytic", "tolerance", "detail"])
        for v in self.verdicts:
            writer.writerow([v.claim, v.status, repr(v.simulated), repr(v.stderr), repr(v.analytic), v.tolerance,
                             v.detail])
        return buf.getvalue()

    def ccdf_csv(self) -> str:
        levels, tail = self.merged.ccdf()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["level", "log_ccdf"])
        for l, p in zip(levels.tolist(), tail.tolist()):
            if p > 0:
                writer.writerow([l, repr(math.log(p))])
        return buf.getvalue()


def _finite(doc):
    """Replace NaN and infinities by None so the JSON stays strict."""
    if isinstance(doc, dict):
        return {k: _finite(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_finite(v) for v in doc]
    if isinstance(doc, float) and not math.isfinite(doc):
        return None
    return doc


def _replicate(args) -> tuple[TraceSummary, str | None]:
    config, seed, want_trace = args
    topo, lam = config.resolve()
    buf = io.StringIO() if want_trace else None
    summary = run_coupled(CoupledConfig(
        topology=topo, rates=lam, horizon=config.horizon, policy=config.policy, mw_alpha=config.mw_alpha,
        warmup_fraction=config.warmup_fraction, seed=seed, strict=False, batches=config.batches, trace=buf,
    ))
    return summary, buf.getvalue() if buf is not None else None


def run_experiment(config: ExperimentConfig) -> Report:
    """Run every replication, pool them, and write any configured outputs."""
    config.validate()
    topo, lam = config.resolve()
    seeds = np.random.SeedSequence(config.seed).spawn(config.replications)
    jobs = [(config, s, config.trace_path is not None) for s in seeds]
    if config.workers > 1 and config.replications > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, config.replications)) as pool:
            results = list(pool.map(_replicate, jobs))
    else:
        results = [_replicate(job) for job in jobs]
    summaries = [r[0] for r in results]
    merged = summaries[0]
    for s in summaries[1:]:
        merged = merged.merge(s)
    analytics = _analytics(topo, lam)
    report = Report(config, analytics, summaries, merged, verdict_suite(merged, analytics))
    _write_outputs(config, report, [r[1] for r in results])
    return report


def _write_outputs(config: ExperimentConfig, report: Report, traces: list) -> None:
    """Single writer for every output file, in replication order."""
    if config.summary_path:
        Path(config.summary_path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True, allow_nan=False) + "\n")
    if config.csv_path:
        Path(config.csv_path).write_text(report.verdict_csv())
    if config.ccdf_path:
        Path(config.ccdf_path).write_text(report.ccdf_csv())
    if config.trace_path:
        with open(config.trace_path, "w") as fh:
            for k, text in enumerate(traces):
                lines = text.splitlines()
                if k == 0:
                    fh.write("replication," + lines[0] + "\n")
                for line in lines[1:]:
                    fh.write(f"{k},{line}\n")


def analytics_rows(topology: Topology, lam: np.ndarray) -> list:
    return analytic_report(lam, topology.polytope, topology.k_max, uniform_ports=_uniform_ports(topology, lam))


def _uniform_ports(topology: Topology, lam: np.ndarray) -> int | None:
    ports = switch_ports(topology)
    if ports is not None and np.allclose(lam, lam[0], rtol=0, atol=1e-12):
        return ports
    return None
