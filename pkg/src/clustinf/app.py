"""Pipeline commands behind the CLI: analyze, calibrate, simulate, diagnose."""
from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import calibration as cal
from . import io as cio
from .clustering import build_candidates, total_cost
from .errors import ClustinfError, InputError
from .geometry import balance_ratio, boundary_fraction, geo_dissimilarity, validate
from .inference import (
    MAX_ENUMERATED_CLUSTERS,
    ClusterStatVector,
    Decision,
    cce_test,
    crs_test,
    im_test,
    knn_weights,
    moran_i,
    same_unit_weights,
    t_of_s,
)
from .regression import cluster_estimates, fit as full_fit, score_vector
from .simstudy import DesignSpec, default_threads, run_study

log = logging.getLogger(__name__)

COMMANDS = ("analyze", "calibrate", "simulate", "diagnose")
REPORT_COLUMNS = ["method", "theta_hat", "se", "t_stat", "ci_lo", "ci_hi", "ci_usual_lo", "ci_usual_hi",
                  "k_hat", "alpha_hat", "decision"]
MORAN_COLUMNS = ["weights", "n", "I", "expected", "variance", "z", "p_value"]
DIAGNOSE_COLUMNS = ["k", "cost", "balance_ratio", "boundary_fraction", "min_size", "max_size"]
DEFAULT_B = {"analyze": 10000, "calibrate": 1000, "simulate": 200}
ANALYZE_ORDER = ("UNIT", "CCE", "IM", "CRS")


@dataclass
class RunConfig:
    command: str
    seed: int | None = None
    alpha: float = 0.05
    k_max: int | None = None
    B: int | None = None
    methods: list[str] = field(default_factory=lambda: ["all"])
    data: str | None = None
    locations: str | None = None
    dissimilarity: str | None = None
    out: str = "."
    threads: int | None = None
    restarts: int = 1
    orbit_draws: int | None = None
    randomized_crs: int | None = None
    design: str = "olsxbaseline"
    units: int = 205
    reps: int = 200
    radius: float | None = None
    format: str = "csv"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise InputError(f"unknown command {self.command!r}")
        if not 0 < self.alpha < 1:
            raise InputError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.seed is None and self.command != "diagnose":
            raise InputError("--seed is required: results are simulation-calibrated and must be reproducible")
        if self.B is None:
            self.B = DEFAULT_B.get(self.command, 1000)
        if isinstance(self.methods, str):
            self.methods = [m.strip() for m in self.methods.split(",")]

    def method_list(self) -> list[cal.Method]:
        names = [m.lower() for m in self.methods]
        if "all" in names:
            return [cal.Method(m) for m in ANALYZE_ORDER]
        return [cal.Method.parse(m) for m in names]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_sources(cls, command: str, file_config: dict | None, flags: dict) -> "RunConfig":
        """Defaults, then the JSON config file, then explicit command-line flags."""
        merged = dict(file_config or {})
        merged.pop("command", None)
        merged.update({k: v for k, v in flags.items() if v is not None})
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(merged) - known)
        if unknown:
            raise InputError(f"unknown configuration keys: {unknown}")
        return cls(command=command, **merged)


def load_config_file(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from None


class StageError(ClustinfError):
    """Wraps a pipeline error with the name of the stage that raised it."""

    def __init__(self, stage: str, exc: ClustinfError):
        super().__init__(f"[{stage}] {exc}")
        self.stage, self.cause = stage, exc
        self.exit_code = exc.exit_code


@dataclass
class RunManifest:
    config: dict
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)

    def add_input(self, path) -> None:
        if path:
            if not Path(path).is_file():
                raise InputError(f"no such file: {path}")
            self.inputs[str(path)] = cio.sha256(path)

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except ClustinfError as exc:
            raise StageError(name, exc) from exc
        finally:
            self.stages[name] = round(time.perf_counter() - start, 3)
            log.info("stage %s: %.2fs", name, self.stages[name])

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


class _Outputs:
    """Tracks files written by a run so a failure leaves no partial results."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.written: list[Path] = []

    def __enter__(self):
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise InputError(f"cannot create output directory {self.dir}: {exc}") from None
        return self

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.written.append(p)
        return p

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            for p in self.written:
                p.unlink(missing_ok=True)
        return False


# --- shared stages ------------------------------------------------------------

def _load(cfg: RunConfig, manifest: RunManifest):
    if not cfg.data:
        raise InputError("--data is required")
    with manifest.stage("load"):
        manifest.add_input(cfg.data)
        manifest.add_input(cfg.locations)
        data = cio.load_dataset(cfg.data, cfg.locations)
        if cfg.dissimilarity:
            manifest.add_input(cfg.dissimilarity)
            d = cio.load_dissimilarity(cfg.dissimilarity, data.n)
        elif data.coords is not None:
            d = geo_dissimilarity(data.coords)
        else:
            raise InputError("need coordinates (lat/lon or --locations) or --dissimilarity")
        report = validate(d)
        if not report.ok:
            log.warning("dissimilarity problems: %s", report.summary())
    log.info("loaded %d observations, %d controls%s", data.n, data.p, ", IV" if data.is_iv else "")
    return data, d


def _candidates(cfg: RunConfig, d, manifest: RunManifest, needed: bool = True):
    if not needed:
        return None
    with manifest.stage("partition"):
        return build_candidates(d, cfg.k_max, seed=cfg.seed or 0, restarts=cfg.restarts)


def _calibrator(cfg: RunConfig, data, cands, manifest: RunManifest) -> cal.Calibrator:
    with manifest.stage("simulate"):
        return cal.Calibrator(data, cands, cfg.B, cfg.seed, orbit_draws=cfg.orbit_draws)


# --- analyze --------------------------------------------------------------------

def _decision(outcome) -> str:
    return outcome.decision.value


def report_row(data, method: cal.Method, result: cal.CalibrationResult, alpha: float,
               randomized_crs: int | None = None) -> dict:
    """One Table-2 style row: estimate, s.e., t statistic, calibrated and usual intervals."""
    part, a = result.partition, result.alpha_hat
    est, se = cal.point_estimate(data, method, part)
    ci = cal.confidence_interval(data, result)
    usual = cal.confidence_interval(data, result, a=alpha)
    row = {"method": method.value, "theta_hat": est, "k_hat": result.k_hat, "alpha_hat": a,
           "ci_lo": ci.lo, "ci_hi": ci.hi, "ci_usual_lo": usual.lo, "ci_usual_hi": usual.hi}
    if method in (cal.Method.IM, cal.Method.CRS):
        sv = ClusterStatVector.from_estimates(cluster_estimates(data, part), data.n)
        if method is cal.Method.IM:
            row.update(se=se, t_stat=t_of_s(sv))
            row["decision"] = _decision(im_test(sv, a)) if a > 0 else Decision.FAIL_TO_REJECT.value
        else:
            randomized = randomized_crs is not None
            rng = np.random.default_rng(randomized_crs if randomized else result.seed)
            draws = None if part.k <= MAX_ENUMERATED_CLUSTERS else 2 ** MAX_ENUMERATED_CLUSTERS
            row["decision"] = (_decision(crs_test(sv, a, randomized, rng, draws)) if a > 0
                               else Decision.FAIL_TO_REJECT.value)
    else:
        row.update(se=se, t_stat=est / se)
        row["decision"] = (_decision(cce_test(data, part, 0.0, a, method=method.value)) if a > 0
                           else Decision.FAIL_TO_REJECT.value)
    return row


def moran_rows(data) -> list[dict]:
    """Moran diagnostics on the score vector: nearest-neighbor weights per period and pooled, and same-unit weights."""
    scores = score_vector(data, full_fit(data))
    rows = []

    def add(name, s, w):
        r = moran_i(s, w)
        rows.append({"weights": name, "n": len(s), "I": r.I, "expected": r.expected,
                     "variance": r.variance, "z": r.z, "p_value": r.p_value})

    if data.coords is not None:
        for e in np.unique(data.period):
            idx = np.flatnonzero(data.period == e)
            if idx.size > 2:
                add(f"knn2_period_{e}", scores[idx], knn_weights(data.coords[idx], 2))
        add("knn2_pooled", scores, knn_weights(data.coords, 2))
    if np.unique(data.unit_id).size < data.n:
        add("same_unit", scores, same_unit_weights(data.unit_id))
    return rows


def format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [columns] + [[cio.format_value(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)


def analyze(cfg: RunConfig, echo=print) -> dict[str, Path]:
    """Candidate partitions, covariance fit, calibration, tests and Moran diagnostics."""
    manifest = RunManifest(cfg.to_dict())
    methods = cfg.method_list()
    data, d = _load(cfg, manifest)
    needs_clusters = any(m is not cal.Method.UNIT for m in methods)
    cands = _candidates(cfg, d, manifest, needs_clusters)
    calib = _calibrator(cfg, data, cands, manifest) if methods else None
    rows, results = [], {}
    with manifest.stage("calibrate"):
        for m in methods:
            results[m] = calib.calibrate(m, cfg.alpha)
    with manifest.stage("test"):
        for m in methods:
            rows.append(report_row(data, m, results[m], cfg.alpha, cfg.randomized_crs))
    with manifest.stage("moran"):
        moran = moran_rows(data)
    with _Outputs(cfg.out) as out:
        paths = {"manifest": manifest.write(out.path("manifest.json"))}
        paths["report"] = cio.emit_report(rows, out.path(f"report.{cfg.format}"), REPORT_COLUMNS, cfg.format)
        paths["moran"] = cio.emit_report(moran, out.path(f"moran.{cfg.format}"), MORAN_COLUMNS, cfg.format)
        paths["calibration"] = _write_grids(out, results.values())
    echo(format_table(rows, REPORT_COLUMNS))
    return paths


def _write_grids(out: _Outputs, results) -> Path:
    path = out.path("calibration.csv")
    body = "method,k,a,type1\n" + "".join(r.grid.to_csv().split("\n", 1)[1] for r in results)
    path.write_text(body)
    jpath = out.path("calibration.json")
    jpath.write_text(json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True) + "\n")
    return path


def calibrate(cfg: RunConfig, echo=print) -> dict[str, Path]:
    """Error grids and selected (alpha_hat, k_hat) per method, without testing."""
    manifest = RunManifest(cfg.to_dict())
    methods = cfg.method_list()
    data, d = _load(cfg, manifest)
    cands = _candidates(cfg, d, manifest, any(m is not cal.Method.UNIT for m in methods))
    calib = _calibrator(cfg, data, cands, manifest)
    with manifest.stage("calibrate"):
        results = [calib.calibrate(m, cfg.alpha) for m in methods]
    with _Outputs(cfg.out) as out:
        paths = {"manifest": manifest.write(out.path("manifest.json"))}
        paths["calibration"] = _write_grids(out, results)
    for r in results:
        echo(f"{r.method.value}: k_hat={r.k_hat} alpha_hat={r.alpha_hat:.6g} power={r.power:.6g}")
    return paths


def diagnose(cfg: RunConfig, echo=print) -> dict[str, Path]:
    """Per-k cost and regularity diagnostics of the candidate partitions."""
    manifest = RunManifest(cfg.to_dict())
    if cfg.data:
        _, d = _load(cfg, manifest)
    elif cfg.dissimilarity:
        with manifest.stage("load"):
            manifest.add_input(cfg.dissimilarity)
            d = cio.load_dissimilarity(cfg.dissimilarity)
    elif cfg.locations:
        with manifest.stage("load"):
            manifest.add_input(cfg.locations)
            d = geo_dissimilarity(np.array(list(cio.load_locations(cfg.locations).values())))
    else:
        raise InputError("diagnose needs --data, --dissimilarity or --locations")
    cands = _candidates(cfg, d, manifest)
    radius = cfg.radius if cfg.radius is not None else float(np.median(d[np.triu_indices(len(d), 1)])) / 10
    rows = []
    with manifest.stage("diagnose"):
        for k in cands:
            p = cands[k]
            sizes = p.sizes()
            rows.append({"k": k, "cost": total_cost(d, p), "balance_ratio": balance_ratio(p),
                         "boundary_fraction": boundary_fraction(p, d, radius),
                         "min_size": int(sizes.min()), "max_size": int(sizes.max())})
    with _Outputs(cfg.out) as out:
        paths = {"manifest": manifest.write(out.path("manifest.json"))}
        paths["diagnose"] = cio.emit_report(rows, out.path("diagnose.csv"), DIAGNOSE_COLUMNS)
    echo(format_table(rows, DIAGNOSE_COLUMNS))
    return paths


def parse_design(design: str) -> tuple[str, str]:
    parts = design.lower().split("x")
    if len(parts) != 2 or parts[0] not in ("ols", "iv") or parts[1] not in ("baseline", "sar"):
        raise InputError(f"design must be one of {{ols,iv}}x{{baseline,sar}}, got {design!r}")
    return parts[0].upper(), parts[1].upper()


def simulate(cfg: RunConfig, echo=print) -> dict[str, Path]:
    """Monte Carlo study; writes summary, k_hat, alpha_hat and power tables."""
    manifest = RunManifest(cfg.to_dict())
    model, error = parse_design(cfg.design)
    if cfg.units not in (205, 820):
        raise InputError("--units must be 205 or 820")
    centroids = None
    if cfg.locations:
        manifest.add_input(cfg.locations)
        table = cio.load_locations(cfg.locations)
        seen, centroids = set(), []
        for (u, _), ll in table.items():
            if u not in seen:
                seen.add(u)
                centroids.append(ll)
        centroids = np.array(centroids)
    spec = DesignSpec(model, error, cfg.units, 2, cfg.reps, cfg.B, cfg.seed, cfg.alpha, cfg.k_max, centroids)
    methods = ["UNIT-U", *[m.value for m in cfg.method_list()]]
    with manifest.stage("study"):
        report = run_study(spec, methods, threads=cfg.threads or default_threads())
    manifest.stages["failures"] = len(report.failures)
    with _Outputs(cfg.out) as out:
        paths = {"manifest": manifest.write(out.path("manifest.json"))}
        for p in report.write(out.dir):
            out.written.append(p)
            paths[p.stem] = p
    echo(Path(paths["summary"]).read_text().rstrip())
    return paths


def run(cfg: RunConfig, echo=print) -> dict[str, Path]:
    return {"analyze": analyze, "calibrate": calibrate, "simulate": simulate, "diagnose": diagnose}[cfg.command](cfg, echo)
