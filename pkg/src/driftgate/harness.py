"""Experiment orchestration: sweeps, result files, plot data, self-checks.

A run is one (method, delta, memory size, gate capacity, seed) grid point.
Results land in three tiers: ``results.csv`` (one row per run, byte-stable
across identical executions), ``metrics.jsonl`` (per-update training
reports, including wall-clock), and ``summary.json`` (per-method mean and
spread across the delta grid).
"""

from __future__ import annotations

import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .feature_stream import DriftStream, ManifestStream, build_drift_spec
from .grcl import mas_penalty_grad
from .numerics import ContractViolation, FeatureGrid, MaskGrid, MaskKind, Rng
from .rmscl import LassoProblem, solve_nn_lasso
from .sample_memory import gate_unit_size_bits, unit_size_bits
from .target_model import LossConfig, TargetModel, WeightedSample, loss_and_grad, pixel_weights
from .trainer import Method, MethodConfig, evaluate_run, forgetting_score, retrospective_jaccard, run_stream

DEFAULT_DELTAS = [1, 2, 4, 6, 8, 10]
DEFAULT_SEEDS = [0, 1, 2, 3, 4]
MEMORY_SIZE_GRID = [8, 16, 32, 64, 128]
GATE_CAPACITY_GRID = [4, 20, 32, 64, 80, 128]

CSV_COLUMNS = [
    "method",
    "delta_c",
    "delta_m",
    "memory_capacity",
    "gate_capacity",
    "seed",
    "status",
    "mean_jaccard",
    "jaccard_std_over_deltas",
    "forgetting",
    "frozen_final_fraction",
    "frozen_peak_fraction",
    "updates",
    "error",
]

PLOT_KINDS = ("delta-curve", "memory-curve", "gate-popcount", "mas-compare")


@dataclass
class StreamConfig:
    seed: int = 7
    segments: int = 4
    frames_per_segment: int = 31
    channels: int = 16
    height: int = 16
    width: int = 16
    noise_sigma: float = 0.15
    gradual: bool = False
    manifest: Optional[str] = None


@dataclass
class MethodEntry:
    name: str
    label: Optional[str] = None
    mas_gamma: float = 0.0
    xi_lower: float = 0.07
    xi_upper: float = 0.15
    gate_percentile: float = 99.5
    gate_clamp: tuple[float, float] = (0.1, 0.55)
    memory_interval: Optional[int] = None  # pin delta_m; default couples it to delta_c

    @property
    def key(self) -> str:
        return self.label or self.name


@dataclass
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    methods: list[MethodEntry] = field(default_factory=lambda: [MethodEntry("baseline")])
    deltas: list[int] = field(default_factory=lambda: list(DEFAULT_DELTAS))
    memory_sizes: list[int] = field(default_factory=lambda: [32])
    gate_capacities: list[Optional[int]] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    out_dir: str = "driftgate-results"
    holdouts_per_segment: int = 21
    model_out_channels: int = 1
    model_init_scale: float = 0.01
    learning_rate: float = 3e-4
    l2_penalty: float = 150.0
    epochs_per_update: int = 3
    temporal_decay_base: float = 0.85

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls()
        stream = raw.get("stream", {})
        cfg.stream = StreamConfig(
            seed=int(stream.get("seed", 7)),
            segments=int(stream.get("segments", 4)),
            frames_per_segment=int(stream.get("frames_per_segment", 31)),
            channels=int(stream.get("channels", 16)),
            height=int(stream.get("height", 16)),
            width=int(stream.get("width", 16)),
            noise_sigma=float(stream.get("noise_sigma", 0.15)),
            gradual=bool(stream.get("gradual", False)),
            manifest=stream.get("manifest"),
        )
        methods = raw.get("methods")
        if not methods:
            raise ContractViolation("config must list at least one method")
        cfg.methods = []
        for entry in methods:
            name = entry.get("name")
            if name not in {m.value for m in Method}:
                raise ContractViolation(f"unknown method {name!r}")
            clamp = entry.get("gate_clamp", (0.1, 0.55))
            cfg.methods.append(
                MethodEntry(
                    name=name,
                    label=entry.get("label"),
                    mas_gamma=float(entry.get("mas_gamma", 0.0)),
                    xi_lower=float(entry.get("xi_lower", 0.07)),
                    xi_upper=float(entry.get("xi_upper", 0.15)),
                    gate_percentile=float(entry.get("gate_percentile", 99.5)),
                    gate_clamp=(float(clamp[0]), float(clamp[1])),
                    memory_interval=(
                        int(entry["memory_interval"]) if "memory_interval" in entry else None
                    ),
                )
            )
        sweep = raw.get("sweep", {})
        cfg.deltas = [int(d) for d in sweep.get("deltas", DEFAULT_DELTAS)]
        cfg.memory_sizes = [int(n) for n in sweep.get("memory_sizes", [32])]
        cfg.gate_capacities = [int(p) for p in sweep.get("gate_capacities", [])]
        cfg.seeds = [int(s) for s in sweep.get("seeds", DEFAULT_SEEDS)]
        if not cfg.deltas or not cfg.memory_sizes or not cfg.seeds:
            raise ContractViolation("sweep axes must be nonempty")

        model = raw.get("model", {})
        cfg.model_out_channels = int(model.get("out_channels", 1))
        cfg.model_init_scale = float(model.get("init_scale", 0.01))
        training = raw.get("training", {})
        cfg.learning_rate = float(training.get("learning_rate", 3e-4))
        cfg.l2_penalty = float(training.get("l2_penalty", 150.0))
        cfg.epochs_per_update = int(training.get("epochs_per_update", 3))
        cfg.temporal_decay_base = float(training.get("temporal_decay_base", 0.85))
        cfg.holdouts_per_segment = int(raw.get("evaluation", {}).get("holdouts_per_segment", 21))
        cfg.out_dir = raw.get("output", {}).get("dir", "driftgate-results")
        return cfg


def load_config_file(path) -> ExperimentConfig:
    """Parse a TOML (or JSON) experiment config file."""
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        head = fh.read()
    text = head.decode("utf-8")
    if text.lstrip().startswith("{"):
        raw = json.loads(text)
    else:
        raw = tomllib.loads(text)
    return ExperimentConfig.from_dict(raw)


@dataclass
class GridPoint:
    index: int
    method: MethodEntry
    delta: int
    memory_size: int
    gate_capacity: Optional[int]
    seed: int


@dataclass
class ResultRow:
    point: GridPoint
    status: str = "ok"
    mean_jaccard: Optional[float] = None
    forgetting: Optional[float] = None
    frozen_final_fraction: Optional[float] = None
    frozen_peak_fraction: Optional[float] = None
    updates: int = 0
    runtime_ms: float = 0.0
    error: str = ""
    jaccard_std_over_deltas: Optional[float] = None  # filled per group after the sweep
    reports: list = field(default_factory=list, repr=False)


def _mix_seed(stream_seed: int, run_seed: int) -> int:
    return (stream_seed * 1_000_003 + run_seed) & 0xFFFFFFFFFFFFFFFF


def _build_stream(cfg: ExperimentConfig, run_seed: int):
    if cfg.stream.manifest:
        return ManifestStream(cfg.stream.manifest)
    spec = build_drift_spec(
        seed=_mix_seed(cfg.stream.seed, run_seed),
        n_segments=cfg.stream.segments,
        frames_per_segment=cfg.stream.frames_per_segment,
        feature_dims=(cfg.stream.channels, cfg.stream.height, cfg.stream.width),
        noise_sigma=cfg.stream.noise_sigma,
        gradual=cfg.stream.gradual,
    )
    return DriftStream(spec)


def _method_config(cfg: ExperimentConfig, point: GridPoint) -> MethodConfig:
    entry = point.method
    return MethodConfig(
        method=Method(entry.name),
        update_interval=point.delta,
        memory_interval=entry.memory_interval or point.delta,
        memory_capacity=point.memory_size,
        model_out_channels=cfg.model_out_channels,
        model_init_scale=cfg.model_init_scale,
        loss=LossConfig(
            l2_penalty=cfg.l2_penalty,
            epochs_per_update=cfg.epochs_per_update,
            learning_rate=cfg.learning_rate,
            temporal_decay_base=cfg.temporal_decay_base,
        ),
        gate_percentile=entry.gate_percentile,
        gate_clamp=entry.gate_clamp,
        xi_lower=entry.xi_lower,
        xi_upper=entry.xi_upper,
        gate_capacity=point.gate_capacity,
        mas_gamma=entry.mas_gamma,
    )


def enumerate_grid(cfg: ExperimentConfig) -> list[GridPoint]:
    """Canonical run order; the gate-capacity axis applies to gate methods only."""
    points = []
    idx = 0
    for entry in cfg.methods:
        uses_gate = entry.name in (Method.GRCL.value, Method.HYBRID.value)
        capacities = cfg.gate_capacities if (uses_gate and cfg.gate_capacities) else [None]
        for n in cfg.memory_sizes:
            for p in capacities:
                for delta in cfg.deltas:
                    for seed in cfg.seeds:
                        points.append(GridPoint(idx, entry, delta, n, p, seed))
                        idx += 1
    return points


def execute_point(cfg: ExperimentConfig, point: GridPoint) -> ResultRow:
    row = ResultRow(point=point)
    try:
        stream = _build_stream(cfg, point.seed)
        method_cfg = _method_config(cfg, point)
        result = run_stream(stream, method_cfg, seed=point.seed)
        matrix = evaluate_run(stream, result, cfg.holdouts_per_segment)
        k = result.param_count
        frozen = [r.frozen_count for r in result.reports]
        row.mean_jaccard = retrospective_jaccard(matrix)
        row.forgetting = forgetting_score(matrix) if matrix.shape[1] >= 2 else None
        row.frozen_final_fraction = frozen[-1] / k if k else 0.0
        row.frozen_peak_fraction = max(frozen) / k if k else 0.0
        row.updates = len(result.reports)
        row.runtime_ms = result.duration_ms
        row.reports = [r.to_record() for r in result.reports]
    except Exception as exc:  # isolate grid points; a sweep must not lose finished work
        row.status = "failed"
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def _fill_delta_spread(rows: list[ResultRow]) -> None:
    groups: dict[tuple, list[ResultRow]] = {}
    for row in rows:
        key = (row.point.method.key, row.point.memory_size, row.point.gate_capacity, row.point.seed)
        groups.setdefault(key, []).append(row)
    for group in groups.values():
        values = [r.mean_jaccard for r in group if r.status == "ok" and r.mean_jaccard is not None]
        spread = float(np.std(values)) if len(values) > 1 else (0.0 if values else None)
        for r in group:
            r.jaccard_std_over_deltas = spread


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results_csv(rows: list[ResultRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            p = row.point
            writer.writerow(
                [
                    p.method.key,
                    p.delta,
                    p.method.memory_interval or p.delta,
                    p.memory_size,
                    _fmt(p.gate_capacity),
                    p.seed,
                    row.status,
                    _fmt(row.mean_jaccard),
                    _fmt(row.jaccard_std_over_deltas),
                    _fmt(row.forgetting),
                    _fmt(row.frozen_final_fraction),
                    _fmt(row.frozen_peak_fraction),
                    row.updates,
                    row.error,
                ]
            )


def write_metrics_jsonl(rows: list[ResultRow], path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            p = row.point
            identity = {
                "method": p.method.key,
                "delta": p.delta,
                "memory_capacity": p.memory_size,
                "gate_capacity": p.gate_capacity,
                "seed": p.seed,
            }
            fh.write(
                json.dumps(
                    {
                        "type": "run",
                        **identity,
                        "status": row.status,
                        "runtime_ms": row.runtime_ms,
                        "error": row.error,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
            for report in row.reports:
                fh.write(
                    json.dumps({"type": "report", **identity, **report}, sort_keys=True) + "\n"
                )


def summarize(rows: list[ResultRow]) -> dict:
    """Per-method mean Jaccard, mean spread across the delta grid, forgetting."""
    methods: dict[str, dict] = {}
    by_method: dict[str, list[ResultRow]] = {}
    for row in rows:
        by_method.setdefault(row.point.method.key, []).append(row)
    for name, group in sorted(by_method.items()):
        ok = [r for r in group if r.status == "ok"]
        per_group_spreads = [
            s for _, s in {
                (r.point.memory_size, r.point.gate_capacity, r.point.seed): r.jaccard_std_over_deltas
                for r in ok
            }.items()
            if s is not None
        ]
        methods[name] = {
            "rows": len(group),
            "failed": len(group) - len(ok),
            "mean_jaccard": float(np.mean([r.mean_jaccard for r in ok])) if ok else None,
            "delta_std": float(np.mean(per_group_spreads)) if per_group_spreads else None,
            "mean_forgetting": (
                float(np.mean([r.forgetting for r in ok if r.forgetting is not None]))
                if any(r.forgetting is not None for r in ok)
                else None
            ),
        }
    return {"methods": methods, "total_rows": len(rows)}


@dataclass
class ExperimentResult:
    rows: list[ResultRow]
    summary: dict
    out_dir: str
    results_csv: str
    metrics_jsonl: str
    summary_json: str


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: Optional[str] = None,
    jobs: int = 1,
    progress: Optional[Callable[[int, int], None]] = None,
) -> ExperimentResult:
    """Execute the full grid and write the three result tiers.

    The DG_SEED environment variable (comma-separated integers) overrides
    the config's seed list. Failed grid points become failed rows; the rest
    of the sweep continues.
    """
    env_seed = os.environ.get("DG_SEED")
    if env_seed:
        cfg = replace(cfg, seeds=[int(s) for s in env_seed.split(",") if s.strip()])
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)

    points = enumerate_grid(cfg)
    rows: list[Optional[ResultRow]] = [None] * len(points)
    done = 0
    if jobs <= 1:
        for point in points:
            rows[point.index] = execute_point(cfg, point)
            done += 1
            if progress:
                progress(done, len(points))
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for row in pool.map(lambda pt: execute_point(cfg, pt), points):
                rows[row.point.index] = row
                done += 1
                if progress:
                    progress(done, len(points))
    final_rows = [r for r in rows if r is not None]
    _fill_delta_spread(final_rows)

    results_csv = os.path.join(out_dir, "results.csv")
    metrics_jsonl = os.path.join(out_dir, "metrics.jsonl")
    summary_json = os.path.join(out_dir, "summary.json")
    write_results_csv(final_rows, results_csv)
    write_metrics_jsonl(final_rows, metrics_jsonl)
    summary = summarize(final_rows)
    with open(summary_json, "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return ExperimentResult(final_rows, summary, out_dir, results_csv, metrics_jsonl, summary_json)


def _read_results(results_dir) -> list[dict]:
    path = os.path.join(results_dir, "results.csv")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def emit_plot_data(results_dir, kind: str) -> list[str]:
    """Write tab-separated x/y series under <results_dir>/plots; returns paths."""
    if kind not in PLOT_KINDS:
        raise ContractViolation(f"unknown plot kind {kind!r}; choose from {PLOT_KINDS}")
    plots_dir = os.path.join(results_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    written: list[str] = []

    if kind in ("delta-curve", "memory-curve", "mas-compare"):
        axis = "memory_capacity" if kind == "memory-curve" else "delta_c"
        rows = [r for r in _read_results(results_dir) if r["status"] == "ok" and r["mean_jaccard"]]
        methods = sorted({r["method"] for r in rows})
        if kind == "mas-compare":
            wanted = [m for m in ("grcl", "mas") if m in methods]
            for missing in set(("grcl", "mas")) - set(wanted):
                print(f"warning: no rows for method {missing!r}; partial output", file=sys.stderr)
            methods = wanted
        for method in methods:
            series: dict[int, list[float]] = {}
            for r in rows:
                if r["method"] != method:
                    continue
                series.setdefault(int(r[axis]), []).append(float(r["mean_jaccard"]))
            if not series:
                continue
            path = os.path.join(plots_dir, f"{kind}.{method}.tsv")
            with open(path, "w") as fh:
                fh.write(f"{axis}\tmean_jaccard\n")
                for x in sorted(series):
                    fh.write(f"{x}\t{_fmt(float(np.mean(series[x])))}\n")
            written.append(path)
        return written

    # gate-popcount: one series per gate-method run, from the report stream
    runs: dict[tuple, list[tuple[int, int]]] = {}
    metrics = os.path.join(results_dir, "metrics.jsonl")
    with open(metrics) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("type") != "report" or rec.get("gate_popcount") is None:
                continue
            key = (rec["method"], rec["delta"], rec["memory_capacity"],
                   rec["gate_capacity"], rec["seed"])
            runs.setdefault(key, []).append((rec["update_step"], rec["gate_popcount"]))
    if not runs:
        print("warning: no gate-method reports found; nothing to plot", file=sys.stderr)
    for (method, delta, n, p, seed), points in sorted(runs.items()):
        tag = f"{method}.d{delta}.n{n}.p{'dyn' if p is None else p}.s{seed}"
        path = os.path.join(plots_dir, f"gate-popcount.{tag}.tsv")
        with open(path, "w") as fh:
            fh.write("update_step\tgate_popcount\n")
            for step, pop in sorted(points):
                fh.write(f"{step}\t{pop}\n")
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# Self-verification: independent oracles for the three load-bearing numerics.


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _finite_difference_grad(fn, weights: np.ndarray, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(weights)
    flat = weights.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * step)
    return grad


def _projected_gradient_lasso(d: np.ndarray, y: np.ndarray, lam: float,
                              tol: float = 1e-10, max_iter: int = 200_000) -> np.ndarray:
    """Independent solver: projected gradient with a fixed 1/L step."""
    lip = float(np.linalg.norm(d, 2)) ** 2
    if lip == 0.0:
        return np.zeros(d.shape[1])
    step = 1.0 / lip
    psi = np.zeros(d.shape[1])
    for _ in range(max_iter):
        grad = d.T @ (d @ psi - y) + lam
        nxt = np.maximum(0.0, psi - step * grad)
        if np.max(np.abs(nxt - psi)) < tol:
            return nxt
        psi = nxt
    return psi


def _lasso_objective(d, y, lam, psi) -> float:
    r = y - d @ psi
    return 0.5 * float(r @ r) + lam * float(psi.sum())


def check_memory_accounting() -> CheckResult:
    unit = unit_size_bits((512, 30, 52), (30, 52), 64)
    gate = gate_unit_size_bits((512, 16, 3, 3))
    ratio = unit / gate
    expected_unit = 512 * 30 * 52 * 64 + 30 * 52  # independent integer arithmetic
    ok = unit == expected_unit and gate == 512 * 16 * 9 and abs(ratio - 693.35) <= 0.01
    return CheckResult(
        "memory-accounting",
        ok,
        f"unit={unit} bits, gate={gate} bits, ratio={ratio:.4f} (target 693.35 +/- 0.01)",
    )


def check_gradients(instances: int = 10, seed: int = 2024) -> CheckResult:
    worst = 0.0
    rng = Rng(seed)
    for i in range(instances):
        sub = rng.substream(i)
        c_in = int(sub.integers(1, 3))
        c_out = int(sub.integers(1, 3))
        h = w = int(sub.integers(3, 5))
        model = TargetModel(sub.normal(0, 0.5, (c_out, c_in, 3, 3)))
        cfg = LossConfig(l2_penalty=float(sub.uniform(0, 0.01)))
        batch = []
        for _ in range(2):
            feat = FeatureGrid(sub.normal(0, 1, (c_in, h, w)))
            mask = MaskGrid((sub.uniform(0, 1, (h, w)) > 0.5).astype(float), MaskKind.BINARY_LABEL)
            batch.append(WeightedSample(feat, mask, float(sub.uniform(0.2, 1.0)), pixel_weights(mask)))
        _, grad = loss_and_grad(model, batch, cfg)
        fd = _finite_difference_grad(lambda: loss_and_grad(model, batch, cfg)[0], model.weights)
        scale = np.maximum(np.abs(fd), 1e-8)
        rel = np.abs(grad - fd) / scale
        worst = max(worst, float(rel[np.abs(grad) > 1e-8].max(initial=0.0)))

        prev = model.weights + sub.normal(0, 0.1, model.weights.shape)
        omega = np.abs(sub.normal(0, 1, model.weights.shape))
        gamma = 0.7
        pen_grad = mas_penalty_grad(model.weights, prev, omega, gamma)
        pen_fd = _finite_difference_grad(
            lambda: gamma * float(np.sum(omega * (model.weights - prev) ** 2)), model.weights
        )
        worst = max(worst, float(np.max(np.abs(pen_grad - pen_fd) / np.maximum(np.abs(pen_fd), 1e-6))))
    ok = worst < 1e-4
    return CheckResult("gradient-oracle", ok, f"worst relative error {worst:.3e} (limit 1e-4)")


def check_lasso_kkt(problems: int = 25, seed: int = 77) -> CheckResult:
    rng = Rng(seed)
    worst_kkt = 0.0
    worst_gap = 0.0
    for i in range(problems):
        sub = rng.substream(i)
        n = int(sub.integers(4, 33))
        m = int(sub.integers(1, 17))
        d = sub.normal(0, 1, (n, m))
        y = sub.normal(0, 1, n)
        lam = float(sub.uniform(0.01, 1.0))
        psi = solve_nn_lasso(LassoProblem(d, y, lam))
        resid_corr = d.T @ (y - d @ psi)
        active = psi > 0
        if active.any():
            worst_kkt = max(worst_kkt, float(np.abs(resid_corr[active] - lam).max()))
        if (~active).any():
            worst_kkt = max(worst_kkt, float(np.maximum(resid_corr[~active] - lam, 0).max()))
        oracle = _projected_gradient_lasso(d, y, lam)
        gap = abs(_lasso_objective(d, y, lam, psi) - _lasso_objective(d, y, lam, oracle))
        worst_gap = max(worst_gap, gap)
    ok = worst_kkt < 1e-6 and worst_gap < 1e-6
    return CheckResult(
        "lasso-kkt",
        ok,
        f"worst KKT violation {worst_kkt:.3e}, worst objective gap {worst_gap:.3e} (limits 1e-6)",
    )


def run_verification() -> list[CheckResult]:
    """The oracle suite behind the `verify` command."""
    return [check_memory_accounting(), check_gradients(), check_lasso_kkt()]
