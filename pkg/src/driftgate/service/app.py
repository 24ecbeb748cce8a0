"""FastAPI service wrapping the experiment harness.

Sweeps run as background jobs in a small worker pool; clients submit a
config, poll the job, then fetch rows or ask for plot data. The CLI is a
thin client of these endpoints.
"""

from __future__ import annotations

import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..harness import (
    ExperimentConfig,
    ExperimentResult,
    emit_plot_data,
    run_experiment,
    run_verification,
)
from .models import (
    CheckModel,
    ExperimentRequest,
    HealthResponse,
    JobInfo,
    PlotRequest,
    PlotResponse,
    ResultRowModel,
    RowsResponse,
    VerifyResponse,
)


@dataclass
class _Job:
    id: str
    state: str = "queued"
    completed: int = 0
    total: int = 0
    out_dir: Optional[str] = None
    error: Optional[str] = None
    result: Optional[ExperimentResult] = None

    def info(self) -> JobInfo:
        return JobInfo(
            id=self.id,
            state=self.state,
            completed=self.completed,
            total=self.total,
            out_dir=self.out_dir,
            error=self.error,
            summary=self.result.summary if self.result else None,
        )


class JobRegistry:
    def __init__(self, workers: int = 2):
        self._jobs: dict[str, _Job] = {}
        self._pool = ThreadPoolExecutor(max_workers=workers)
        self._lock = threading.Lock()

    def submit(self, cfg: ExperimentConfig, out_dir: Optional[str], jobs: int) -> _Job:
        job = _Job(id=uuid.uuid4().hex[:12])
        with self._lock:
            self._jobs[job.id] = job

        def progress(done: int, total: int) -> None:
            job.completed, job.total = done, total

        def work() -> None:
            job.state = "running"
            try:
                job.result = run_experiment(cfg, out_dir=out_dir, jobs=jobs, progress=progress)
                job.out_dir = job.result.out_dir
                job.state = "done"
            except Exception as exc:
                job.error = f"{type(exc).__name__}: {exc}"
                job.state = "failed"

        self._pool.submit(work)
        return job

    def get(self, job_id: str) -> _Job:
        with self._lock:
            job = self._jobs.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no such job {job_id!r}")
        return job


def create_app() -> FastAPI:
    app = FastAPI(title="driftgate", version=__version__)
    registry = JobRegistry()

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(version=__version__)

    @app.post("/experiments", response_model=JobInfo)
    def submit_experiment(request: ExperimentRequest) -> JobInfo:
        if request.config is None and request.config_toml is None:
            raise HTTPException(status_code=400, detail="provide config or config_toml")
        try:
            if request.config is not None:
                cfg = ExperimentConfig.from_dict(request.config)
            else:
                try:
                    import tomllib
                except ModuleNotFoundError:
                    import tomli as tomllib
                cfg = ExperimentConfig.from_dict(tomllib.loads(request.config_toml))
            if request.out_dir:
                cfg.out_dir = request.out_dir
        except Exception as exc:
            raise HTTPException(status_code=400, detail=f"bad config: {exc}")
        job = registry.submit(cfg, request.out_dir, request.jobs)
        return job.info()

    @app.get("/experiments/{job_id}", response_model=JobInfo)
    def job_status(job_id: str) -> JobInfo:
        return registry.get(job_id).info()

    @app.get("/experiments/{job_id}/rows", response_model=RowsResponse)
    def job_rows(job_id: str) -> RowsResponse:
        job = registry.get(job_id)
        if job.state != "done" or job.result is None:
            raise HTTPException(status_code=409, detail=f"job is {job.state}, rows not ready")
        rows = []
        for row in job.result.rows:
            p = row.point
            rows.append(
                ResultRowModel(
                    method=p.method.key,
                    delta_c=p.delta,
                    delta_m=p.method.memory_interval or p.delta,
                    memory_capacity=p.memory_size,
                    gate_capacity=p.gate_capacity,
                    seed=p.seed,
                    status=row.status,
                    mean_jaccard=row.mean_jaccard,
                    jaccard_std_over_deltas=row.jaccard_std_over_deltas,
                    forgetting=row.forgetting,
                    frozen_final_fraction=row.frozen_final_fraction,
                    frozen_peak_fraction=row.frozen_peak_fraction,
                    updates=row.updates,
                    error=row.error,
                )
            )
        return RowsResponse(rows=rows)

    @app.post("/plots", response_model=PlotResponse)
    def plots(request: PlotRequest) -> PlotResponse:
        try:
            files = emit_plot_data(request.results_dir, request.kind)
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return PlotResponse(files=files)

    @app.post("/verify", response_model=VerifyResponse)
    def verify() -> VerifyResponse:
        checks = [CheckModel(name=c.name, passed=c.passed, detail=c.detail) for c in run_verification()]
        return VerifyResponse(ok=all(c.passed for c in checks), checks=checks)

    return app
