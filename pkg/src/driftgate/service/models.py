"""Request/response schemas for the driftgate service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class ExperimentRequest(BaseModel):
    """Submit a sweep. Provide the config as a parsed document or raw TOML."""

    config: Optional[dict] = None
    config_toml: Optional[str] = None
    out_dir: Optional[str] = None
    jobs: int = Field(default=1, ge=1, le=64)


class JobInfo(BaseModel):
    id: str
    state: Literal["queued", "running", "done", "failed"]
    completed: int = 0
    total: int = 0
    out_dir: Optional[str] = None
    error: Optional[str] = None
    summary: Optional[dict] = None


class ResultRowModel(BaseModel):
    method: str
    delta_c: int
    delta_m: int
    memory_capacity: int
    gate_capacity: Optional[int] = None
    seed: int
    status: str
    mean_jaccard: Optional[float] = None
    jaccard_std_over_deltas: Optional[float] = None
    forgetting: Optional[float] = None
    frozen_final_fraction: Optional[float] = None
    frozen_peak_fraction: Optional[float] = None
    updates: int = 0
    error: str = ""


class RowsResponse(BaseModel):
    rows: list[ResultRowModel]


class PlotRequest(BaseModel):
    results_dir: str
    kind: Literal["delta-curve", "memory-curve", "gate-popcount", "mas-compare"]


class PlotResponse(BaseModel):
    files: list[str]


class CheckModel(BaseModel):
    name: str
    passed: bool
    detail: str


class VerifyResponse(BaseModel):
    ok: bool
    checks: list[CheckModel]


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str
