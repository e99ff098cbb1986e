"""Pydantic request/response models for the experiment service."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, Field


class CostTableRequest(BaseModel):
    dims: list[int] = Field(default=[5, 10, 100, 10000], min_length=1)


class SvdAnalyzeRequest(BaseModel):
    rows: int = 64
    cols: int = 48
    spectrum: Literal["geometric", "power"] = "geometric"
    keep_frac: Optional[float] = None
    matrix: Optional[list[list[float]]] = None


class BandwidthRequest(BaseModel):
    m: int = 3072
    n: int = 768
    t: int = 30
    batch: int = 10
    ratios: list[float] = Field(
        default=[0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], min_length=1
    )


class PipelineRunRequest(BaseModel):
    config_text: str = ""
    rounds: int = 2
    tolerance: float = 1e-9
    seed: Optional[int] = None  # overrides the config's seed when set


class VerifyDemoRequest(BaseModel):
    base: int = 16
    n_digits: int = 4
    f_values: list[int] = Field(default=[6, 8, 10], min_length=1)
    rows: int = 64
    cols: int = 32
    n_workers: int = 1
    tamper: float = 0.0
    seed: int = 0


class TableModel(BaseModel):
    columns: list[str]
    rows: list[list[Any]]


class ExperimentResponse(BaseModel):
    name: str
    ok: bool
    digest: str
    notes: list[str]
    tables: dict[str, TableModel]
    files: dict[str, str]


class HealthResponse(BaseModel):
    status: str
    version: str


class DumpConfigRequest(BaseModel):
    config_text: str = ""
    seed: Optional[int] = None


class DumpConfigResponse(BaseModel):
    canonical: str
    digest: str
