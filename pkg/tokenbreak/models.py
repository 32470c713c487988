from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Field


class CkaReport(BaseModel):
    name_a: str
    name_b: str
    n: int
    d_a: int
    d_b: int
    cka: float = Field(ge=0.0, le=1.0)
    pooling: Optional[str] = None
    seed: Optional[int] = None


class EvalReport(BaseModel):
    episodes: int
    accuracy: float = Field(ge=0.0, le=1.0)
    ci95: float = Field(ge=0.0)
    std: float = Field(ge=0.0)
    way: int
    shot: int
    query: int
    metric: str
    seed: int


class SweepRow(BaseModel):
    grid: str
    cka: float
    feature_shift: float


class DisruptionRecord(BaseModel):
    path: str
    status: str = "failed"  # ok|failed|skipped
    message: str = ""
    output: str = ""
    index: int = 0
    method: str = ""
    stage: str = ""
    grid: Optional[str] = None
    permutation: Optional[List[int]] = None
    num_clusters: Optional[int] = None
    partner: Optional[str] = None
    resized: bool = False


class DisruptionManifest(BaseModel):
    version: str
    rng: str
    method: str
    seed: int
    epoch: int
    sim_threshold: float
    alpha: float
    granularity: str = "patch"
    grid_choices: List[str]
    warmup_epochs: int
    total_epochs: int
    records: List[DisruptionRecord] = Field(default_factory=list)

    def failed(self) -> List[DisruptionRecord]:
        return [r for r in self.records if r.status == "failed"]
