"""Pydantic request/response models for the recommendation service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    users: int
    items: int
    hidden: int
    applied_events: int


class RecommendRequest(BaseModel):
    user: str
    k: int = Field(default=10, ge=1)


class RecommendedItem(BaseModel):
    rank: int
    item: str
    score: float


class RecommendResponse(BaseModel):
    user: str
    fallback: bool
    items: list[RecommendedItem]


class EventRequest(BaseModel):
    user: str
    item: str


class EventResponse(BaseModel):
    applied_events: int
    touched_user_row: int
    touched_source_row: Optional[int]
    touched_target_row: Optional[int]
    latency_us: float


class StepResponse(BaseModel):
    user: str
    item: str
    rank: int
    reciprocal_rank: float
    in_top_k: bool
    fallback: bool
    latency_us: float


class MetricsResponse(BaseModel):
    events: int
    mrr: Optional[float]
    recall_at_k: Optional[float]
    k: int
    fallback_count: int
    p50_latency_us: Optional[float]
    p95_latency_us: Optional[float]
