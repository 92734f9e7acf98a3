#!/usr/bin/env python3
"""
Continual Ranking Results API Server

Read-only FastAPI service over a run root: lists completed runs, serves one run's
performance matrix, metrics and manifest, and the aggregated strategy x model report.
Nothing here starts training.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

import experiments
import runner
from config import __version__, load_settings
from metrics import PerformanceMatrix

logger = logging.getLogger(__name__)

app = FastAPI(
    title="Continual Ranking Results API",
    description="Performance matrices and transfer metrics of continual-learning runs for neural rankers",
    version=__version__,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


class RunSummary(BaseModel):
    run_id: str = Field(..., description="run directory relative to the run root")
    model: Optional[str] = None
    strategy: Optional[str] = None
    seed: Optional[int] = None
    p_final: Optional[float] = None
    bwt: Optional[float] = None
    fwt: Optional[float] = None


class RunDetail(BaseModel):
    run_id: str
    matrix: List[List[Optional[float]]]
    metrics: Dict[str, Optional[float]]
    manifest: Dict[str, Any]


def run_root() -> Path:
    return Path(load_settings().run_root)


def _finite(value: float) -> Optional[float]:
    return None if value != value else value


def _run_dir(run_id: str) -> Path:
    root = run_root().resolve()
    candidate = (root / run_id).resolve()
    if root not in candidate.parents or not (candidate / "manifest.json").is_file():
        raise HTTPException(status_code=404, detail=f"run not found: {run_id}")
    return candidate


@app.get("/")
async def root():
    """Service information"""
    return {
        "service": "Continual Ranking Results API",
        "version": __version__,
        "status": "running",
        "endpoints": {
            "health": "/health",
            "runs": "/runs",
            "run": "/runs/{run_id}",
            "report": "/report",
            "docs": "/docs",
        },
    }


@app.get("/health")
async def health_check():
    root_dir = run_root()
    return {
        "status": "healthy",
        "service": "continual-ranking-results",
        "timestamp": datetime.now().isoformat(),
        "run_root": str(root_dir),
        "run_root_exists": root_dir.is_dir(),
    }


@app.get("/runs", response_model=List[RunSummary])
async def list_runs():
    """Completed run directories below the run root with their summary metrics."""
    root_dir = run_root()
    if not root_dir.is_dir():
        return []
    try:
        runs = experiments.collect_runs(root_dir)
    except (OSError, ValueError, KeyError) as exc:
        logger.error("❌ reading runs under %s failed: %s", root_dir, exc)
        raise HTTPException(status_code=500, detail=f"unreadable run data: {exc}")
    summaries = []
    for row in runs.to_dict(orient="records"):
        summaries.append(RunSummary(
            run_id=row["run"], model=row["model"], strategy=row["strategy"], seed=int(row["seed"]),
            **{m: None if row[m] is None or row[m] != row[m] else row[m] for m in experiments.METRICS},
        ))
    return summaries


@app.get("/runs/{run_id:path}", response_model=RunDetail)
async def get_run(run_id: str):
    """Performance matrix, metrics and manifest of one run (404 if absent)."""
    run_dir = _run_dir(run_id)
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
        matrix_file = run_dir / "P_matrix.csv"
        matrix = PerformanceMatrix.from_csv(matrix_file).values.tolist() if matrix_file.is_file() else []
        metrics_file = run_dir / "metrics.txt"
        values = runner.read_metrics(metrics_file) if metrics_file.is_file() else {}
    except (OSError, ValueError) as exc:
        logger.error("❌ run %s unreadable: %s", run_id, exc)
        raise HTTPException(status_code=500, detail=f"unreadable run data: {exc}")
    return RunDetail(
        run_id=run_id,
        matrix=[[_finite(v) for v in row] for row in matrix],
        metrics=values,
        manifest=manifest,
    )


@app.get("/report")
async def report():
    """Strategy x model tables (mean ± se over seeds) plus sweep correlations."""
    try:
        built = experiments.build_report(run_root())
    except experiments.ReportError as exc:
        raise HTTPException(status_code=404, detail=exc.to_payload())
    except (OSError, ValueError, KeyError) as exc:
        logger.error("❌ report failed: %s", exc)
        raise HTTPException(status_code=500, detail=f"unreadable run data: {exc}")
    return built.to_dict()


if __name__ == "__main__":
    settings = load_settings()
    logging.basicConfig(level=settings.log_level.upper(), format=runner.LOG_FORMAT)

    print(f"\n{'=' * 80}")
    print("🚀 Continual Ranking Results API Server")
    print(f"{'=' * 80}")
    print(f"📍 Running on: http://{settings.host}:{settings.port}")
    print(f"📚 API Docs: http://{settings.host}:{settings.port}/docs")
    print(f"📂 Run root: {settings.run_root}")
    print(f"{'=' * 80}\n")

    uvicorn.run(app, host=settings.host, port=settings.port, log_level="info")
