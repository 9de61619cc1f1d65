"""
lmreg Results Service
A lightweight FastAPI service that keeps run summaries from lmreg experiments.
All data is stored locally in SQLite; nothing is sent anywhere else.
"""

import os
import json
import sqlite3
from datetime import datetime, timedelta, timezone
from typing import Optional, List
from contextlib import asynccontextmanager, contextmanager

from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

# Configuration from environment
RESULTS_ENABLED = os.getenv("RESULTS_ENABLED", "true").lower() == "true"
RESULTS_RETENTION_DAYS = int(os.getenv("RESULTS_RETENTION_DAYS", "365"))
RESULTS_MAX_RUNS = int(os.getenv("RESULTS_MAX_RUNS", "10000"))
RESULTS_DB_PATH = os.getenv("RESULTS_DB_PATH", "/data/results.sqlite")

# CORS configuration
CORS_ORIGINS = os.getenv("CORS_ORIGINS", "http://localhost:*,https://localhost:*").split(",")

RUN_COLUMNS = (
    "id", "timestamp", "command", "out_dir", "seed", "config_hash", "variant", "guidance",
    "n_pairs", "matching_error_mean", "tre_before", "tre_after", "elapsed_seconds", "metadata",
)


# Database helpers
@contextmanager
def get_db():
    """Database connection, closed on exit"""
    conn = sqlite3.connect(RESULTS_DB_PATH)
    conn.row_factory = sqlite3.Row
    try:
        yield conn
    finally:
        conn.close()


def init_db():
    directory = os.path.dirname(RESULTS_DB_PATH)
    if directory:
        os.makedirs(directory, exist_ok=True)

    with get_db() as conn:
        conn.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                timestamp TEXT NOT NULL,
                command TEXT NOT NULL,
                out_dir TEXT NOT NULL,
                seed INTEGER DEFAULT 0,
                config_hash TEXT NOT NULL,
                variant TEXT,
                guidance INTEGER,
                n_pairs INTEGER,
                matching_error_mean REAL,
                tre_before REAL,
                tre_after REAL,
                elapsed_seconds REAL DEFAULT 0,
                metadata TEXT
            )
        """)
        conn.execute("CREATE INDEX IF NOT EXISTS idx_runs_timestamp ON runs(timestamp)")
        conn.execute("CREATE INDEX IF NOT EXISTS idx_runs_command ON runs(command)")
        conn.commit()


def cleanup_old_runs():
    """Drop runs past the retention period and keep at most RESULTS_MAX_RUNS"""
    with get_db() as conn:
        cutoff = (datetime.now(timezone.utc) - timedelta(days=RESULTS_RETENTION_DAYS)).isoformat()
        conn.execute("DELETE FROM runs WHERE timestamp < ?", (cutoff,))
        conn.execute("""
            DELETE FROM runs WHERE id NOT IN (
                SELECT id FROM runs ORDER BY timestamp DESC, id DESC LIMIT ?
            )
        """, (RESULTS_MAX_RUNS,))
        conn.commit()


@asynccontextmanager
async def lifespan(app):
    if RESULTS_ENABLED:
        init_db()
        cleanup_old_runs()
    yield


app = FastAPI(
    title="lmreg Results",
    description="Local storage for lmreg run summaries",
    version="1.0.0",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=CORS_ORIGINS if CORS_ORIGINS != ["*"] else ["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def require_enabled():
    if not RESULTS_ENABLED:
        raise HTTPException(status_code=503, detail="Results storage is disabled")


# Request/Response models
class RunRecord(BaseModel):
    """Run summary as written by lmreg (summary.json)"""
    command: str = Field(..., description="simulate-pair, train, match, register, evaluate, gradcheck, report")
    out_dir: str = Field(..., description="Output directory of the run")
    seed: int = Field(default=0, ge=0)
    config_hash: str = Field(..., min_length=1, description="SHA-256 of the effective configuration")
    variant: Optional[str] = Field(default=None, description="Loss variant: hinge, ce, hinge-ce, hinge01-ce, hinge02-ce")
    guidance: Optional[bool] = Field(default=None, description="Whether landmark guidance was used")
    n_pairs: Optional[int] = Field(default=None, ge=0)
    matching_error_mean: Optional[float] = Field(default=None, ge=0, description="Mean spatial matching error in mm")
    tre_before: Optional[float] = Field(default=None, ge=0, description="Mean TRE before registration in mm")
    tre_after: Optional[float] = Field(default=None, ge=0, description="Mean TRE after registration in mm")
    elapsed_seconds: float = Field(default=0, ge=0)
    timestamp: Optional[str] = Field(default=None, description="Run time; defaults to receipt time")
    metadata: Optional[dict] = Field(default=None, description="Free-form extras")


class RunResponse(RunRecord):
    id: int
    timestamp: str


class GroupSummary(BaseModel):
    variant: Optional[str]
    guidance: Optional[bool]
    runs: int
    mean_matching_error: Optional[float]
    mean_tre_before: Optional[float]
    mean_tre_after: Optional[float]


class SummaryResponse(BaseModel):
    range: str
    total_runs: int
    groups: List[GroupSummary]


class HistoryResponse(BaseModel):
    runs: List[RunResponse]
    total: int
    limit: int
    offset: int


class ConfigResponse(BaseModel):
    enabled: bool
    retention_days: int
    max_runs: int


def _row_to_run(row: sqlite3.Row) -> RunResponse:
    data = {k: row[k] for k in RUN_COLUMNS}
    data["guidance"] = None if row["guidance"] is None else bool(row["guidance"])
    data["metadata"] = json.loads(row["metadata"]) if row["metadata"] else None
    return RunResponse(**data)


def _cutoff(range: str) -> str:
    now = datetime.now(timezone.utc)
    if range == "today":
        return now.replace(hour=0, minute=0, second=0, microsecond=0).isoformat()
    if range == "7d":
        return (now - timedelta(days=7)).isoformat()
    if range == "30d":
        return (now - timedelta(days=30)).isoformat()
    if range == "all":
        return "1970-01-01T00:00:00"
    raise HTTPException(status_code=422, detail=f"Unknown range {range!r}")


@app.get("/health")
async def health():
    return {
        "status": "ok",
        "results_enabled": RESULTS_ENABLED,
        "retention_days": RESULTS_RETENTION_DAYS,
        "max_runs": RESULTS_MAX_RUNS,
    }


@app.get("/api/runs/config", response_model=ConfigResponse)
async def get_config():
    return ConfigResponse(
        enabled=RESULTS_ENABLED,
        retention_days=RESULTS_RETENTION_DAYS,
        max_runs=RESULTS_MAX_RUNS,
    )


@app.post("/api/runs", response_model=RunResponse)
async def record_run(run: RunRecord):
    """Store one run summary"""
    require_enabled()

    timestamp = run.timestamp or datetime.now(timezone.utc).isoformat()
    with get_db() as conn:
        cursor = conn.execute("""
            INSERT INTO runs (timestamp, command, out_dir, seed, config_hash, variant, guidance,
                              n_pairs, matching_error_mean, tre_before, tre_after, elapsed_seconds, metadata)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        """, (
            timestamp,
            run.command,
            run.out_dir,
            run.seed,
            run.config_hash,
            run.variant,
            None if run.guidance is None else int(run.guidance),
            run.n_pairs,
            run.matching_error_mean,
            run.tre_before,
            run.tre_after,
            run.elapsed_seconds,
            json.dumps(run.metadata) if run.metadata else None,
        ))
        conn.commit()
        run_id = cursor.lastrowid

    cleanup_old_runs()
    return RunResponse(**{**run.model_dump(), "id": run_id, "timestamp": timestamp})


@app.get("/api/runs/summary", response_model=SummaryResponse)
async def get_summary(
    range: str = Query("all", description="Time range: 'today', '7d', '30d', 'all'")
):
    """Mean matching error and TRE before/after, grouped by loss variant and guidance"""
    require_enabled()
    cutoff = _cutoff(range)

    with get_db() as conn:
        total = conn.execute(
            "SELECT COUNT(*) AS count FROM runs WHERE timestamp >= ?", (cutoff,)
        ).fetchone()["count"]
        rows = conn.execute("""
            SELECT variant, guidance, COUNT(*) AS runs,
                   AVG(matching_error_mean) AS mean_matching_error,
                   AVG(tre_before) AS mean_tre_before,
                   AVG(tre_after) AS mean_tre_after
            FROM runs
            WHERE timestamp >= ?
            GROUP BY variant, guidance
            ORDER BY variant, guidance
        """, (cutoff,)).fetchall()

    groups = [
        GroupSummary(
            variant=row["variant"],
            guidance=None if row["guidance"] is None else bool(row["guidance"]),
            runs=row["runs"],
            mean_matching_error=row["mean_matching_error"],
            mean_tre_before=row["mean_tre_before"],
            mean_tre_after=row["mean_tre_after"],
        )
        for row in rows
    ]
    return SummaryResponse(range=range, total_runs=total, groups=groups)


@app.get("/api/runs/history", response_model=HistoryResponse)
async def get_history(
    limit: int = Query(50, ge=1, le=500, description="Number of runs to return"),
    offset: int = Query(0, ge=0, description="Offset for pagination"),
    command: Optional[str] = Query(None, description="Filter by command"),
    variant: Optional[str] = Query(None, description="Filter by loss variant"),
):
    """Paginated run history, newest first"""
    require_enabled()

    clauses, params = [], []
    if command:
        clauses.append("command = ?")
        params.append(command)
    if variant:
        clauses.append("variant = ?")
        params.append(variant)
    where_clause = f"WHERE {' AND '.join(clauses)}" if clauses else ""

    with get_db() as conn:
        total = conn.execute(f"SELECT COUNT(*) AS count FROM runs {where_clause}", params).fetchone()["count"]
        rows = conn.execute(f"""
            SELECT {', '.join(RUN_COLUMNS)} FROM runs {where_clause}
            ORDER BY timestamp DESC, id DESC
            LIMIT ? OFFSET ?
        """, params + [limit, offset]).fetchall()

    return HistoryResponse(runs=[_row_to_run(r) for r in rows], total=total, limit=limit, offset=offset)


@app.delete("/api/runs/history")
async def clear_history(command: Optional[str] = Query(None, description="Only clear runs of this command")):
    require_enabled()

    with get_db() as conn:
        if command:
            cursor = conn.execute("DELETE FROM runs WHERE command = ?", (command,))
        else:
            cursor = conn.execute("DELETE FROM runs")
        conn.commit()
        deleted = cursor.rowcount

    return {"success": True, "deleted": deleted}


@app.get("/api/runs/export")
async def export_history():
    """All runs as JSON"""
    require_enabled()

    with get_db() as conn:
        rows = conn.execute(f"SELECT {', '.join(RUN_COLUMNS)} FROM runs ORDER BY timestamp DESC, id DESC").fetchall()
    runs = [_row_to_run(r).model_dump() for r in rows]

    return {
        "exported_at": datetime.now(timezone.utc).isoformat(),
        "total_runs": len(runs),
        "runs": runs,
    }


@app.get("/api/runs/{run_id}", response_model=RunResponse)
async def get_run(run_id: int):
    require_enabled()
    with get_db() as conn:
        row = conn.execute(f"SELECT {', '.join(RUN_COLUMNS)} FROM runs WHERE id = ?", (run_id,)).fetchone()
    if row is None:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return _row_to_run(row)


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=int(os.getenv("RESULTS_PORT", "8092")))
