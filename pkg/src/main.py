from contextlib import asynccontextmanager

import uvicorn
from fastapi import Depends, FastAPI, HTTPException
from fastapi.params import Query
from sqlalchemy.ext.asyncio import AsyncSession

from src.database.requests import compare_modes, delete_run_by_id, get_attempts, get_run_by_id, get_runs
from src.database.session import create_tables, get_db
from src.errors import TwinLocError
from src.evaluation import TrajectoryRecord, evaluate
from src.models import EvaluateRequest, Metrics, ModeSummary, RunOut


@asynccontextmanager
async def lifespan(app: FastAPI):
    await create_tables()
    yield


app = FastAPI(lifespan=lifespan, title="Сравнение режимов оценки траектории")


@app.get("/runs", response_model=list[RunOut], tags=["runs"])
async def list_runs(
    mode: str | None = None,
    seed: int | None = None,
    scenario: str | None = None,
    limit: int = Query(default=50, le=500),
    db: AsyncSession = Depends(get_db),
):
    return await get_runs(mode, seed, scenario, limit, db)


@app.get("/runs/{run_id}", response_model=RunOut, tags=["runs"])
async def get_one_run(run_id: int, db: AsyncSession = Depends(get_db)):
    return await get_run_by_id(run_id, db)


@app.get("/runs/{run_id}/registrations", tags=["runs"])
async def get_run_registrations(run_id: int, db: AsyncSession = Depends(get_db)):
    attempts = await get_attempts(run_id, db)
    return [
        {
            "keyframe_id": a.keyframe_id,
            "t": a.t,
            "converged": a.converged,
            "inlier_count": a.inlier_count,
            "gamma": a.gamma,
            "w_eig_min": a.w_eig_min,
            "w_eig_max": a.w_eig_max,
        }
        for a in attempts
    ]


@app.delete("/runs/{run_id}", tags=["runs"])
async def delete_run(run_id: int, db: AsyncSession = Depends(get_db)):
    return await delete_run_by_id(run_id, db)


@app.get("/compare", response_model=list[ModeSummary], tags=["runs"])
async def compare(scenario: str | None = None, db: AsyncSession = Depends(get_db)):
    return await compare_modes(scenario, db)


@app.post("/evaluate", response_model=Metrics, tags=["evaluation"])
async def evaluate_trajectories(body: EvaluateRequest):
    try:
        gt = TrajectoryRecord.from_rows(body.ground_truth, "W", "ground_truth")
        est = TrajectoryRecord.from_rows(body.estimate, "W", "estimate")
        return evaluate(gt, est, body.alignment_mode, body.max_dt)
    except TwinLocError as exc:
        raise HTTPException(status_code=400, detail=exc.to_dict())
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))


if __name__ == "__main__":
    uvicorn.run("src.main:app", host="127.0.0.1", port=8000, reload=True)
