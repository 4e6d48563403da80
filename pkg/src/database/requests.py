import math

from fastapi import HTTPException
from sqlalchemy import func, select
from sqlalchemy.ext.asyncio import AsyncSession

from src.database.models import RegistrationAttemptORM, RunORM
from src.models import ModeSummary, RunCreate, RunOut


def _finite(value) -> float:
    # inf/nan из неудачных регистраций в SQLite не кладём
    value = float(value)
    return value if math.isfinite(value) else -1.0


async def add_run(run: RunCreate, attempts: list[dict], db: AsyncSession) -> RunOut:
    new_run = RunORM(**run.model_dump())
    for row in attempts:
        eig = [row[f"w_eig_{k}"] for k in range(6)]
        new_run.attempts.append(
            RegistrationAttemptORM(
                keyframe_id=row.get("keyframe_id"),
                t=row.get("t"),
                converged=bool(row["converged"]),
                inlier_count=int(row["inlier_count"]),
                gamma=_finite(row["gamma"]),
                trace_h=_finite(row["trace_h"]),
                w_eig_min=_finite(min(eig)),
                w_eig_max=_finite(max(eig)),
            )
        )
    db.add(new_run)
    await db.flush()
    await db.refresh(new_run)
    run_out = RunOut.model_validate(new_run)
    await db.commit()
    return run_out


async def get_runs(mode, seed, scenario, limit, db: AsyncSession):
    query = select(RunORM)

    if mode:
        query = query.where(RunORM.mode == mode)
    if seed is not None:
        query = query.where(RunORM.seed == seed)
    if scenario:
        query = query.where(RunORM.scenario == scenario)

    query = query.order_by(RunORM.id).limit(limit)
    result = await db.execute(query)
    return result.scalars().all()


async def get_run_by_id(run_id: int, db: AsyncSession):
    run = await db.get(RunORM, run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Прогон не найден")
    return run


async def get_attempts(run_id: int, db: AsyncSession):
    await get_run_by_id(run_id, db)
    query = select(RegistrationAttemptORM).where(RegistrationAttemptORM.run_id == run_id)
    result = await db.execute(query.order_by(RegistrationAttemptORM.id))
    return result.scalars().all()


async def delete_run_by_id(run_id: int, db: AsyncSession):
    run = await get_run_by_id(run_id, db)
    await db.delete(run)
    await db.commit()
    return {"message": "Прогон удален"}


async def compare_modes(scenario, db: AsyncSession) -> list[ModeSummary]:
    query = select(
        RunORM.scenario,
        RunORM.mode,
        func.count(RunORM.id),
        func.avg(RunORM.ate_p_m),
        func.avg(RunORM.ate_r_deg),
    ).group_by(RunORM.scenario, RunORM.mode)
    if scenario:
        query = query.where(RunORM.scenario == scenario)
    result = await db.execute(query.order_by(RunORM.scenario, RunORM.mode))
    return [
        ModeSummary(scenario=s, mode=m, runs=n, mean_ate_p_m=p, mean_ate_r_deg=r)
        for s, m, n, p, r in result.all()
    ]
