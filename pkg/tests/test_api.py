import pytest
from fastapi import status
from httpx import ASGITransport, AsyncClient
from sqlalchemy.ext.asyncio import async_sessionmaker, create_async_engine
from sqlalchemy.pool import StaticPool

from src.database.models import Base
from src.database.requests import add_run
from src.database.session import get_db
from src.main import app
from src.models import AlignmentMode, RunCreate

DATABASE_URL = "sqlite+aiosqlite:///:memory:"


@pytest.fixture()
async def sessionmaker():
    # одна in-memory база на тест
    engine = create_async_engine(DATABASE_URL, poolclass=StaticPool, connect_args={"check_same_thread": False})
    async with engine.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)
    yield async_sessionmaker(engine, expire_on_commit=False)
    await engine.dispose()


@pytest.fixture()
async def client(sessionmaker):
    async def override():
        async with sessionmaker() as session:
            yield session

    app.dependency_overrides[get_db] = override
    transport = ASGITransport(app=app)
    async with AsyncClient(transport=transport, base_url="http://test") as ac:
        yield ac
    app.dependency_overrides.clear()


def attempt(keyframe_id, converged=True, gamma=0.1):
    row = {
        "keyframe_id": keyframe_id,
        "t": 0.3 * keyframe_id,
        "converged": converged,
        "inlier_count": 150 if converged else 0,
        "gamma": gamma,
        "trace_h": 2.0e3,
    }
    row.update({f"w_eig_{k}": float(k) for k in range(6)})
    return row


def run_row(mode="vio-twin", seed=0, ate_p=1.0, scenario="canyon"):
    return RunCreate(
        scenario=scenario,
        mode=mode,
        seed=seed,
        config_hash="abc123",
        alignment_mode=AlignmentMode.none,
        ate_p_m=ate_p,
        ate_r_deg=ate_p / 2,
        n_pairs=100,
        registrations_attempted=2,
        registrations_converged=1,
    )


@pytest.fixture()
async def runs(sessionmaker):
    stored = []
    async with sessionmaker() as db:
        stored.append(await add_run(run_row(seed=0, ate_p=1.0), [attempt(3), attempt(4, False, float("inf"))], db))
        stored.append(await add_run(run_row(seed=1, ate_p=3.0), [], db))
        stored.append(await add_run(run_row(mode="vio-gps", ate_p=8.0), [], db))
    return stored


async def test_list_runs_empty(client):
    response = await client.get("/runs")
    assert response.status_code == status.HTTP_200_OK
    assert response.json() == []


async def test_list_runs_with_filters(client, runs):
    response = await client.get("/runs")
    assert [r["id"] for r in response.json()] == [r.id for r in runs]

    response = await client.get("/runs", params={"mode": "vio-twin"})
    assert {r["seed"] for r in response.json()} == {0, 1}

    response = await client.get("/runs", params={"mode": "vio-twin", "seed": 1})
    body = response.json()
    assert len(body) == 1
    assert body[0]["ate_p_m"] == 3.0

    response = await client.get("/runs", params={"limit": 1000})
    assert response.status_code == status.HTTP_422_UNPROCESSABLE_ENTITY


async def test_get_run_and_missing_run(client, runs):
    response = await client.get(f"/runs/{runs[0].id}")
    assert response.status_code == status.HTTP_200_OK
    assert response.json()["config_hash"] == "abc123"
    assert response.json()["alignment_mode"] == "none"

    response = await client.get("/runs/9999")
    assert response.status_code == status.HTTP_404_NOT_FOUND
    assert response.json()["detail"] == "Прогон не найден"


async def test_run_registrations(client, runs):
    response = await client.get(f"/runs/{runs[0].id}/registrations")
    assert response.status_code == status.HTTP_200_OK
    body = response.json()
    assert [a["keyframe_id"] for a in body] == [3, 4]
    assert body[0]["converged"] is True
    assert body[0]["w_eig_min"] == 0.0
    assert body[0]["w_eig_max"] == 5.0
    # бесконечный γ неудачной регистрации хранится как -1
    assert body[1]["gamma"] == -1.0

    response = await client.get("/runs/9999/registrations")
    assert response.status_code == status.HTTP_404_NOT_FOUND


async def test_delete_run(client, runs):
    response = await client.delete(f"/runs/{runs[0].id}")
    assert response.status_code == status.HTTP_200_OK
    assert response.json() == {"message": "Прогон удален"}

    response = await client.get(f"/runs/{runs[0].id}")
    assert response.status_code == status.HTTP_404_NOT_FOUND
    response = await client.delete(f"/runs/{runs[0].id}")
    assert response.status_code == status.HTTP_404_NOT_FOUND


async def test_compare_modes(client, runs):
    response = await client.get("/compare")
    assert response.status_code == status.HTTP_200_OK
    summary = {row["mode"]: row for row in response.json()}
    assert summary["vio-twin"]["runs"] == 2
    assert summary["vio-twin"]["mean_ate_p_m"] == pytest.approx(2.0)
    assert summary["vio-gps"]["mean_ate_r_deg"] == pytest.approx(4.0)

    response = await client.get("/compare", params={"scenario": "single_facade"})
    assert response.json() == []


def pose_rows(times, dx=0.0):
    return [{"t": t, "x": t + dx, "y": 2.0 * t, "z": 1.0} for t in times]


async def test_evaluate_endpoint(client):
    times = [0.0, 0.1, 0.2, 0.3]
    body = {"ground_truth": pose_rows(times), "estimate": pose_rows(times, dx=0.5)}
    response = await client.post("/evaluate", json=body)
    assert response.status_code == status.HTTP_200_OK
    metrics = response.json()
    assert metrics["ate_p_m"] == pytest.approx(0.5)
    assert metrics["ate_r_deg"] == pytest.approx(0.0, abs=1e-9)
    assert metrics["n_pairs"] == 4


async def test_evaluate_rejects_bad_input(client):
    times = [0.0, 0.1, 0.2]
    unpaired = {"ground_truth": pose_rows(times), "estimate": pose_rows([5.0, 5.1, 5.2])}
    response = await client.post("/evaluate", json=unpaired)
    assert response.status_code == status.HTTP_400_BAD_REQUEST
    assert response.json()["detail"]["error"] == "empty_pairing"

    unordered = {"ground_truth": pose_rows([0.0, 0.2, 0.1]), "estimate": pose_rows(times)}
    response = await client.post("/evaluate", json=unordered)
    assert response.status_code == status.HTTP_400_BAD_REQUEST

    response = await client.post("/evaluate", json={"ground_truth": pose_rows(times)})
    assert response.status_code == status.HTTP_422_UNPROCESSABLE_ENTITY
