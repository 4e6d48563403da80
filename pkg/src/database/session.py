from sqlalchemy.ext.asyncio import AsyncEngine, async_sessionmaker, create_async_engine

DATABASE_URL = "sqlite+aiosqlite:///runs.sqlite3"

engine = create_async_engine(url=DATABASE_URL)

async_session = async_sessionmaker(engine, expire_on_commit=False)


def make_sessionmaker(url: str) -> tuple[AsyncEngine, async_sessionmaker]:
    """Отдельный движок для bench и тестов."""
    other = create_async_engine(url=url)
    return other, async_sessionmaker(other, expire_on_commit=False)


async def create_tables(target: AsyncEngine = engine):
    from src.database.models import Base

    async with target.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)


async def get_db():
    async with async_session() as session:
        yield session
