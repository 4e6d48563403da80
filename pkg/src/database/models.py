import datetime

from sqlalchemy import ForeignKey, func
from sqlalchemy.ext.asyncio import AsyncAttrs
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column, relationship

from src.models import AlignmentMode


class Base(AsyncAttrs, DeclarativeBase):
    pass


class RunORM(Base):
    __tablename__ = "runs"

    id: Mapped[int] = mapped_column(primary_key=True)
    created_at: Mapped[datetime.datetime] = mapped_column(server_default=func.now())
    scenario: Mapped[str] = mapped_column(index=True)
    mode: Mapped[str] = mapped_column(index=True)
    seed: Mapped[int]
    config_hash: Mapped[str]
    alignment_mode: Mapped[AlignmentMode] = mapped_column(default=AlignmentMode.none)
    ate_p_m: Mapped[float]
    ate_r_deg: Mapped[float]
    n_pairs: Mapped[int]
    registrations_attempted: Mapped[int] = mapped_column(default=0)
    registrations_converged: Mapped[int] = mapped_column(default=0)
    runtime_s: Mapped[float] = mapped_column(default=0.0)

    attempts: Mapped[list["RegistrationAttemptORM"]] = relationship(
        back_populates="run", cascade="all, delete-orphan", lazy="selectin"
    )


class RegistrationAttemptORM(Base):
    __tablename__ = "registration_attempts"

    id: Mapped[int] = mapped_column(primary_key=True)
    run_id: Mapped[int] = mapped_column(ForeignKey("runs.id", ondelete="CASCADE"), index=True)
    keyframe_id: Mapped[int | None]
    t: Mapped[float | None]
    converged: Mapped[bool]
    inlier_count: Mapped[int]
    gamma: Mapped[float]
    trace_h: Mapped[float]
    # наименьшее и наибольшее собственные значения веса
    w_eig_min: Mapped[float]
    w_eig_max: Mapped[float]

    run: Mapped[RunORM] = relationship(back_populates="attempts")
