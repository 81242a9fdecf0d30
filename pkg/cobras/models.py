from datetime import datetime
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column
from sqlalchemy import String, DateTime, Text, Float, Integer
from typing import Optional
import uuid

class Base(DeclarativeBase): pass

class Run(Base):
    """One reproduce-toy / surrogate invocation. Timestamps live here, never in the manifest."""
    __tablename__ = "runs"
    id: Mapped[str] = mapped_column(String(36), primary_key=True, default=lambda: str(uuid.uuid4()))
    experiment: Mapped[str] = mapped_column(String(32))
    config_hash: Mapped[str] = mapped_column(String(64))
    status: Mapped[str] = mapped_column(String(16), default="running")  # running | ok | failed
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
    finished_at: Mapped[Optional[datetime]] = mapped_column(DateTime, nullable=True)
    output_dir: Mapped[str] = mapped_column(Text(), default="")
    manifest_path: Mapped[str] = mapped_column(Text(), default="")
    manifest_hash: Mapped[str] = mapped_column(String(64), default="")
    cobras_error: Mapped[Optional[float]] = mapped_column(Float, nullable=True)  # headline mean normalized error
    diverged: Mapped[Optional[int]] = mapped_column(Integer, nullable=True)
    message: Mapped[Optional[str]] = mapped_column(Text(), nullable=True)
