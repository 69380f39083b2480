"""
Database Models

SQLAlchemy ORM models for the run registry: produced artifacts and stage runs.
"""

from sqlalchemy import Column, DateTime, Integer, String, Text, UniqueConstraint
from sqlalchemy.sql import func

from database import Base


class Artifact(Base):
    """
    Artifact model - one row per produced file, addressed by (kind, key).
    """
    __tablename__ = "artifacts"
    __table_args__ = (UniqueConstraint("kind", "key", name="uq_artifact_kind_key"),)

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(String, nullable=False, index=True)  # 'surface', 'calendar', 'cco', 'epi', ...
    key = Column(String, nullable=False)  # e.g. 'gqrm:0.9', 'reanalysis:q0.9_base'
    path = Column(String, nullable=False)
    sha256 = Column(String(64), nullable=False)
    config_hash = Column(String(64), nullable=False)
    seed = Column(Integer, nullable=False)
    git_revision = Column(String, nullable=False, default="unknown")
    sources = Column(Text, nullable=False, default="{}")  # JSON: source name -> sha256 at build time

    created_at = Column(DateTime, server_default=func.now(), onupdate=func.now())

    def __repr__(self):
        return f"<Artifact {self.kind}/{self.key} -> {self.path}>"


class StageRun(Base):
    """
    Stage run model - last outcome of each pipeline stage.
    """
    __tablename__ = "stage_runs"

    id = Column(Integer, primary_key=True, index=True)
    stage = Column(String, nullable=False, unique=True)
    last_run_time = Column(DateTime, nullable=False)
    last_run_status = Column(String, nullable=False)  # 'success', 'failed', 'skipped'
    error_message = Column(Text, nullable=True)
    records_written = Column(Integer, default=0)
    config_hash = Column(String(64), nullable=True)
    seed = Column(Integer, nullable=True)

    def __repr__(self):
        return f"<StageRun {self.stage}: {self.last_run_status}>"
