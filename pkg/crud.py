"""
CRUD Operations

Registry reads and writes for artifacts and stage runs.
"""

from datetime import datetime
from typing import List, Optional

from sqlalchemy.orm import Session

import models


def get_artifact(db: Session, kind: str, key: str) -> Optional[models.Artifact]:
    """
    Get a registered artifact.

    Args:
        db: Database session
        kind: Artifact kind ('surface', 'calendar', ...)
        key: Artifact key within the kind

    Returns:
        Artifact model or None if not registered
    """
    return db.query(models.Artifact).filter(
        models.Artifact.kind == kind,
        models.Artifact.key == key
    ).first()


def get_artifacts(db: Session, kind: Optional[str] = None) -> List[models.Artifact]:
    """
    Get registered artifacts, optionally of one kind, ordered by kind and key.
    """
    query = db.query(models.Artifact)
    if kind is not None:
        query = query.filter(models.Artifact.kind == kind)
    return query.order_by(models.Artifact.kind, models.Artifact.key).all()


def create_or_update_artifact(db: Session, artifact_data: dict) -> models.Artifact:
    """
    Register a new artifact or update the existing (kind, key) row.

    Args:
        db: Database session
        artifact_data: Dictionary with artifact fields

    Returns:
        Artifact model
    """
    existing = get_artifact(db, artifact_data["kind"], artifact_data["key"])

    if existing:
        for key, value in artifact_data.items():
            setattr(existing, key, value)
        existing.created_at = datetime.now()
        db.commit()
        db.refresh(existing)
        return existing

    artifact = models.Artifact(**artifact_data)
    db.add(artifact)
    db.commit()
    db.refresh(artifact)
    return artifact


def create_or_update_stage_run(
    db: Session,
    stage: str,
    status: str,
    records_written: int = 0,
    error_message: Optional[str] = None,
    config_hash: Optional[str] = None,
    seed: Optional[int] = None,
) -> models.StageRun:
    """
    Create or update the run record of a stage.

    Args:
        db: Database session
        stage: Stage name (e.g. 'prep', 'fit-epi')
        status: 'success', 'failed' or 'skipped'
        records_written: Number of artifacts written
        error_message: Error message if the stage failed
        config_hash: Hash of the config the stage ran with
        seed: Root seed of the run

    Returns:
        StageRun model
    """
    existing = db.query(models.StageRun).filter(models.StageRun.stage == stage).first()

    run_data = {
        "stage": stage,
        "last_run_time": datetime.now(),
        "last_run_status": status,
        "records_written": records_written,
        "error_message": error_message,
        "config_hash": config_hash,
        "seed": seed,
    }

    if existing:
        for key, value in run_data.items():
            setattr(existing, key, value)
        db.commit()
        db.refresh(existing)
        return existing

    run = models.StageRun(**run_data)
    db.add(run)
    db.commit()
    db.refresh(run)
    return run


def get_stage_run(db: Session, stage: str) -> Optional[models.StageRun]:
    return db.query(models.StageRun).filter(models.StageRun.stage == stage).first()


def get_stage_runs(db: Session) -> List[models.StageRun]:
    return db.query(models.StageRun).order_by(models.StageRun.stage).all()


def get_last_success_time(db: Session, stage: str) -> Optional[datetime]:
    """
    Get the time of the last successful run of a stage.

    Returns:
        Datetime of last success or None if it never succeeded
    """
    run = db.query(models.StageRun).filter(
        models.StageRun.stage == stage,
        models.StageRun.last_run_status == "success"
    ).first()
    return run.last_run_time if run else None
