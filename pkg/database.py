"""
Database Configuration and Session Management

Sets up the SQLAlchemy engine and sessions for the run registry. Each output
directory carries its own SQLite registry unless HEATRISK_DATABASE_URL is set.
"""

import os
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

# Load environment variables
load_dotenv()

REGISTRY_FILE = "registry.db"

# Create base class for models
Base = declarative_base()

_engines: Dict[str, Engine] = {}


def database_url(out_dir) -> str:
    """Registry URL for an output directory; the environment override wins."""
    override = os.getenv("HEATRISK_DATABASE_URL")
    if override:
        return override
    return f"sqlite:///{Path(out_dir).resolve() / REGISTRY_FILE}"


def get_engine(url: str) -> Engine:
    if url not in _engines:
        # Only add connect_args for SQLite
        connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
        _engines[url] = create_engine(url, connect_args=connect_args, echo=False, pool_pre_ping=True)
    return _engines[url]


def dispose_engines() -> None:
    for engine in _engines.values():
        engine.dispose()
    _engines.clear()


@contextmanager
def get_db(out_dir) -> Iterator[Session]:
    """
    Session on the registry of an output directory, tables created on first use.

    Usage:
        with get_db(out) as db:
            crud.get_artifact(db, "surface", "gqrm_tau0.5")
    """
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    engine = get_engine(database_url(out_dir))
    import models  # noqa: F401  registers the tables on Base

    Base.metadata.create_all(bind=engine)
    db = sessionmaker(autocommit=False, autoflush=False, bind=engine)()
    try:
        yield db
    finally:
        db.close()
