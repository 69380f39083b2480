"""
Database Initialization Script

Creates the registry tables for an output directory.
"""

import logging
import sys
from pathlib import Path

from database import Base, database_url, get_engine
import models  # noqa: F401

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)


def init_database(out_dir: str = "out") -> bool:
    """Create all registry tables."""
    try:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        url = database_url(out_dir)
        logger.info(f"Creating registry tables at {url}...")
        Base.metadata.create_all(bind=get_engine(url))
        logger.info("Registry tables created successfully!")
        return True
    except Exception as e:
        logger.error(f"Error creating registry tables: {str(e)}")
        return False


if __name__ == "__main__":
    success = init_database(sys.argv[1] if len(sys.argv) > 1 else "out")
    sys.exit(0 if success else 1)
