"""Run registry for the taxis lab using Peewee ORM."""

import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

from peewee import (
    AutoField,
    CharField,
    DateTimeField,
    FloatField,
    IntegerField,
    Model,
    SqliteDatabase,
    TextField,
)

from .config import get_config

logger = logging.getLogger(__name__)


def utcnow() -> datetime:
    """Get current UTC datetime."""
    return datetime.now(timezone.utc)


class RunRecord(Model):
    """One simulate run or one convergence-matrix cell."""

    id = AutoField(primary_key=True)
    run_id = CharField(index=True)
    member = CharField(default="main")
    eps = FloatField()
    nx = IntegerField()
    ny = IntegerField()
    status = CharField(default="pending", index=True)
    diagnostic = TextField(null=True)
    output_dir = TextField(null=True)
    created_at = DateTimeField(default=utcnow, index=True)
    finished_at = DateTimeField(null=True)

    class Meta:
        # Database will be set when initialized
        table_name = "runs"


class DatabaseManager:
    """Registry of run records backed by SQLite."""

    def __init__(self, database_path: Optional[str] = None) -> None:
        """Open (and create) the registry.

        Args:
            database_path: Optional path to the SQLite file. Defaults to
                ``DATABASE_PATH`` from the environment, else ``runs.db``.
        """
        db_path = database_path or get_config().database_path or "runs.db"
        Path(db_path).parent.mkdir(parents=True, exist_ok=True)
        self.db = SqliteDatabase(db_path)

        # Set the database for the model
        RunRecord._meta.database = self.db

        self.init_database()

    def init_database(self) -> None:
        """Initialize the database with required tables."""
        if self.db:
            self.db.connect(reuse_if_open=True)
            self.db.create_tables([RunRecord], safe=True)
            logger.debug("Run registry initialized")

    def create_run(self, record_data: dict) -> int:
        """Create a pending record and return its ID."""
        record: RunRecord = RunRecord.create(**record_data)
        logger.info(f"Registered run {record.run_id}/{record.member} as #{record.id}")
        return int(record.id)

    def get_run(self, record_id: int) -> Optional["RunRecord"]:
        try:
            record: RunRecord = RunRecord.get_by_id(record_id)
            return record
        except RunRecord.DoesNotExist:
            return None

    def get_members(self, run_id: str) -> List["RunRecord"]:
        """All records of one run id in registration order."""
        return list(RunRecord.select().where(RunRecord.run_id == run_id).order_by(RunRecord.id.asc()))

    def finish_run(self, record_id: int, status: str, diagnostic: Optional[str] = None) -> bool:
        """Mark a record ``ok`` or ``failed``."""
        query = RunRecord.update(status=status, diagnostic=diagnostic, finished_at=utcnow()).where(
            RunRecord.id == record_id
        )
        rows_updated: int = query.execute()
        success = rows_updated > 0
        if success:
            logger.info(f"Run record #{record_id} finished with status {status}")
        return success


# Global database manager instance - tests can replace this directly
db_manager: Optional[DatabaseManager] = None


def get_db_manager(database_path: Optional[str] = None) -> DatabaseManager:
    """Get the global database manager, opening it at ``database_path`` on first use."""
    global db_manager
    if db_manager is None:
        db_manager = DatabaseManager(database_path)
    return db_manager


def reset_db_manager() -> None:
    """Reset the global database manager and close existing DB connection."""
    global db_manager
    if db_manager is not None and getattr(db_manager, "db", None):
        try:
            db_manager.db.close()
        except Exception:
            pass
    db_manager = None
