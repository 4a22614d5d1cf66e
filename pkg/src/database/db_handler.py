"""
Module: db_handler.py
Description: SQLite run registry that makes sweeps resumable.

Every finished sweep point is stored under the SHA-256 hash of its configuration, so a rerun
of an interrupted sweep skips the points that already completed and merges the stored
summaries with the new ones.

Classes:
    DatabaseHandler: Stores, looks up and removes run summaries.
"""

import json
import logging
import sqlite3
from contextlib import closing
from datetime import datetime

from src.database.artifacts import to_jsonable
from src.models.errors import PromptFolioError

logger = logging.getLogger(__name__)


class DatabaseHandler:
    """
    Manages the SQLite registry of completed runs.

    Attributes:
        db_name (str): Database file, or ':memory:'.
        connection (sqlite3.Connection): Open connection.
    """

    def __init__(self, db_name="promptfolio_runs.db"):
        """
        Opens (and creates if needed) the registry.
        """
        self.db_name = str(db_name)
        try:
            self.connection = sqlite3.connect(self.db_name, timeout=10)
        except sqlite3.OperationalError as error:
            raise PromptFolioError(f"cannot open run registry {self.db_name}: {error}") from error
        self.create_tables()
        logger.debug("run registry connected at %s", self.db_name)

    def create_tables(self):
        """
        Creates the runs table if it does not exist.
        """
        with closing(self.connection.cursor()) as cursor:
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    config_hash TEXT PRIMARY KEY,
                    axis TEXT NOT NULL,
                    axis_value REAL,
                    payload TEXT NOT NULL,
                    created TEXT NOT NULL
                );
            """)
            self.connection.commit()

    def add_run(self, config_hash, axis, axis_value, payload, created=None):
        """
        Stores the summary of a finished run, replacing an older entry with the same hash.
        """
        created = created or datetime.now().isoformat()
        document = json.dumps(to_jsonable(payload), sort_keys=True, allow_nan=False)
        with closing(self.connection.cursor()) as cursor:
            cursor.execute("""
                INSERT OR REPLACE INTO runs (config_hash, axis, axis_value, payload, created)
                VALUES (?, ?, ?, ?, ?);
            """, (config_hash, axis, axis_value, document, created))
            self.connection.commit()

    def get_run(self, config_hash):
        """
        Retrieves the stored summary of a run.
        Returns:
            dict or None: The summary, or None if the run is not registered.
        """
        with closing(self.connection.cursor()) as cursor:
            cursor.execute("SELECT payload FROM runs WHERE config_hash = ?;", (config_hash,))
            row = cursor.fetchone()
            if row:
                return json.loads(row[0])
            return None

    def has_run(self, config_hash):
        return self.get_run(config_hash) is not None

    def list_runs(self, axis=None):
        """
        Retrieves the registered runs, optionally for one sweep axis.
        Returns:
            list of dict: config_hash, axis, axis_value, created and the decoded payload.
        """
        with closing(self.connection.cursor()) as cursor:
            if axis is None:
                cursor.execute("SELECT * FROM runs ORDER BY axis, axis_value, config_hash;")
            else:
                cursor.execute("SELECT * FROM runs WHERE axis = ? ORDER BY axis_value, config_hash;", (axis,))
            rows = cursor.fetchall()
            column_names = [desc[0] for desc in cursor.description]
            runs = [dict(zip(column_names, row)) for row in rows]
        for run in runs:
            run["payload"] = json.loads(run["payload"])
        return runs

    def delete_run(self, config_hash):
        """
        Removes a run from the registry.
        """
        with closing(self.connection.cursor()) as cursor:
            cursor.execute("DELETE FROM runs WHERE config_hash = ?;", (config_hash,))
            self.connection.commit()

    def close(self):
        """
        Closes the database connection.
        """
        self.connection.close()
