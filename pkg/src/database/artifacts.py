"""
Module: artifacts.py
Description: Atomic JSON and CSV writers for run and sweep artifacts.

Every file is written to a temporary sibling first and moved into place with os.replace, so
an interrupted command never leaves a half-written artifact. JSON output is strict: NaN and
infinities are replaced by the string "nan" / "inf" / "-inf" and the caller is told so it can
flag the report.

Functions:
    to_jsonable(value): Converts numpy values and non-finite floats for strict JSON.
    write_json_atomic(path, payload): Writes a JSON document atomically.
    write_csv_atomic(path, header, rows): Writes a CSV table atomically.
    dataset_rows(datasets): CSV rows of client datasets.
    trajectory_rows(trajectories): CSV rows of coefficient trajectories.
    artifact_name(prefix, config_hash, suffix): File name embedding a config hash.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

NAN_SENTINEL = "nan"


def to_jsonable(value, sentinels: list | None = None):
    """
    Recursively converts numpy types, tuples and dataclass-free containers into strict JSON
    types. Non-finite floats become "nan", "inf" or "-inf"; each replacement appends its
    path to `sentinels` when given.
    """
    def convert(item, path):
        if isinstance(item, dict):
            return {str(key): convert(val, f"{path}.{key}") for key, val in item.items()}
        if isinstance(item, (list, tuple)):
            return [convert(val, f"{path}[{i}]") for i, val in enumerate(item)]
        if isinstance(item, np.ndarray):
            return convert(item.tolist(), path)
        if isinstance(item, (bool, np.bool_)):
            return bool(item)
        if isinstance(item, (int, np.integer)):
            return int(item)
        if isinstance(item, (float, np.floating)):
            item = float(item)
            if math.isfinite(item):
                return item
            if sentinels is not None:
                sentinels.append(path.lstrip("."))
            return NAN_SENTINEL if math.isnan(item) else ("inf" if item > 0 else "-inf")
        return item

    return convert(value, "")


def _replace_atomically(path: Path, write):
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temporary = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="") as stream:
            write(stream)
        os.replace(temporary, path)
    except BaseException:
        if os.path.exists(temporary):
            os.unlink(temporary)
        raise


def write_json_atomic(path, payload) -> list[str]:
    """
    Writes payload as strict JSON.

    Returns:
        list[str]: Paths of the values replaced by sentinels.
    """
    sentinels: list[str] = []
    document = to_jsonable(payload, sentinels)
    if sentinels:
        logger.warning("%s: %d non-finite values written as sentinels", path, len(sentinels))

    def write(stream):
        json.dump(document, stream, indent=2, sort_keys=True, allow_nan=False)
        stream.write("\n")

    _replace_atomically(Path(path), write)
    return sentinels


def _cell(value):
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return NAN_SENTINEL if math.isnan(value) else ("inf" if value > 0 else "-inf")
        return repr(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_csv_atomic(path, header, rows):
    """Writes a CSV table with a header row; floats keep their full precision."""
    def write(stream):
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])

    _replace_atomically(Path(path), write)


def artifact_name(prefix: str, config_hash: str, suffix: str) -> str:
    """Returns '<prefix>_<first 12 hash characters>.<suffix>'."""
    return f"{prefix}_{config_hash[:12]}.{suffix}"


def dataset_rows(datasets, split: str = "train") -> tuple[list, list]:
    """
    Header and rows of client datasets, one row per sample: split, client, s, y, g_0..g_{m-1}.
    """
    datasets = list(datasets)
    m = datasets[0].m if datasets else 0
    header = ["split", "client", "s", "y", *[f"g_{j}" for j in range(m)]]
    rows = []
    for data in datasets:
        for g, y in data.samples():
            rows.append([split, data.client, data.s, int(y), *g.tolist()])
    return header, rows


def trajectory_rows(trajectories, S: int, L: int) -> tuple[list, list]:
    """
    Header and rows of coefficient trajectories: round, prompt_id, beta, gamma_1..S,
    phi_1..L, residual.
    """
    header = ["round", "prompt_id", "beta", *[f"gamma_{s}" for s in range(1, S + 1)],
              *[f"phi_{l}" for l in range(1, L + 1)], "residual"]
    rows = []
    for trajectory in trajectories.values():
        rows.extend(snapshot.to_row() for snapshot in trajectory.snapshots)
    rows.sort(key=lambda row: row[0])
    return header, rows
