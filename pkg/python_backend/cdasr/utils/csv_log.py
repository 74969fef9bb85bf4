"""
CSV writers for training logs, episode logs and metric tables.
Header once, RFC-4180 quoting, flushed after every row.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Sequence, Union

from pydantic import BaseModel


class CsvLog:
    """Append-only CSV file with a fixed header."""

    def __init__(self, path: Union[str, Path], fieldnames: Sequence[str], append: bool = False) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fieldnames: List[str] = list(fieldnames)
        write_header = not (append and self.path.exists() and self.path.stat().st_size > 0)
        with self.path.open("a" if append else "w", encoding="utf-8", newline="") as fh:
            if write_header:
                csv.DictWriter(fh, fieldnames=self.fieldnames, quoting=csv.QUOTE_MINIMAL).writeheader()

    def append(self, row: Union[Mapping[str, Any], BaseModel]) -> None:
        record = row.model_dump() if isinstance(row, BaseModel) else dict(row)
        with self.path.open("a", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.fieldnames, quoting=csv.QUOTE_MINIMAL)
            writer.writerow({key: _format(record.get(key)) for key in self.fieldnames})

    def extend(self, rows: Iterable[Union[Mapping[str, Any], BaseModel]]) -> None:
        for row in rows:
            self.append(row)


def _format(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(path: Union[str, Path], fieldnames: Sequence[str], rows: Iterable[Union[Mapping[str, Any], BaseModel]]) -> Path:
    log = CsvLog(path, fieldnames)
    log.extend(rows)
    return log.path


def read_csv(path: Union[str, Path]) -> List[dict]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
