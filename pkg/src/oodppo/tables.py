"""RFC-4180 CSV output with a header row."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Mapping, Sequence


def cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "item"):  # numpy scalar
        return cell(value.item())
    return str(value)


def write_csv(path: Path | str, columns: Sequence[str], rows: Iterable[Mapping | Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            values = [row[c] for c in columns] if isinstance(row, Mapping) else list(row)
            writer.writerow([cell(v) for v in values])


def read_csv(path: Path | str) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
