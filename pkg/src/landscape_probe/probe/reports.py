"""CSV/JSON serialisation of experiment results.

Floats are written with ``repr`` so a re-parse reproduces them exactly and
identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

NOT_IMPLEMENTED = "n/a"
ATTACK_COLUMNS = ("PGD", "AutoAttack", "BIM", "APGD", "APGDT")
IMPLEMENTED = ("PGD", "BIM", "APGD")


def fmt(value) -> str:
    if value is None:
        return NOT_IMPLEMENTED
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse(text: str):
    if text == NOT_IMPLEMENTED:
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> tuple:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], [[parse(v) for v in r] for r in rows[1:]]


def write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
