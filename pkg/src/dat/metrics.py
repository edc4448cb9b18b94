"""Structured metrics records and their JSON / CSV serializations."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1
CSV_FIELDS = ("schema", "run", "config_hash", "step", "metric", "value")


@dataclass
class MetricsRecord:
    run: str
    config_hash: str
    step: int
    metrics: dict
    started: float = 0.0
    finished: float = 0.0
    extra: dict = field(default_factory=dict)
    schema: int = SCHEMA_VERSION

    @classmethod
    def create(cls, run: str, config_hash: str, step: int, metrics: dict, started: float | None = None,
               extra: dict | None = None) -> "MetricsRecord":
        now = time.time()
        clean = {k: (float(v) if not isinstance(v, (int, str)) else v) for k, v in metrics.items()}
        return cls(run, config_hash, int(step), clean, now if started is None else started, now, extra or {})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsRecord":
        data = json.loads(text)
        if data.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported metrics schema {data.get('schema')!r}")
        return cls(**data)

    def without_timestamps(self) -> dict:
        d = asdict(self)
        d.pop("started")
        d.pop("finished")
        return d

    def csv_rows(self) -> list[dict]:
        return [{"schema": self.schema, "run": self.run, "config_hash": self.config_hash, "step": self.step,
                 "metric": k, "value": v} for k, v in sorted(self.metrics.items())]


def append_jsonl(path, record: MetricsRecord) -> None:
    with open(path, "a", encoding="utf-8", buffering=1) as fh:
        fh.write(record.to_json() + "\n")


def read_jsonl(path) -> list[MetricsRecord]:
    """Read records; a partially written last line is ignored."""
    out = []
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            out.append(MetricsRecord.from_json(line))
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise
    return out


def to_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in records:
        writer.writerows(r.csv_rows())
    return buf.getvalue()
