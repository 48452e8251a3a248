"""Append-only JSONL logging for detections and response-controller ops.

One writer thread per logger; appends assign sequence numbers
synchronously and never wait on disk.  I/O failures bump a counter and
are otherwise swallowed: logging must never stop traffic.
"""

from __future__ import annotations

import json
import os
import queue
import threading
import time
from dataclasses import dataclass
from urllib.parse import quote

from .alerts import Alert, ATTACK_CLASSES, TIERS, EVIDENCE_CAP

DEFENDER_PREFIX = "defender"
CONTROLLER_PREFIX = "controller"

CONTROLLER_OPS = ("scrub", "mark", "seal", "inject")

# Key sets the controller-record schema accepts per op; values must be
# names and counts, never parameter values.
_DETAIL_SHAPES = {
    "scrub": {"label": str, "count": int},
    "mark": {"param": str},
    "seal": {"param": str},
    "inject": {"forms": int},
}

_NAME_CAP = 64


class SchemaError(ValueError):
    """The record does not fit the log schema (caller bug, never swallowed)."""


def _day(ts: float) -> str:
    return time.strftime("%Y%m%d", time.gmtime(ts))


def escape_evidence(text: str) -> str:
    clipped = text.encode("utf-8", "replace")[:EVIDENCE_CAP]
    return quote(clipped, safe=" :=/,.-_()[]{}")


@dataclass
class QueryFilter:
    ts_from: float
    ts_to: float
    attack_class: str | None = None
    ip: str | None = None

    def admit(self, record: dict) -> bool:
        ts = record.get("ts")
        if ts is None or not (self.ts_from <= ts < self.ts_to):
            return False
        if self.attack_class and record.get("attack_class") != self.attack_class:
            return False
        if self.ip and record.get("ip") != self.ip:
            return False
        return True


class _JsonlWriter:
    """Sequenced, queue-fed writer for one log file family."""

    def __init__(self, log_dir: str, prefix: str) -> None:
        self.log_dir = log_dir
        self.prefix = prefix
        self.io_failures = 0
        self._seq = 0
        self._lock = threading.Lock()
        self._queue: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._drain, daemon=True)
        self._thread.start()

    def append(self, record: dict, ts: float) -> int:
        with self._lock:
            self._seq += 1
            record = {"seq": self._seq, **record}
        self._queue.put((record, _day(ts)))
        return record["seq"]

    def _drain(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                self._queue.task_done()
                return
            record, day = item
            try:
                path = os.path.join(self.log_dir, f"{self.prefix}-{day}.jsonl")
                line = json.dumps(record, sort_keys=True) + "\n"
                with open(path, "a", encoding="utf-8") as fh:
                    fh.write(line)
            except OSError:
                self.io_failures += 1
            finally:
                self._queue.task_done()

    def flush(self) -> None:
        self._queue.join()

    def close(self) -> None:
        self._queue.put(None)
        self._thread.join(timeout=5)


class EventLogger:
    def __init__(self, log_dir: str) -> None:
        os.makedirs(log_dir, exist_ok=True)
        self.log_dir = log_dir
        self._defender = _JsonlWriter(log_dir, DEFENDER_PREFIX)
        self._controller = _JsonlWriter(log_dir, CONTROLLER_PREFIX)

    # -- defender records ----------------------------------------------------

    def defender_record(self, *, now: float, alert: Alert, action_kind: str,
                        note: str = "") -> int:
        record = {
            "ts": now,
            "username": alert.identity.username,
            "ip": alert.identity.ip,
            "session_id": alert.identity.session_id,
            "attack_class": alert.attack_class,
            "severity": alert.severity,
            "confidence": alert.confidence,
            "score": _finite(alert.score),
            "requested_url": alert.requested_url,
            "module": alert.module,
            "action_kind": action_kind,
            "evidence": escape_evidence(alert.evidence),
        }
        if note:
            record["note"] = note
        self._validate_defender(record)
        return self._defender.append(record, now)

    @staticmethod
    def _validate_defender(record: dict) -> None:
        if record["attack_class"] not in ATTACK_CLASSES:
            raise SchemaError(f"bad attack_class {record['attack_class']!r}")
        if record["severity"] not in TIERS or record["confidence"] not in TIERS:
            raise SchemaError("bad tier")
        if len(record["evidence"]) > EVIDENCE_CAP * 3:
            raise SchemaError("evidence exceeds escaped cap")

    # -- controller records --------------------------------------------------

    def controller_record(self, *, now: float, session_id: str | None,
                          op: str, detail: dict) -> int:
        if op not in CONTROLLER_OPS:
            raise SchemaError(f"unknown controller op {op!r}")
        shape = _DETAIL_SHAPES[op]
        if set(detail) != set(shape):
            raise SchemaError(f"op {op} detail must have keys {sorted(shape)}")
        for key, typ in shape.items():
            value = detail[key]
            if not isinstance(value, typ) or isinstance(value, bool):
                raise SchemaError(f"detail[{key}] must be {typ.__name__}")
            if typ is str:
                # Names only.  Anything shaped like a value is refused.
                if len(value) > _NAME_CAP or "=" in value or ";" in value:
                    raise SchemaError(f"detail[{key}] is not a bare name")
        record = {"ts": now, "session_id": session_id, "op": op, "detail": detail}
        return self._controller.append(record, now)

    # -- shared --------------------------------------------------------------

    @property
    def io_failures(self) -> int:
        return self._defender.io_failures + self._controller.io_failures

    def flush(self) -> None:
        self._defender.flush()
        self._controller.flush()

    def close(self) -> None:
        self._defender.close()
        self._controller.close()

    def query(self, flt: QueryFilter, prefix: str = DEFENDER_PREFIX) -> list[dict]:
        """Time-ordered records matching the filter; a truncated final line
        (crash artifact) is skipped without affecting earlier records."""
        self.flush()
        out: list[dict] = []
        try:
            names = sorted(n for n in os.listdir(self.log_dir)
                           if n.startswith(prefix + "-") and n.endswith(".jsonl"))
        except OSError:
            return out
        for name in names:
            try:
                with open(os.path.join(self.log_dir, name), encoding="utf-8") as fh:
                    for line in fh:
                        try:
                            record = json.loads(line)
                        except json.JSONDecodeError:
                            continue
                        if flt.admit(record):
                            out.append(record)
            except OSError:
                continue
        out.sort(key=lambda r: (r.get("ts", 0.0), r.get("seq", 0)))
        return out


def _finite(x: float) -> float:
    if x != x or x in (float("inf"), float("-inf")):
        return 1e308
    return x
