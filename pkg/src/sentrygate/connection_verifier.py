"""First gate in the chain: source and target blacklists with expiry."""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

from .preprocessor import CanonicalRequest

SOURCE_IP = "source_ip"
SOURCE_SESSION = "source_session"
SOURCE_USER = "source_user"
TARGET_PATH = "target_path"
PROTECTED_PREFIX = "protected_prefix"

KINDS = (SOURCE_IP, SOURCE_SESSION, SOURCE_USER, TARGET_PATH, PROTECTED_PREFIX)

PERMANENT = None

_REASONS = {
    SOURCE_IP: "ip-blocked",
    SOURCE_SESSION: "session-blocked",
    SOURCE_USER: "user-blocked",
    TARGET_PATH: "target-blocked",
    PROTECTED_PREFIX: "protected-path",
}


@dataclass
class BlockEntry:
    kind: str
    key: str
    expires_at: float | None    # None is permanent
    reason: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown block kind {self.kind!r}")

    def live(self, now: float) -> bool:
        return self.expires_at is None or self.expires_at > now


@dataclass
class Blocked:
    reason: str
    kind: str
    key: str


class BlockList:
    """At most one live entry per (kind, key); later upserts win."""

    def __init__(self) -> None:
        self._entries: dict[tuple[str, str], BlockEntry] = {}
        self._lock = threading.RLock()

    def upsert(self, entry: BlockEntry) -> None:
        with self._lock:
            self._entries[(entry.kind, entry.key)] = entry

    def lookup(self, kind: str, key: str, now: float) -> BlockEntry | None:
        # Read-only by contract: expired entries are skipped, not removed.
        entry = self._entries.get((kind, key))
        if entry is not None and entry.live(now):
            return entry
        return None

    def purge_expired(self, now: float) -> int:
        """Drop every entry whose expiry has passed; returns the count removed."""
        with self._lock:
            dead = [k for k, e in self._entries.items() if not e.live(now)]
            for k in dead:
                del self._entries[k]
            return len(dead)

    def entries(self) -> list[BlockEntry]:
        with self._lock:
            return list(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)


def check(req: CanonicalRequest, lists: BlockList, now: float) -> Blocked | None:
    """Return Blocked when any source or target attribute hits a live entry.

    Purely a read: no mutation of the lists, ever.
    """
    ident = req.identity
    probes = [(SOURCE_IP, ident.ip)]
    if ident.session_id:
        probes.append((SOURCE_SESSION, ident.session_id))
    if ident.username:
        probes.append((SOURCE_USER, ident.username))
    probes.append((TARGET_PATH, req.path_template))
    for kind, key in probes:
        entry = lists.lookup(kind, key, now)
        if entry is not None:
            return Blocked(reason=_REASONS[kind], kind=kind, key=key)
    for entry in lists.entries():
        if entry.kind == PROTECTED_PREFIX and entry.live(now):
            if req.path.startswith(entry.key):
                return Blocked(reason=_REASONS[PROTECTED_PREFIX],
                               kind=PROTECTED_PREFIX, key=entry.key)
    return None


def load_seed(path: str, lists: BlockList, now: float) -> int:
    """Seed a block list from an admin-maintained JSON array."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError("blocklist seed must be a JSON array")
    count = 0
    for item in data:
        ttl = item.get("ttl")
        expires = None if ttl in (None, "permanent") else now + float(ttl)
        lists.upsert(BlockEntry(kind=item["kind"], key=item["key"],
                                expires_at=expires,
                                reason=item.get("reason", "seed")))
        count += 1
    return count
