"""Three-stage bot screening: known-good list, known-bad list, then a
per-IP behavioral check over a sliding window.
"""

from __future__ import annotations

import threading
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

WINDOW_S = 60.0
RATE_K = 3.0
ERROR_RATIO = 0.5
ERROR_MIN_COUNT = 20
MIN_EVENTS = 5
BURST_FACTOR = 1.5

_STD_FLOOR = 1e-9


class BotListError(ValueError):
    """Raised when the good/bad lists overlap or cannot be parsed."""


@dataclass
class BotLists:
    good_bot_ips: set[str] = field(default_factory=set)
    bad_bot_ips: set[str] = field(default_factory=set)
    bad_bot_agents: set[str] = field(default_factory=set)   # case-folded substrings

    def __post_init__(self) -> None:
        self.bad_bot_agents = {a.casefold() for a in self.bad_bot_agents}
        overlap = self.good_bot_ips & self.bad_bot_ips
        if overlap:
            raise BotListError(f"ips in both lists: {sorted(overlap)}")
        for ip in self.bad_bot_ips:
            if _ip_matches(ip, self.good_bot_ips):
                raise BotListError(f"bad ip {ip} shadowed by a good-list prefix")


def _ip_matches(ip: str, entries: set[str]) -> bool:
    if ip in entries:
        return True
    # Entries ending with "." are string prefixes, e.g. "66.249."
    return any(e.endswith(".") and ip.startswith(e) for e in entries)


def load_list_file(path: str) -> list[str]:
    """One entry per line; blank lines and '#' comments ignored."""
    out: list[str] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(line)
    return out


@dataclass
class BotBaseline:
    """Training-derived thresholds for stage three."""

    rate_mean: float
    rate_std: float
    max_burst: float
    error_ratio_threshold: float = ERROR_RATIO
    window_s: float = WINDOW_S

    def to_dict(self) -> dict:
        return {
            "rate_mean": self.rate_mean,
            "rate_std": self.rate_std,
            "max_burst": self.max_burst,
            "error_ratio_threshold": self.error_ratio_threshold,
            "window_s": self.window_s,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BotBaseline":
        return cls(rate_mean=data["rate_mean"], rate_std=data["rate_std"],
                   max_burst=data["max_burst"],
                   error_ratio_threshold=data.get("error_ratio_threshold", ERROR_RATIO),
                   window_s=data.get("window_s", WINDOW_S))


class ClientHistory:
    """Sliding-window event buffer for one client IP.

    Counters are maintained incrementally and must always agree with a
    recount over the buffer; a property test holds this to account.
    """

    __slots__ = ("window_s", "events", "total_in_window", "error_404_in_window",
                 "_template_counts")

    def __init__(self, window_s: float = WINDOW_S) -> None:
        self.window_s = window_s
        self.events: deque[tuple[float, str, int]] = deque()
        self.total_in_window = 0
        self.error_404_in_window = 0
        self._template_counts: Counter[str] = Counter()

    def record(self, ts: float, template: str, status: int) -> None:
        self.events.append((ts, template, status))
        self.total_in_window += 1
        if status == 404:
            self.error_404_in_window += 1
        self._template_counts[template] += 1
        self.prune(ts)

    def prune(self, now: float) -> None:
        cutoff = now - self.window_s
        while self.events and self.events[0][0] <= cutoff:
            ts, template, status = self.events.popleft()
            self.total_in_window -= 1
            if status == 404:
                self.error_404_in_window -= 1
            self._template_counts[template] -= 1
            if self._template_counts[template] <= 0:
                del self._template_counts[template]

    @property
    def distinct_templates_in_window(self) -> int:
        return len(self._template_counts)

    def window_view(self, now: float) -> tuple[int, int]:
        """(total, 404s) strictly inside (now - window, now]."""
        self.prune(now)
        return self.total_in_window, self.error_404_in_window


class HistoryStore:
    """Per-IP histories; asset requests are never recorded here."""

    def __init__(self, window_s: float = WINDOW_S) -> None:
        self.window_s = window_s
        self._by_ip: dict[str, ClientHistory] = {}
        self._lock = threading.RLock()

    def for_ip(self, ip: str) -> ClientHistory:
        with self._lock:
            hist = self._by_ip.get(ip)
            if hist is None:
                hist = self._by_ip[ip] = ClientHistory(self.window_s)
            return hist

    def record(self, ip: str, ts: float, template: str, status: int) -> None:
        self.for_ip(ip).record(ts, template, status)


@dataclass
class BotScore:
    verdict: str                # "bot" | "human"
    confidence: str             # "low" | "high"
    rate_z: float
    window_count: int
    error_ratio: float
    conditions: tuple[str, ...] = ()


def stage1_good_bot(ip: str, lists: BotLists) -> bool:
    return _ip_matches(ip, lists.good_bot_ips)


def stage2_bad_bot(ip: str, user_agent: str | None, lists: BotLists) -> str | None:
    """Return the matching evidence string, or None."""
    if _ip_matches(ip, lists.bad_bot_ips):
        return f"ip:{ip}"
    if user_agent:
        folded = user_agent.casefold()
        for needle in sorted(lists.bad_bot_agents):
            if needle in folded:
                return f"agent:{needle}"
    return None


def stage3_behavior(history: ClientHistory, baseline: BotBaseline,
                    now: float) -> BotScore:
    """Score the window against the trained baseline.

    Bot when any of: request rate exceeds mean + 3*std, window count
    exceeds the trained burst ceiling, or the 404 ratio passes 0.5 with
    at least 20 requests in the window.  Two or more conditions firing
    raise confidence to high.  Fewer than five events is not enough
    history to call anyone a bot.
    """
    total, errors = history.window_view(now)
    rate = total / baseline.window_s
    z = (rate - baseline.rate_mean) / max(baseline.rate_std, _STD_FLOOR)
    ratio = (errors / total) if total else 0.0
    if total < MIN_EVENTS:
        return BotScore("human", "low", z, total, ratio)
    conditions = []
    if rate > baseline.rate_mean + RATE_K * baseline.rate_std:
        conditions.append("rate")
    if total > baseline.max_burst:
        conditions.append("burst")
    if total >= ERROR_MIN_COUNT and ratio > baseline.error_ratio_threshold:
        conditions.append("errors")
    if not conditions:
        return BotScore("human", "low", z, total, ratio)
    confidence = "high" if len(conditions) >= 2 else "low"
    return BotScore("bot", confidence, z, total, ratio, tuple(conditions))


def train_baseline(events_by_ip: dict[str, list[float]],
                   *, window_s: float = WINDOW_S) -> BotBaseline:
    """Fit the stage-three baseline from per-IP monitored-request timestamps.

    For every event the window count at that instant becomes one rate
    observation; max_burst is the largest observed count times 1.5.
    """
    rates: list[float] = []
    max_count = 0
    for ts_list in events_by_ip.values():
        ts_sorted = sorted(ts_list)
        start = 0
        for i, ts in enumerate(ts_sorted):
            while ts_sorted[start] <= ts - window_s:
                start += 1
            count = i - start + 1
            max_count = max(max_count, count)
            rates.append(count / window_s)
    if not rates:
        # No traffic at all: permissive-but-sane fallback thresholds.
        return BotBaseline(rate_mean=0.0, rate_std=0.1,
                           max_burst=30.0, window_s=window_s)
    arr = np.asarray(rates, dtype=float)
    return BotBaseline(rate_mean=float(arr.mean()), rate_std=float(arr.std()),
                       max_burst=float(max_count) * BURST_FACTOR,
                       window_s=window_s)
