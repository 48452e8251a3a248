"""Session integrity checks and per-user behavioral profiling.

Stage one is rule-based: login-failure ceiling, IP/agent binding, idle
timeout, anti-CSRF token.  Stage two scores each action against a
Laplace-smoothed bigram profile of the authenticated user.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass, field

from .alerts import (
    Alert, clip_evidence, BRUTE_FORCE, SESSION_HIJACK, SESSION_EXPIRED,
    CSRF, BEHAVIOR_ANOMALY, HIGH, LOW,
)
from .preprocessor import CanonicalRequest

MODULE = "user_verifier"

TOKEN_PARAM = "__ips_token"

IDLE_TIMEOUT_S = 1800.0
LOGIN_FAIL_LIMIT = 5
LOGIN_FAIL_WINDOW_S = 600.0

# Smoothing constant for the bigram model.
ALPHA = 1.0
_ENTROPY_FLOOR = 0.1


@dataclass
class SessionRecord:
    session_id: str
    created_at: float
    last_seen: float
    bound_ip: str
    bound_user_agent: str
    csrf_token: str                      # 128-bit hex, proxy-issued
    username: str | None = None
    role: str = "visitor"
    failed_logins: deque = field(default_factory=deque)
    watch_flag: bool = False
    watch_class: str | None = None       # None on a set flag means any class
    second_factor_at: float | None = None
    last_action: tuple[str, str] | None = None

    def record_failed_login(self, now: float,
                            window_s: float = LOGIN_FAIL_WINDOW_S) -> None:
        self.failed_logins.append(now)
        self.prune_failures(now, window_s)

    def prune_failures(self, now: float,
                       window_s: float = LOGIN_FAIL_WINDOW_S) -> None:
        cutoff = now - window_s
        while self.failed_logins and self.failed_logins[0] <= cutoff:
            self.failed_logins.popleft()

    def failures_in_window(self, now: float,
                           window_s: float = LOGIN_FAIL_WINDOW_S) -> int:
        self.prune_failures(now, window_s)
        return len(self.failed_logins)


class SessionStore:
    """All live sessions, keyed by id.  The proxy itself issues ids."""

    def __init__(self, token_source) -> None:
        self._sessions: dict[str, SessionRecord] = {}
        self._lock = threading.RLock()
        self._token_source = token_source

    def issue(self, ip: str, user_agent: str | None, now: float) -> SessionRecord:
        with self._lock:
            sid = self._token_source.token_hex()
            record = SessionRecord(
                session_id=sid, created_at=now, last_seen=now,
                bound_ip=ip, bound_user_agent=user_agent or "",
                csrf_token=self._token_source.token_hex(),
            )
            self._sessions[sid] = record
            return record

    def get(self, session_id: str | None) -> SessionRecord | None:
        if session_id is None:
            return None
        return self._sessions.get(session_id)

    def invalidate(self, session_id: str) -> bool:
        with self._lock:
            return self._sessions.pop(session_id, None) is not None

    def __len__(self) -> int:
        return len(self._sessions)


@dataclass
class Stage1Result:
    alert: Alert | None
    session: SessionRecord | None


def verify_stage1(req: CanonicalRequest, store: SessionStore, now: float,
                  severity_map: dict[str, str], *,
                  idle_timeout_s: float = IDLE_TIMEOUT_S,
                  login_fail_limit: int = LOGIN_FAIL_LIMIT,
                  login_fail_window_s: float = LOGIN_FAIL_WINDOW_S) -> Stage1Result:
    """Rule checks over the presented session.  No session at all passes:
    anonymous routes exist, and the proxy will issue one on the response."""

    def alert(cls, confidence, evidence, score=1.0):
        return Alert(attack_class=cls,
                     severity=severity_map.get(cls, LOW),
                     confidence=confidence, score=score, module=MODULE,
                     evidence=clip_evidence(evidence), identity=req.identity,
                     requested_url=req.requested_url)

    sid = req.session_id
    if sid is None:
        return Stage1Result(None, None)
    session = store.get(sid)
    if session is None:
        return Stage1Result(
            alert(SESSION_HIJACK, LOW, "unknown session id presented"), None)

    if session.failures_in_window(now, login_fail_window_s) > login_fail_limit:
        return Stage1Result(
            alert(BRUTE_FORCE, HIGH,
                  f"{len(session.failed_logins)} failed logins in window"),
            session)

    ua = req.identity.user_agent or ""
    if req.identity.ip != session.bound_ip or ua != session.bound_user_agent:
        return Stage1Result(
            alert(SESSION_HIJACK, HIGH,
                  f"binding mismatch ip={req.identity.ip} agent={ua[:64]}"),
            session)

    if now - session.last_seen > idle_timeout_s:
        return Stage1Result(
            alert(SESSION_EXPIRED, HIGH,
                  f"idle {now - session.last_seen:.0f}s"), session)

    if req.method != "GET":
        supplied = req.param(TOKEN_PARAM)
        if supplied is None or supplied.original.decode("iso-8859-1") != session.csrf_token:
            return Stage1Result(
                alert(CSRF, HIGH, "missing or wrong anti-csrf token"), session)

    session.last_seen = now
    return Stage1Result(None, session)


# --- behavioral profile -----------------------------------------------------

@dataclass
class UserProfile:
    """Bigram model over (method, path_template) actions with Laplace
    smoothing.  hour_histogram is advisory context only and never scores."""

    action_freq: dict[str, int] = field(default_factory=dict)
    transitions: dict[str, dict[str, int]] = field(default_factory=dict)
    hour_histogram: list[int] = field(default_factory=lambda: [0] * 24)
    total_actions: int = 0
    anomaly_threshold: float = float("inf")

    @staticmethod
    def action_key(method: str, template: str) -> str:
        return f"{method} {template}"

    def _vocab_size(self) -> int:
        # One extra slot stands in for every action not yet in the vocabulary.
        return len(self.action_freq) + 1

    def transition_prob(self, prev: str | None, action: str) -> float:
        v = self._vocab_size()
        if prev is None:
            count = self.action_freq.get(action, 0)
            return (count + ALPHA) / (self.total_actions + ALPHA * v)
        row = self.transitions.get(prev, {})
        row_total = sum(row.values())
        return (row.get(action, 0) + ALPHA) / (row_total + ALPHA * v)

    def entropy(self) -> float:
        """Average transition entropy, weighted by how often each previous
        action occurs.  Used to normalize raw surprisal across users."""
        v = self._vocab_size()
        if self.total_actions == 0:
            return max(math.log(v + 1), _ENTROPY_FLOOR)
        total_weight = 0
        acc = 0.0
        for prev, row in self.transitions.items():
            row_total = sum(row.values())
            if row_total == 0:
                continue
            h = 0.0
            denom = row_total + ALPHA * v
            for count in row.values():
                p = (count + ALPHA) / denom
                h -= p * math.log(p)
            # Mass left for unseen continuations, spread over the spare slot.
            rest = (v - len(row)) * ALPHA / denom
            if rest > 0:
                h -= rest * math.log(ALPHA / denom)
            acc += row_total * h
            total_weight += row_total
        if total_weight == 0:
            return max(math.log(v + 1), _ENTROPY_FLOOR)
        return max(acc / total_weight, _ENTROPY_FLOOR)

    def score(self, prev: str | None, action: str) -> float:
        return -math.log(self.transition_prob(prev, action)) / self.entropy()

    def observe(self, prev: str | None, action: str, hour: int) -> None:
        self.action_freq[action] = self.action_freq.get(action, 0) + 1
        if prev is not None:
            row = self.transitions.setdefault(prev, {})
            row[action] = row.get(action, 0) + 1
        self.hour_histogram[hour % 24] += 1
        self.total_actions += 1

    def to_dict(self) -> dict:
        return {
            "actions": dict(sorted(self.action_freq.items())),
            "transitions": {a: dict(sorted(row.items()))
                            for a, row in sorted(self.transitions.items())},
            "hours": list(self.hour_histogram),
            "total": self.total_actions,
            "threshold": self.anomaly_threshold,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UserProfile":
        return cls(action_freq=dict(data["actions"]),
                   transitions={a: dict(row) for a, row in data["transitions"].items()},
                   hour_histogram=list(data["hours"]),
                   total_actions=data["total"],
                   anomaly_threshold=data["threshold"])


@dataclass
class Stage2Result:
    alert: Alert | None
    score: float = 0.0


def verify_stage2(req: CanonicalRequest, session: SessionRecord | None,
                  profiles: dict[str, UserProfile], now: float,
                  severity_map: dict[str, str]) -> Stage2Result:
    """Score the action for authenticated users with a trained profile.

    Untrained users pass but get the session watch flag; anonymous
    traffic is out of scope for profiling.  On pass the profile learns
    the observation online.
    """
    if session is None or session.username is None:
        return Stage2Result(None)
    profile = profiles.get(session.username)
    action = UserProfile.action_key(req.method, req.path_template)
    prev_key = (UserProfile.action_key(*session.last_action)
                if session.last_action else None)
    if profile is None or profile.total_actions == 0:
        session.watch_flag = True
        session.watch_class = None
        session.last_action = (req.method, req.path_template)
        return Stage2Result(None)

    score = profile.score(prev_key, action)
    if score > profile.anomaly_threshold:
        confidence = HIGH if score > 2 * profile.anomaly_threshold else LOW
        alert = Alert(attack_class=BEHAVIOR_ANOMALY,
                      severity=severity_map.get(BEHAVIOR_ANOMALY, LOW),
                      confidence=confidence, score=score, module=MODULE,
                      evidence=clip_evidence(
                          f"action {action} surprisal {score:.3f} "
                          f"threshold {profile.anomaly_threshold:.3f}"),
                      identity=req.identity,
                      requested_url=req.requested_url)
        return Stage2Result(alert, score)

    hour = int(now // 3600) % 24
    profile.observe(prev_key, action, hour)
    session.last_action = (req.method, req.path_template)
    return Stage2Result(None, score)
