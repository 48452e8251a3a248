"""Role-based access control, the second-factor gate for sensitive
operations, and the analyzer that catches forced browsing to routes the
policy never listed.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

from .alerts import Alert, clip_evidence, UNAUTHORIZED_ACCESS, HIGH, LOW
from .keys import otp_code
from .preprocessor import CanonicalRequest
from .user_verifier import SessionRecord

MODULE = "access_controller"

OTP_PARAM = "__ips_otp"
SECOND_FACTOR_TTL_S = 300.0
MIN_SUPPORT = 5

ALLOWED = "allowed"
DENIED = "denied"
UNLISTED = "unlisted"


@dataclass
class RbacPolicy:
    roles: set[str]
    grants: dict[str, set[tuple[str, str]]]          # role -> {(method, template)}
    sensitive_ops: set[tuple[str, str]]

    def __post_init__(self) -> None:
        for role in self.grants:
            if role not in self.roles:
                raise ValueError(f"grant references unknown role {role!r}")
        self._listed: set[tuple[str, str]] = set()
        for pairs in self.grants.values():
            self._listed |= pairs

    @classmethod
    def from_file(cls, path: str) -> "RbacPolicy":
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(
            roles=set(data["roles"]),
            grants={role: {(m, t) for m, t in pairs}
                    for role, pairs in data["grants"].items()},
            sensitive_ops={(m, t) for m, t in data.get("sensitive", [])},
        )

    def decide(self, role: str, method: str, template: str) -> str:
        pair = (method, template)
        if pair not in self._listed:
            return UNLISTED
        if pair in self.grants.get(role, set()):
            return ALLOWED
        return DENIED

    def is_sensitive(self, method: str, template: str) -> bool:
        return (method, template) in self.sensitive_ops

    def sensitive_templates(self) -> set[str]:
        return {t for (_m, t) in self.sensitive_ops}


@dataclass
class RoleProfile:
    """Per-role counts of (method, template) pairs seen in training."""

    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    min_support: int = MIN_SUPPORT

    def support(self, role: str, method: str, template: str) -> int:
        return self.counts.get(role, {}).get(f"{method} {template}", 0)

    def knows_role(self, role: str) -> bool:
        return role in self.counts

    def observe(self, role: str, method: str, template: str) -> None:
        row = self.counts.setdefault(role, {})
        key = f"{method} {template}"
        row[key] = row.get(key, 0) + 1

    def to_dict(self) -> dict:
        return {role: dict(sorted(row.items()))
                for role, row in sorted(self.counts.items())}

    @classmethod
    def from_dict(cls, data: dict, min_support: int = MIN_SUPPORT) -> "RoleProfile":
        return cls(counts={r: dict(row) for r, row in data.items()},
                   min_support=min_support)


class GapReport:
    """Append-only JSONL record of every request that fell outside the
    written policy; feedstock for closing RBAC gaps."""

    def __init__(self, path: str | None) -> None:
        self.path = path
        self._lock = threading.Lock()
        self.templates: set[str] = set()

    def append(self, ts: float, role: str, method: str, template: str,
               decision: str) -> None:
        self.templates.add(template)
        if self.path is None:
            return
        line = json.dumps({"ts": ts, "role": role, "method": method,
                           "template": template, "decision": decision},
                          sort_keys=True)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")


@dataclass
class GateResult:
    outcome: str            # "proceed" | "challenge"
    granted_now: bool = False


def gate_sensitive(req: CanonicalRequest, session: SessionRecord | None,
                   policy: RbacPolicy, secret: bytes, now: float, *,
                   ttl_s: float = SECOND_FACTOR_TTL_S) -> GateResult:
    """Require a fresh second-factor grant before any sensitive operation.

    A request carrying the correct one-time code records a grant and
    proceeds; anything else gets challenged.  Codes are valid for their
    minute and the one before it.
    """
    if session is None or session.username is None:
        return GateResult("proceed")
    if not policy.is_sensitive(req.method, req.path_template):
        return GateResult("proceed")
    if session.second_factor_at is not None and \
            now - session.second_factor_at <= ttl_s:
        return GateResult("proceed")
    supplied = req.param(OTP_PARAM)
    if supplied is not None:
        minute = int(now // 60)
        valid = {otp_code(secret, session.session_id, minute),
                 otp_code(secret, session.session_id, minute - 1)}
        if supplied.canonical in valid:
            session.second_factor_at = now
            return GateResult("proceed", granted_now=True)
    return GateResult("challenge")


def rbac_check(req: CanonicalRequest, session: SessionRecord | None,
               policy: RbacPolicy, severity_map: dict[str, str]
               ) -> tuple[str, Alert | None]:
    """Trichotomy over the written policy: Allowed, Denied, or Unlisted."""
    role = session.role if session else "visitor"
    decision = policy.decide(role, req.method, req.path_template)
    if decision != DENIED:
        return decision, None
    alert = Alert(attack_class=UNAUTHORIZED_ACCESS,
                  severity=severity_map.get(UNAUTHORIZED_ACCESS, HIGH),
                  confidence=HIGH, score=1.0, module=MODULE,
                  evidence=clip_evidence(
                      f"role {role} denied {req.method} {req.path_template}"),
                  identity=req.identity, requested_url=req.requested_url)
    return decision, alert


def analyze_unlisted(req: CanonicalRequest, session: SessionRecord | None,
                     profile: RoleProfile, report: GapReport, now: float,
                     severity_map: dict[str, str]) -> Alert | None:
    """Judge a policy-silent route by how often this role used it in
    training.  Every unlisted sighting lands in the gap report either way."""
    role = session.role if session else "visitor"
    if not profile.knows_role(role):
        report.append(now, role, req.method, req.path_template, "untrained-role")
        return _unlisted_alert(req, role, 0, severity_map)
    support = profile.support(role, req.method, req.path_template)
    if support >= profile.min_support:
        report.append(now, role, req.method, req.path_template, "pass")
        return None
    report.append(now, role, req.method, req.path_template, "alert")
    return _unlisted_alert(req, role, support, severity_map)


def _unlisted_alert(req, role, support, severity_map) -> Alert:
    return Alert(attack_class=UNAUTHORIZED_ACCESS,
                 severity=severity_map.get(UNAUTHORIZED_ACCESS, HIGH),
                 confidence=LOW, score=float(support), module=MODULE,
                 evidence=clip_evidence(
                     f"unlisted {req.method} {req.path_template} "
                     f"support {support} for role {role}"),
                 identity=req.identity, requested_url=req.requested_url)
