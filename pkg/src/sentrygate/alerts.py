"""Shared detection vocabulary: attack classes, tiers, alerts, client identity."""

from __future__ import annotations

from dataclasses import dataclass, field

# Closed set of attack classes a detector may report.  Everything downstream
# (severity defaults, response policy, log schema) is keyed on these strings.
SQLI = "sqli"
XSS = "xss"
INJECTION_OTHER = "injection_other"
TYPE_VIOLATION = "type_violation"
ENUM_VIOLATION = "enum_violation"
FORMAT_VIOLATION = "format_violation"
OPEN_REDIRECT = "open_redirect"
TAMPERING = "tampering"
PROTOCOL = "protocol"
BOT = "bot"
BRUTE_FORCE = "brute_force"
SESSION_HIJACK = "session_hijack"
SESSION_EXPIRED = "session_expired"
CSRF = "csrf"
BEHAVIOR_ANOMALY = "behavior_anomaly"
UNAUTHORIZED_ACCESS = "unauthorized_access"

ATTACK_CLASSES = frozenset({
    SQLI, XSS, INJECTION_OTHER, TYPE_VIOLATION, ENUM_VIOLATION,
    FORMAT_VIOLATION, OPEN_REDIRECT, TAMPERING, PROTOCOL, BOT,
    BRUTE_FORCE, SESSION_HIJACK, SESSION_EXPIRED, CSRF,
    BEHAVIOR_ANOMALY, UNAUTHORIZED_ACCESS,
})

LOW = "low"
HIGH = "high"
TIERS = (LOW, HIGH)

# Evidence excerpts are bounded before they ever reach a log line.
EVIDENCE_CAP = 256


@dataclass
class ClientIdentity:
    """Who sent the request, as far as the proxy can tell at each stage."""

    ip: str
    user_agent: str | None = None
    session_id: str | None = None
    username: str | None = None


@dataclass
class Alert:
    """One detector finding.  The pipeline raises at most one per request."""

    attack_class: str
    severity: str
    confidence: str
    score: float
    module: str
    evidence: str
    identity: ClientIdentity
    requested_url: str = ""

    def __post_init__(self) -> None:
        if self.attack_class not in ATTACK_CLASSES:
            raise ValueError(f"unknown attack class: {self.attack_class!r}")
        if self.severity not in TIERS or self.confidence not in TIERS:
            raise ValueError("severity/confidence must be 'low' or 'high'")
        if len(self.evidence.encode("utf-8", "replace")) > EVIDENCE_CAP:
            enc = self.evidence.encode("utf-8", "replace")[:EVIDENCE_CAP]
            self.evidence = enc.decode("utf-8", "replace")


def clip_evidence(text: str) -> str:
    """Bound evidence text to the excerpt cap (byte-wise, utf-8)."""
    enc = text.encode("utf-8", "replace")
    if len(enc) <= EVIDENCE_CAP:
        return text
    return enc[:EVIDENCE_CAP].decode("utf-8", "replace")
