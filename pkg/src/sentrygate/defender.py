"""Maps alerts to countermeasures and carries them out.

Selection is a (severity, confidence) matrix with per-class overrides;
execution mutates block lists and sessions and always leaves exactly one
log record behind.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .alerts import Alert, HIGH, LOW, SESSION_HIJACK, SESSION_EXPIRED, CSRF, \
    BEHAVIOR_ANOMALY, PROTOCOL
from .connection_verifier import (
    BlockEntry, BlockList, SOURCE_IP, SOURCE_SESSION, SOURCE_USER, TARGET_PATH,
)

MODULE = "defender"

LOG_ONLY = "log_only"
MONITOR = "monitor"
CHALLENGE_2F = "challenge_2f"
REJECT_REQUEST = "reject_request"
FORCE_LOGOUT = "force_logout"
SUSPEND_SESSION = "suspend_session"
SUSPEND_IP = "suspend_ip"
SUSPEND_SERVICE = "suspend_service"
BLOCK_IP = "block_ip"
BLOCK_USER = "block_user"

# Pseudo-kind resolved by authentication state at selection time.
BLOCK_USER_OR_IP = "block_user_or_ip"

ACTION_KINDS = (LOG_ONLY, MONITOR, CHALLENGE_2F, REJECT_REQUEST, FORCE_LOGOUT,
                SUSPEND_SESSION, SUSPEND_IP, SUSPEND_SERVICE, BLOCK_IP, BLOCK_USER)

# Strength ordering; anything at reject_request or above stops the request.
ACTION_ORDER = {
    LOG_ONLY: 0, MONITOR: 1, CHALLENGE_2F: 2, REJECT_REQUEST: 3,
    FORCE_LOGOUT: 4, SUSPEND_SESSION: 5, SUSPEND_IP: 5, SUSPEND_SERVICE: 5,
    BLOCK_IP: 6, BLOCK_USER: 6,
}

REJECT_THRESHOLD = ACTION_ORDER[REJECT_REQUEST]

DEFAULT_SUSPEND_TTL_S = 600.0


@dataclass
class ResponseAction:
    kind: str
    http_status: int = 403
    ttl_s: float | None = None
    monitor: bool = False        # additionally set the session watch flag
    notify: bool = False         # additionally emit an account-holder notice

    def __post_init__(self) -> None:
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown action kind {self.kind!r}")

    @property
    def stops_request(self) -> bool:
        return ACTION_ORDER[self.kind] >= REJECT_THRESHOLD

    @property
    def strength(self) -> int:
        return ACTION_ORDER[self.kind]


@dataclass
class ActionSpec:
    """One cell of the policy: a kind plus optional adjustments."""

    kind: str
    http_status: int | None = None
    ttl_s: float | None = None
    monitor: bool = False
    notify: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> "ActionSpec":
        return cls(kind=data["kind"], http_status=data.get("status"),
                   ttl_s=data.get("ttl"), monitor=data.get("monitor", False),
                   notify=data.get("notify", False))

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.http_status is not None:
            out["status"] = self.http_status
        if self.ttl_s is not None:
            out["ttl"] = self.ttl_s
        if self.monitor:
            out["monitor"] = True
        if self.notify:
            out["notify"] = True
        return out


DEFAULT_MATRIX: dict[tuple[str, str], ActionSpec] = {
    (HIGH, HIGH): ActionSpec(BLOCK_USER_OR_IP),
    (HIGH, LOW): ActionSpec(REJECT_REQUEST, monitor=True),
    (LOW, HIGH): ActionSpec(REJECT_REQUEST),
    (LOW, LOW): ActionSpec(LOG_ONLY),
}

# Keys are "class" or "class,confidence".
DEFAULT_OVERRIDES: dict[str, ActionSpec] = {
    SESSION_HIJACK: ActionSpec(FORCE_LOGOUT, notify=True),
    SESSION_EXPIRED: ActionSpec(FORCE_LOGOUT),
    CSRF: ActionSpec(REJECT_REQUEST),
    f"{BEHAVIOR_ANOMALY},{LOW}": ActionSpec(MONITOR),
    PROTOCOL: ActionSpec(REJECT_REQUEST, http_status=400),
}


class ResponsePolicy:
    def __init__(self, matrix: dict[tuple[str, str], ActionSpec] | None = None,
                 overrides: dict[str, ActionSpec] | None = None,
                 suspend_ttl_s: float = DEFAULT_SUSPEND_TTL_S) -> None:
        self.matrix = dict(DEFAULT_MATRIX if matrix is None else matrix)
        self.overrides = dict(DEFAULT_OVERRIDES if overrides is None else overrides)
        self.suspend_ttl_s = suspend_ttl_s
        for pair in ((HIGH, HIGH), (HIGH, LOW), (LOW, HIGH), (LOW, LOW)):
            if pair not in self.matrix:
                raise ValueError(f"matrix cell {pair} missing")

    @classmethod
    def from_dict(cls, data: dict) -> "ResponsePolicy":
        matrix = dict(DEFAULT_MATRIX)
        for key, spec in data.get("matrix", {}).items():
            sev, conf = key.split(",")
            matrix[(sev, conf)] = ActionSpec.from_dict(spec)
        overrides = dict(DEFAULT_OVERRIDES)
        for key, spec in data.get("overrides", {}).items():
            overrides[key] = ActionSpec.from_dict(spec)
        return cls(matrix=matrix, overrides=overrides,
                   suspend_ttl_s=data.get("suspend_ttl", DEFAULT_SUSPEND_TTL_S))


def select_response(alert: Alert, policy: ResponsePolicy) -> ResponseAction:
    """Pick the countermeasure: class override first, then the matrix."""
    spec = policy.overrides.get(f"{alert.attack_class},{alert.confidence}")
    if spec is None:
        spec = policy.overrides.get(alert.attack_class)
    if spec is None:
        spec = policy.matrix[(alert.severity, alert.confidence)]

    kind = spec.kind
    if kind == BLOCK_USER_OR_IP:
        kind = BLOCK_USER if alert.identity.username else BLOCK_IP

    status = spec.http_status
    if status is None:
        status = 401 if kind == CHALLENGE_2F else 403
    ttl = spec.ttl_s
    if ttl is None and kind in (SUSPEND_SESSION, SUSPEND_IP, SUSPEND_SERVICE):
        ttl = policy.suspend_ttl_s
    return ResponseAction(kind=kind, http_status=status, ttl_s=ttl,
                          monitor=spec.monitor, notify=spec.notify)


class StoreUnavailable(RuntimeError):
    """Raised by a backing store that cannot apply a countermeasure."""


@dataclass
class Execution:
    action: ResponseAction
    alert: Alert
    applied: bool
    note: str = ""


class Defender:
    def __init__(self, policy: ResponsePolicy, block_lists: BlockList,
                 session_store, event_logger, *, mark_ledger=None) -> None:
        self.policy = policy
        self.block_lists = block_lists
        self.sessions = session_store
        self.event_logger = event_logger
        self.mark_ledger = mark_ledger
        self.executions = 0

    def respond(self, alert: Alert, now: float) -> Execution:
        action = select_response(alert, self.policy)
        return self.execute(alert, action, now)

    def execute(self, alert: Alert, action: ResponseAction, now: float) -> Execution:
        """Apply the action.  A failing store fails closed: the request is
        rejected anyway and the failure is logged."""
        note = ""
        try:
            self._apply(alert, action, now)
            applied = True
        except StoreUnavailable as exc:
            note = f"store unavailable ({exc}); failing closed"
            action = replace(action, kind=REJECT_REQUEST, http_status=403,
                             ttl_s=None)
            applied = False
        self.executions += 1
        self._log(alert, action, now, note)
        if action.notify:
            self._log(alert, action, now, "account holder notified",
                      kind_override="notify")
        return Execution(action=action, alert=alert, applied=applied, note=note)

    def _apply(self, alert: Alert, action: ResponseAction, now: float) -> None:
        ident = alert.identity
        kind = action.kind
        expires = None if action.ttl_s is None else now + action.ttl_s
        if kind == BLOCK_IP:
            self.block_lists.upsert(BlockEntry(SOURCE_IP, ident.ip, None,
                                               reason=alert.attack_class))
        elif kind == BLOCK_USER:
            if not ident.username:
                raise StoreUnavailable("no username to block")
            self.block_lists.upsert(BlockEntry(SOURCE_USER, ident.username, None,
                                               reason=alert.attack_class))
        elif kind == SUSPEND_IP:
            self.block_lists.upsert(BlockEntry(SOURCE_IP, ident.ip, expires,
                                               reason=alert.attack_class))
        elif kind == SUSPEND_SESSION:
            if ident.session_id:
                self.block_lists.upsert(BlockEntry(SOURCE_SESSION,
                                                   ident.session_id, expires,
                                                   reason=alert.attack_class))
        elif kind == SUSPEND_SERVICE:
            tpl = alert.requested_url.partition("?")[0]
            self.block_lists.upsert(BlockEntry(TARGET_PATH, tpl, expires,
                                               reason=alert.attack_class))
        elif kind == FORCE_LOGOUT:
            if ident.session_id:
                self.sessions.invalidate(ident.session_id)
                if self.mark_ledger is not None:
                    self.mark_ledger.drop_session(ident.session_id)
        elif kind == MONITOR:
            self._set_watch(ident.session_id, alert.attack_class)
        # log_only, reject_request, challenge_2f need no store mutation
        if action.monitor and kind != MONITOR:
            self._set_watch(ident.session_id, alert.attack_class)

    def _set_watch(self, session_id: str | None, attack_class: str) -> None:
        session = self.sessions.get(session_id) if session_id else None
        if session is not None:
            session.watch_flag = True
            session.watch_class = attack_class

    def _log(self, alert, action, now, note, kind_override=None):
        self.event_logger.defender_record(
            now=now, alert=alert,
            action_kind=kind_override or action.kind, note=note)
