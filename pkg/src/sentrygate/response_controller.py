"""Outbound rewriting: leak scrubbing, anti-CSRF token injection, keyed
marking of server-set parameters, and authenticated cookie sealing.

All HTML work is regex-over-bytes (via latin-1 round-tripping); no DOM is
built, and bytes the rules do not touch are preserved exactly.
"""

from __future__ import annotations

import base64
import json
import re
import threading
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .alerts import Alert, ClientIdentity, clip_evidence, TAMPERING, HIGH
from .httpmsg import Response
from .keys import SEAL_LABEL, derive_key, mark_digest

MODULE = "response_controller"

TOKEN_PARAM = "__ips_token"

_NONCE_LEN = 12

_FORM_TAG_RE = re.compile(rb"<form\b[^>]*>", re.IGNORECASE)
_METHOD_ATTR_RE = re.compile(rb"""method\s*=\s*["']?([a-zA-Z]+)""", re.IGNORECASE)
_ANCHOR_RE = re.compile(rb"""(<a\b[^>]*?href\s*=\s*)(["'])(.*?)\2""",
                        re.IGNORECASE | re.DOTALL)
_HIDDEN_INPUT_RE = re.compile(
    rb"""<input\b[^>]*type\s*=\s*["']?hidden["']?[^>]*>""", re.IGNORECASE)
_NAME_ATTR_RE = re.compile(rb"""name\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s>]+))""",
                           re.IGNORECASE)
_VALUE_ATTR_RE = re.compile(rb"""value\s*=\s*(?:"([^"]*)"|'([^']*)'|([^\s>]+))""",
                            re.IGNORECASE)

STATE_CHANGING = {b"post", b"put", b"delete", b"patch"}


def _is_html(response: Response) -> bool:
    ctype = response.first_header("content-type") or ""
    return ctype.split(";")[0].strip().lower() == "text/html"


def _attr(match_groups) -> bytes | None:
    for g in match_groups:
        if g is not None:
            return g
    return None


# --- leak scrubbing ---------------------------------------------------------

@dataclass
class LeakRule:
    label: str
    pattern_text: str
    replacement: str

    def __post_init__(self) -> None:
        if re.search(r"\\\d|\\g<", self.replacement):
            raise ValueError(f"rule {self.label}: replacement must be generic, "
                             "no capture references")
        self.re_str = re.compile(self.pattern_text)
        self.re_bytes = re.compile(self.pattern_text.encode("iso-8859-1"))


class LeakRuleSet:
    def __init__(self, rules: list[dict]) -> None:
        self.rules = [LeakRule(label=r["label"], pattern_text=r["pattern"],
                               replacement=r["replacement"]) for r in rules]

    @classmethod
    def from_file(cls, path: str) -> "LeakRuleSet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))


DEFAULT_LEAK_RULES: list[dict] = [
    {"label": "server-banner", "replacement": "server",
     "pattern": r"(?:Apache|nginx|Microsoft-IIS|Jetty|Tomcat)/[0-9][0-9.]*[^\s\"'<,;)]*(?:\s*\([^)]*\))?"},
    {"label": "db-error", "replacement": "database error",
     "pattern": r"(?:ODBC SQL Server Driver|ORA-\d{5}|MySQL server version for the right syntax)[^\"'<\n]*"},
    {"label": "stack-trace", "replacement": "internal error",
     "pattern": r"Traceback \(most recent call last\):[^\"'<]*"},
]


def scrub(response: Response, rules: LeakRuleSet) -> list[tuple[str, int]]:
    """Replace leak matches in body and header values in place.

    Returns (label, count) pairs for every rule that fired; Content-Length
    is recomputed when the body changed.  Idempotent as long as no
    replacement re-triggers a rule, which the shipped rules guarantee.
    """
    counts: dict[str, int] = {}
    body = response.body
    for rule in rules.rules:
        body, n = rule.re_bytes.subn(rule.replacement.encode("iso-8859-1"), body)
        if n:
            counts[rule.label] = counts.get(rule.label, 0) + n
    if body != response.body:
        response.body = body
        if response.first_header("content-length") is not None:
            response.replace_header("Content-Length", str(len(body)))
    new_headers: list[tuple[str, str]] = []
    for name, value in response.headers:
        for rule in rules.rules:
            value, n = rule.re_str.subn(rule.replacement, value)
            if n:
                counts[rule.label] = counts.get(rule.label, 0) + n
        new_headers.append((name, value))
    response.headers = new_headers
    return sorted(counts.items())


# --- anti-CSRF token injection ----------------------------------------------

def inject_csrf(response: Response, token: str,
                sensitive_templates: set[str]) -> int:
    """Give every state-changing form a hidden token field and append the
    token to same-origin links that target sensitive routes.

    Returns how many forms were amended.  Non-HTML responses are left
    byte-identical.
    """
    if not _is_html(response):
        return 0
    body = response.body
    token_b = token.encode("ascii")
    forms = 0

    def _form_sub(m: re.Match) -> bytes:
        nonlocal forms
        tag = m.group(0)
        method = _METHOD_ATTR_RE.search(tag)
        if method is None or method.group(1).lower() not in STATE_CHANGING:
            return tag
        forms += 1
        return tag + (b'<input type="hidden" name="' + TOKEN_PARAM.encode()
                      + b'" value="' + token_b + b'">')

    body = _FORM_TAG_RE.sub(_form_sub, body)

    from .preprocessor import path_template  # local import avoids a cycle

    def _anchor_sub(m: re.Match) -> bytes:
        prefix, quote, href = m.group(1), m.group(2), m.group(3)
        href_text = href.decode("iso-8859-1")
        if "://" in href_text or href_text.startswith("//"):
            return m.group(0)       # cross-origin links are never touched
        path = href_text.partition("?")[0].partition("#")[0]
        if path_template(path) not in sensitive_templates:
            return m.group(0)
        sep = "&" if "?" in href_text else "?"
        amended = f"{href_text}{sep}{TOKEN_PARAM}={token}"
        return prefix + quote + amended.encode("iso-8859-1") + quote

    body = _ANCHOR_RE.sub(_anchor_sub, body)

    if body != response.body:
        response.body = body
        if response.first_header("content-length") is not None:
            response.replace_header("Content-Length", str(len(body)))
    return forms


# --- marking server-set parameters ------------------------------------------

class MarkLedger:
    """Digests of (session, param) values the server handed out; the
    validator replays the keyed hash against what the client sends back."""

    def __init__(self, secret: bytes) -> None:
        self._secret = secret           # never serialized
        self._entries: dict[tuple[str, str], bytes] = {}
        self._lock = threading.RLock()

    def record(self, session_id: str, name: str, value: bytes) -> None:
        with self._lock:
            self._entries[(session_id, name)] = mark_digest(
                self._secret, session_id, name, value)

    def lookup(self, session_id: str, name: str) -> bytes | None:
        return self._entries.get((session_id, name))

    def drop_session(self, session_id: str) -> None:
        with self._lock:
            dead = [k for k in self._entries if k[0] == session_id]
            for k in dead:
                del self._entries[k]

    def __len__(self) -> int:
        return len(self._entries)


def extract_set_values(response: Response) -> list[tuple[str, bytes]]:
    """(name, value) pairs the response hands to the client: hidden form
    fields, Set-Cookie values, and query parameters on relative links."""
    out: list[tuple[str, bytes]] = []
    if _is_html(response):
        for m in _HIDDEN_INPUT_RE.finditer(response.body):
            tag = m.group(0)
            name_m = _NAME_ATTR_RE.search(tag)
            value_m = _VALUE_ATTR_RE.search(tag)
            if name_m and value_m:
                name = _attr(name_m.groups()).decode("iso-8859-1")
                value = _attr(value_m.groups())
                out.append((name, value))
        for m in _ANCHOR_RE.finditer(response.body):
            href = m.group(3).decode("iso-8859-1")
            if "://" in href or href.startswith("//"):
                continue
            query = href.partition("?")[2].partition("#")[0]
            if not query:
                continue
            for piece in query.split("&"):
                name, eq, value = piece.partition("=")
                if eq:
                    out.append((name, value.encode("iso-8859-1")))
    for header_value in response.header_values("set-cookie"):
        first = header_value.split(";", 1)[0]
        name, eq, value = first.partition("=")
        if eq:
            out.append((name.strip(), value.encode("iso-8859-1")))
    return out


def mark(response: Response, session_id: str, watched: set[str],
         ledger: MarkLedger) -> list[str]:
    """Record digests for watched parameters this response sets.
    The latest sighting wins.  Returns the marked names in order."""
    marked: list[str] = []
    for name, value in extract_set_values(response):
        if name in watched:
            ledger.record(session_id, name, value)
            marked.append(name)
    return marked


# --- cookie sealing ---------------------------------------------------------

class UnsealFailure(ValueError):
    """Ciphertext failed authentication: tampered or not ours."""


class CookieSealer:
    def __init__(self, secret: bytes, rng) -> None:
        self._aead = AESGCM(derive_key(secret, SEAL_LABEL))
        self._rng = rng     # seeded in replay, crypto-random in serve mode

    def seal(self, name: str, value: str) -> str:
        nonce = self._rng.randbytes(_NONCE_LEN)
        ct = self._aead.encrypt(nonce, value.encode("utf-8"),
                                name.encode("utf-8"))
        return base64.urlsafe_b64encode(nonce + ct).decode("ascii")

    def unseal(self, name: str, sealed: str) -> str:
        try:
            blob = base64.urlsafe_b64decode(sealed.encode("ascii"))
        except (ValueError, UnicodeEncodeError) as exc:
            raise UnsealFailure(f"cookie {name}: undecodable") from exc
        if len(blob) <= _NONCE_LEN:
            raise UnsealFailure(f"cookie {name}: too short")
        try:
            plain = self._aead.decrypt(blob[:_NONCE_LEN], blob[_NONCE_LEN:],
                                       name.encode("utf-8"))
        except InvalidTag as exc:
            raise UnsealFailure(f"cookie {name}: authentication failed") from exc
        return plain.decode("utf-8")


def seal_cookies(response: Response, names: set[str], sealer: CookieSealer
                 ) -> list[str]:
    """Seal designated Set-Cookie values; everything else passes verbatim."""
    sealed: list[str] = []
    new_headers: list[tuple[str, str]] = []
    for hname, hvalue in response.headers:
        if hname.lower() == "set-cookie":
            first, semi, rest = hvalue.partition(";")
            cname, eq, cvalue = first.partition("=")
            if eq and cname.strip() in names:
                hvalue = f"{cname}={sealer.seal(cname.strip(), cvalue)}{semi}{rest}"
                sealed.append(cname.strip())
        new_headers.append((hname, hvalue))
    response.headers = new_headers
    return sealed


def unseal_request_cookies(cookies: dict[str, str], names: set[str],
                           sealer: CookieSealer, identity: ClientIdentity,
                           requested_url: str, severity_map: dict[str, str]
                           ) -> tuple[dict[str, str], Alert | None]:
    """Unseal inbound sealed cookies.  A failed seal is hard evidence of
    tampering and alerts at high severity and confidence."""
    out = dict(cookies)
    for name in sorted(names & cookies.keys()):
        try:
            out[name] = sealer.unseal(name, cookies[name])
        except UnsealFailure as exc:
            alert = Alert(attack_class=TAMPERING,
                          severity=severity_map.get(TAMPERING, HIGH),
                          confidence=HIGH, score=1.0, module=MODULE,
                          evidence=clip_evidence(str(exc)),
                          identity=identity, requested_url=requested_url)
            return out, alert
    return out, None
