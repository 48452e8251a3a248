"""Traffic traces and the replay client.

A trace is JSONL, one request per line, timestamps in epoch seconds.
Requests that depend on proxy-issued state (session cookie, per-session
form token, challenge code) carry placeholders that the replay client
resolves from what it has seen so far:

    {{session:CTX}}   session cookie value held by browser context CTX
    {{csrf:CTX}}      last form token served to CTX
    {{otp:CTX}}       challenge code for CTX's session at the record's minute

CTX names a logical browser (cookie jar), not an address, so a stolen
cookie can be expressed by referencing another context.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field

from .keys import otp_code

LABEL_BENIGN = "benign"
LABEL_ATTACK = "attack"
LABEL_ASSET = "asset"
LABELS = frozenset({LABEL_BENIGN, LABEL_ATTACK, LABEL_ASSET})

_PLACEHOLDER_RE = re.compile(r"\{\{(session|csrf|otp):([^{}:]+)\}\}")
_TOKEN_FIELD_RE = re.compile(
    rb'name="__ips_token"\s+value="([0-9a-f]+)"')
_TOKEN_LINK_RE = re.compile(rb'__ips_token=([0-9a-f]+)')


@dataclass
class TraceRecord:
    ts: float
    ip: str
    ctx: str
    method: str
    target: str
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""
    label: str = LABEL_BENIGN
    attack_class: str | None = None
    scenario: str | None = None

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValueError(f"bad trace label {self.label!r}")
        if self.label == LABEL_ATTACK and not self.attack_class:
            raise ValueError("attack records need an attack_class")

    def to_dict(self) -> dict:
        out = {
            "ts": self.ts, "ip": self.ip, "ctx": self.ctx,
            "method": self.method, "target": self.target,
            "headers": [[n, v] for n, v in self.headers],
            "body_b64": base64.b64encode(self.body).decode("ascii"),
            "label": self.label,
        }
        if self.attack_class:
            out["attack_class"] = self.attack_class
        if self.scenario:
            out["scenario"] = self.scenario
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TraceRecord":
        return cls(ts=float(data["ts"]), ip=data["ip"], ctx=data["ctx"],
                   method=data["method"], target=data["target"],
                   headers=[(n, v) for n, v in data.get("headers", [])],
                   body=base64.b64decode(data.get("body_b64", "")),
                   label=data.get("label", LABEL_BENIGN),
                   attack_class=data.get("attack_class"),
                   scenario=data.get("scenario"))


def save_trace(path: str, records: list[TraceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True))
            fh.write("\n")


def load_trace(path: str) -> list[TraceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(TraceRecord.from_dict(json.loads(line)))
    return records


class ReplayClient:
    """Stands in for the browsers behind a trace.

    Keeps a cookie jar and the last served form token per context, fills
    placeholders, and fixes Content-Length after substitution.
    """

    def __init__(self, secret: bytes, *, cookie_name: str = "SESSIONID") -> None:
        self.secret = secret
        self.cookie_name = cookie_name
        self.jars: dict[str, dict[str, str]] = {}
        self.tokens: dict[str, str] = {}

    # -- building the wire request -------------------------------------------

    def build(self, rec: TraceRecord) -> bytes:
        fill = lambda text: _PLACEHOLDER_RE.sub(
            lambda m: self._resolve(m.group(1), m.group(2), rec), text)
        target = fill(rec.target)
        headers = [(n, fill(v)) for n, v in rec.headers]
        body = fill(rec.body.decode("iso-8859-1")).encode("iso-8859-1")

        has_cookie = any(n.lower() == "cookie" for n, _ in headers)
        jar = self.jars.get(rec.ctx)
        if not has_cookie and jar:
            pairs = "; ".join(f"{k}={v}" for k, v in jar.items())
            headers.append(("Cookie", pairs))
        if body:
            headers = [(n, v) for n, v in headers
                       if n.lower() != "content-length"]
            headers.append(("Content-Length", str(len(body))))

        head = f"{rec.method} {target} HTTP/1.1\r\n"
        head += "".join(f"{n}: {v}\r\n" for n, v in headers)
        head += "\r\n"
        return head.encode("iso-8859-1") + body

    def _resolve(self, kind: str, ctx: str, rec: TraceRecord) -> str:
        if kind == "session":
            return self.jars.get(ctx, {}).get(self.cookie_name, "")
        if kind == "csrf":
            return self.tokens.get(ctx, "")
        sid = self.jars.get(ctx, {}).get(self.cookie_name, "")
        return otp_code(self.secret, sid, int(rec.ts // 60))

    # -- learning from the response ------------------------------------------

    def observe_response(self, rec: TraceRecord, response) -> None:
        jar = self.jars.setdefault(rec.ctx, {})
        for name, value in response.headers:
            if name.lower() != "set-cookie":
                continue
            first = value.split(";")[0]
            if "=" not in first:
                continue
            cname, _, cvalue = first.partition("=")
            cname = cname.strip()
            attrs = value.lower()
            if not cvalue or "max-age=0" in attrs:
                jar.pop(cname, None)
            else:
                jar[cname] = cvalue.strip()
        token = None
        for m in _TOKEN_FIELD_RE.finditer(response.body):
            token = m.group(1)
        if token is None:
            for m in _TOKEN_LINK_RE.finditer(response.body):
                token = m.group(1)
        if token is not None:
            self.tokens[rec.ctx] = token.decode("ascii")


def replay_trace(pipeline, records: list[TraceRecord], *,
                 client: ReplayClient | None = None):
    """Push a trace through a pipeline; returns [(record, verdict), ...]."""
    if client is None:
        client = ReplayClient(pipeline.secret,
                              cookie_name=pipeline.config.session_cookie_name)
    out = []
    for rec in records:
        raw = client.build(rec)
        response, verdict = pipeline.handle_bytes(raw, ip=rec.ip, now=rec.ts)
        client.observe_response(rec, response)
        out.append((rec, verdict))
    return out
