"""HTTP/1.1 message parsing and the small response type the proxy moves around.

Only origin-form targets and identity framing are supported; chunked bodies,
HTTP/2 and multipart uploads are out of scope and rejected at the boundary.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_METHOD_RE = re.compile(r"^[A-Z]{3,10}$")
_VERSION_RE = re.compile(r"^HTTP/1\.[01]$")
_HEADER_NAME_RE = re.compile(r"^[!#$%&'*+.^_`|~0-9A-Za-z-]+$")


class MalformedRequest(ValueError):
    """Raised when the wire bytes cannot be accepted as an HTTP/1.1 request."""


@dataclass
class RawRequest:
    """A parsed-but-untouched request: bytes preserved, nothing decoded."""

    source_ip: str
    received_at: float          # seconds, millisecond precision
    method: str
    target: str                 # origin-form, starts with "/"
    version: str
    headers: list[tuple[str, str]]
    body: bytes = b""

    def header_values(self, name: str) -> list[str]:
        lname = name.lower()
        return [v for (n, v) in self.headers if n.lower() == lname]

    def first_header(self, name: str) -> str | None:
        vals = self.header_values(name)
        return vals[0] if vals else None


@dataclass
class Response:
    status: int
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""

    def header_values(self, name: str) -> list[str]:
        lname = name.lower()
        return [v for (n, v) in self.headers if n.lower() == lname]

    def first_header(self, name: str) -> str | None:
        vals = self.header_values(name)
        return vals[0] if vals else None

    def replace_header(self, name: str, value: str) -> None:
        lname = name.lower()
        self.headers = [(n, v) for (n, v) in self.headers if n.lower() != lname]
        self.headers.append((name, value))

    def drop_header(self, name: str) -> None:
        lname = name.lower()
        self.headers = [(n, v) for (n, v) in self.headers if n.lower() != lname]


def _has_ctl(line: str) -> bool:
    return any(ord(c) < 0x20 or ord(c) == 0x7F for c in line)


def parse_request(raw: bytes, *, source_ip: str, received_at: float) -> RawRequest:
    """Parse one request from wire bytes.

    Raises MalformedRequest for anything that cannot be framed safely:
    bad request line, control bytes in it, header syntax errors, a
    Content-Length that disagrees with the actual body, or transfer
    encodings this proxy does not speak.
    """
    head, sep, body = raw.partition(b"\r\n\r\n")
    if not sep:
        raise MalformedRequest("no header terminator")
    try:
        head_text = head.decode("iso-8859-1")
    except UnicodeDecodeError as exc:  # pragma: no cover - latin-1 total
        raise MalformedRequest("undecodable head") from exc

    lines = head_text.split("\r\n")
    request_line = lines[0]
    if _has_ctl(request_line):
        raise MalformedRequest("control byte in request line")
    parts = request_line.split(" ")
    if len(parts) != 3:
        raise MalformedRequest("request line must have three parts")
    method, target, version = parts
    if not _METHOD_RE.match(method):
        raise MalformedRequest(f"bad method {method!r}")
    if not target.startswith("/"):
        raise MalformedRequest("target must be origin-form")
    if not _VERSION_RE.match(version):
        raise MalformedRequest(f"unsupported version {version!r}")

    headers: list[tuple[str, str]] = []
    for line in lines[1:]:
        if not line:
            raise MalformedRequest("empty header line inside head")
        if _has_ctl(line):
            raise MalformedRequest("control byte in header")
        name, colon, value = line.partition(":")
        if not colon or not _HEADER_NAME_RE.match(name):
            raise MalformedRequest(f"bad header line {line!r}")
        headers.append((name, value.strip()))

    te = [v for (n, v) in headers if n.lower() == "transfer-encoding"]
    if te:
        raise MalformedRequest("transfer encodings not supported")

    cl_values = [v for (n, v) in headers if n.lower() == "content-length"]
    if len(cl_values) > 1:
        raise MalformedRequest("multiple content-length headers")
    if cl_values:
        try:
            declared = int(cl_values[0])
        except ValueError as exc:
            raise MalformedRequest("content-length not an integer") from exc
        if declared < 0 or declared != len(body):
            raise MalformedRequest(
                f"content-length {declared} disagrees with body {len(body)}")
    elif body:
        raise MalformedRequest("body present without content-length")

    return RawRequest(
        source_ip=source_ip,
        received_at=received_at,
        method=method,
        target=target,
        version=version,
        headers=headers,
        body=body,
    )
