"""Request normalization: decoding to a canonical form, path templating,
and the static-asset filter that keeps detector work off css/png noise.
"""

from __future__ import annotations

import html
import re
from dataclasses import dataclass, field
from urllib.parse import unquote, unquote_plus

from .alerts import ClientIdentity
from .httpmsg import RawRequest

DOUBLE_ENCODED = "DOUBLE_ENCODED"

DEFAULT_DECODE_CAP = 3

DEFAULT_STATIC_EXTENSIONS = (
    "png", "jpg", "jpeg", "gif", "ico", "css", "js", "svg",
    "woff", "woff2", "ttf", "map", "webp",
)

_WS_RUN_RE = re.compile(r"\s+")
_NUMERIC_SEGMENT_RE = re.compile(r"^\d+$")


@dataclass
class ParamValue:
    """One submitted value: the wire bytes plus the fully decoded form.

    `canonical` is what detectors reason about; `original` is what the
    client actually sent and is never altered.
    """

    original: bytes
    canonical: str
    decode_rounds: int
    flags: frozenset[str] = frozenset()

    @property
    def folded(self) -> str:
        """Case-folded copy for pattern matching."""
        return self.canonical.casefold()


def _decode_once(text: str, query_context: bool) -> str:
    if query_context:
        text = unquote_plus(text, errors="replace")
    else:
        text = unquote(text, errors="replace")
    return html.unescape(text)


def canonicalize(value: bytes | str, *, query_context: bool = False,
                 decode_cap: int = DEFAULT_DECODE_CAP) -> ParamValue:
    """Decode a value to a fixed point (or the round cap), then tidy whitespace.

    Each round applies percent-decoding (plus '+'-to-space in query context)
    and HTML entity decoding.  Rounds that change nothing end the loop;
    decode_rounds counts only rounds that changed the value.  A change in
    round two or later marks the value DOUBLE_ENCODED.  Invalid percent
    escapes pass through untouched.
    """
    original = value.encode("utf-8", "replace") if isinstance(value, str) else value
    text = original.decode("utf-8", "replace")
    rounds = 0
    flags: set[str] = set()
    while rounds < decode_cap:
        decoded = _decode_once(text, query_context)
        if decoded == text:
            break
        rounds += 1
        if rounds >= 2:
            flags.add(DOUBLE_ENCODED)
        text = decoded
    text = _WS_RUN_RE.sub(" ", text).strip()
    return ParamValue(original=original, canonical=text,
                      decode_rounds=rounds, flags=frozenset(flags))


def path_template(path: str) -> str:
    """Collapse numeric path segments to {id} so /product/42 and /product/7 agree."""
    segments = path.split("/")
    out = []
    for seg in segments:
        out.append("{id}" if _NUMERIC_SEGMENT_RE.match(seg) else seg)
    return "/".join(out)


def _split_pairs(encoded: str) -> list[tuple[str, bytes]]:
    pairs: list[tuple[str, bytes]] = []
    if not encoded:
        return pairs
    for item in encoded.split("&"):
        if not item:
            continue
        name, _, value = item.partition("=")
        pairs.append((unquote_plus(name, errors="replace"),
                      value.encode("iso-8859-1", "replace")))
    return pairs


@dataclass
class CanonicalRequest:
    identity: ClientIdentity
    method: str
    path: str                      # decoded path
    raw_path: str                  # as sent on the wire
    path_template: str
    headers: dict[str, list[str]]  # lower-cased names
    cookies: dict[str, ParamValue]
    query_params: dict[str, ParamValue]
    body_params: dict[str, ParamValue]
    received_at: float
    session_id: str | None = None
    evasion_flags: frozenset[str] = frozenset()
    raw: RawRequest | None = None

    @property
    def requested_url(self) -> str:
        return self.raw.target if self.raw else self.raw_path

    def param(self, name: str) -> ParamValue | None:
        """Look a parameter up in body first, then query."""
        if name in self.body_params:
            return self.body_params[name]
        return self.query_params.get(name)

    def header(self, name: str) -> str | None:
        vals = self.headers.get(name.lower())
        return vals[0] if vals else None


def canonicalize_request(raw: RawRequest, *, session_cookie_name: str = "SESSIONID",
                         decode_cap: int = DEFAULT_DECODE_CAP) -> CanonicalRequest:
    """Build the canonical view every detector consumes."""
    raw_path, _, raw_query = raw.target.partition("?")
    path_value = canonicalize(raw_path, query_context=False, decode_cap=decode_cap)
    path = path_value.canonical or "/"

    headers: dict[str, list[str]] = {}
    for name, value in raw.headers:
        headers.setdefault(name.lower(), []).append(value)

    cookies: dict[str, ParamValue] = {}
    for header_value in headers.get("cookie", []):
        for piece in header_value.split(";"):
            piece = piece.strip()
            if not piece:
                continue
            cname, _, cvalue = piece.partition("=")
            cookies[cname.strip()] = canonicalize(
                cvalue.encode("iso-8859-1", "replace"),
                query_context=False, decode_cap=decode_cap)

    query_params = {
        name: canonicalize(raw_value, query_context=True, decode_cap=decode_cap)
        for name, raw_value in _split_pairs(raw_query)
    }

    body_params: dict[str, ParamValue] = {}
    ctype = next(iter(headers.get("content-type", [])), "")
    if ctype.split(";")[0].strip().lower() == "application/x-www-form-urlencoded":
        body_text = raw.body.decode("iso-8859-1", "replace")
        body_params = {
            name: canonicalize(raw_value, query_context=True, decode_cap=decode_cap)
            for name, raw_value in _split_pairs(body_text)
        }

    session_cookie = cookies.get(session_cookie_name)
    session_id = session_cookie.original.decode("iso-8859-1") if session_cookie else None

    flags: set[str] = set(path_value.flags)
    for pv in (*cookies.values(), *query_params.values(), *body_params.values()):
        flags |= pv.flags

    ua = headers.get("user-agent", [None])[0]
    identity = ClientIdentity(ip=raw.source_ip, user_agent=ua, session_id=session_id)

    return CanonicalRequest(
        identity=identity,
        method=raw.method,
        path=path,
        raw_path=raw_path,
        path_template=path_template(path),
        headers=headers,
        cookies=cookies,
        query_params=query_params,
        body_params=body_params,
        received_at=raw.received_at,
        session_id=session_id,
        evasion_flags=frozenset(flags),
        raw=raw,
    )


# --- static asset filtering -------------------------------------------------

@dataclass
class StaticAssetModel:
    """What counts as a static subresource: known extensions plus templates
    learned to appear only as page subresources in training traffic."""

    extension_set: set[str] = field(
        default_factory=lambda: set(DEFAULT_STATIC_EXTENSIONS))
    learned_paths: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        if not self.extension_set:
            raise ValueError("extension_set must not be empty")

    def to_dict(self) -> dict:
        return {
            "extensions": sorted(self.extension_set),
            "learned_paths": sorted(self.learned_paths),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StaticAssetModel":
        return cls(extension_set=set(data.get("extensions", DEFAULT_STATIC_EXTENSIONS)),
                   learned_paths=set(data.get("learned_paths", [])))


def extension_of(path: str) -> str | None:
    last = path.rsplit("/", 1)[-1]
    if "." not in last:
        return None
    return last.rsplit(".", 1)[-1].lower()


def should_monitor(req: CanonicalRequest, model: StaticAssetModel) -> bool:
    """False means the request is a static subresource and skips all detectors."""
    ext = extension_of(req.path)
    if ext is not None and ext in model.extension_set:
        return False
    if req.path_template in model.learned_paths:
        return False
    return True


def train_request_filter(records, *, defaults=DEFAULT_STATIC_EXTENSIONS):
    """Learn the asset filter from a labeled trace.

    A template joins learned_paths only if every sighting was labeled as a
    subresource; an extension is added only when it never appears on a
    navigation request.  An empty trace falls back to the configured defaults.
    """
    nav_templates: set[str] = set()
    asset_templates: set[str] = set()
    nav_exts: set[str] = set()
    asset_exts: set[str] = set()
    seen = False
    for rec in records:
        seen = True
        target = rec["target"] if isinstance(rec, dict) else rec.target
        label = rec["label"] if isinstance(rec, dict) else rec.label
        path = target.partition("?")[0]
        tpl = path_template(canonicalize(path).canonical or "/")
        ext = extension_of(path)
        if label == "asset":
            asset_templates.add(tpl)
            if ext:
                asset_exts.add(ext)
        else:
            nav_templates.add(tpl)
            if ext:
                nav_exts.add(ext)
    model = StaticAssetModel(extension_set=set(defaults))
    if not seen:
        return model
    model.learned_paths = asset_templates - nav_templates
    model.extension_set |= asset_exts - nav_exts
    return model
