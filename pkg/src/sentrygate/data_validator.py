"""Per-parameter validation: six categories, each with its own scheme.

text           -> attack-signature blacklist over the canonical form
numeric        -> number-literal type check
enumerated     -> trained closed value set
format_specific-> binned character-distribution chi-square test
web_address    -> trusted-destination whitelist
application    -> keyed-hash round trip against values the server issued
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .alerts import (
    Alert, ClientIdentity, clip_evidence,
    SQLI, XSS, INJECTION_OTHER, TYPE_VIOLATION, ENUM_VIOLATION,
    FORMAT_VIOLATION, OPEN_REDIRECT, TAMPERING, HIGH, LOW, ATTACK_CLASSES,
)
from .keys import digests_equal, mark_digest
from .preprocessor import CanonicalRequest, ParamValue

MODULE = "data_validator"

TEXT = "text"
NUMERIC = "numeric"
ENUMERATED = "enumerated"
FORMAT_SPECIFIC = "format_specific"
WEB_ADDRESS = "web_address"
APPLICATION = "application"

CATEGORIES = (TEXT, NUMERIC, ENUMERATED, FORMAT_SPECIFIC, WEB_ADDRESS, APPLICATION)

QUERY = "query"
BODY = "body"
HEADER = "header"
COOKIE = "cookie"

N_MIN = 50

# Rank ranges (1-based, inclusive) for the six character-frequency bins.
RANK_BINS = ((1, 1), (2, 4), (5, 7), (8, 12), (13, 16), (17, 256))
CHI2_FLOOR = 11.07          # chi-square 0.95 quantile, 5 degrees of freedom
_EXPECTED_EPS = 1e-6

_NUMERIC_RE = re.compile(r"^[+-]?\d+(\.\d+)?$")
_SCHEME_RE = re.compile(r"^[a-zA-Z][a-zA-Z0-9+.-]*://")

# Headers that are framing or handled by other stages, not user data.
SKIP_HEADERS = frozenset({
    "cookie", "content-length", "content-type", "host", "connection",
    "accept-encoding", "transfer-encoding",
})


@dataclass(frozen=True)
class ParamSpec:
    path_template: str
    location: str
    name: str
    category: str
    source: str = "learned"     # "configured" | "learned"

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    @property
    def scope_key(self) -> str:
        return scope_key(self.path_template, self.location, self.name)


def scope_key(template: str, location: str, name: str) -> str:
    return f"{template}|{location}|{name}"


# --- signatures -------------------------------------------------------------

@dataclass
class SignatureRule:
    rule_id: str
    pattern: re.Pattern
    attack_class: str
    severity: str
    hits: int = 0


class SignatureSet:
    """Compiled blacklist rules, matched against the case-folded canonical."""

    def __init__(self, rules: list[dict]) -> None:
        self.rules: list[SignatureRule] = []
        for raw in rules:
            cls = raw["class"]
            if cls not in ATTACK_CLASSES:
                raise ValueError(f"rule {raw['id']}: unknown class {cls!r}")
            self.rules.append(SignatureRule(
                rule_id=raw["id"],
                pattern=re.compile(raw["pattern"], re.IGNORECASE),
                attack_class=cls,
                severity=raw.get("severity", HIGH),
            ))

    @classmethod
    def from_file(cls, path: str) -> "SignatureSet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def match(self, folded: str) -> SignatureRule | None:
        for rule in self.rules:
            if rule.pattern.search(folded):
                rule.hits += 1
                return rule
        return None


# Starter rule pack.  Deliberately small and readable; a deployment is
# expected to grow this file, not to treat it as complete coverage.
STARTER_RULES: list[dict] = [
    {"id": "sqli-tautology", "class": SQLI, "severity": HIGH,
     "pattern": r"['\"]\s*(or|and)\b\s*['\"0-9a-z_]+\s*="},
    {"id": "sqli-union-select", "class": SQLI, "severity": HIGH,
     "pattern": r"union\s+(all\s+)?select"},
    {"id": "sqli-stacked-query", "class": SQLI, "severity": HIGH,
     "pattern": r";\s*(drop|delete|insert|update|shutdown)\b"},
    {"id": "xss-script-tag", "class": XSS, "severity": HIGH,
     "pattern": r"<\s*/?\s*script\b"},
    {"id": "xss-event-handler", "class": XSS, "severity": HIGH,
     "pattern": r"\bon(error|load|click|mouseover|focus|submit|keydown)\s*="},
    {"id": "xss-js-uri", "class": XSS, "severity": HIGH,
     "pattern": r"javascript\s*:"},
    {"id": "path-traversal", "class": INJECTION_OTHER, "severity": HIGH,
     "pattern": r"\.\./|\.\.\\"},
]


# --- enumerated -------------------------------------------------------------

@dataclass
class EnumModel:
    allowed: set[str]
    samples_seen: int

    def __post_init__(self) -> None:
        if not self.allowed:
            raise ValueError("enumerated model needs a non-empty value set")

    def to_dict(self) -> dict:
        return {"allowed": sorted(self.allowed), "samples": self.samples_seen}

    @classmethod
    def from_dict(cls, data: dict) -> "EnumModel":
        return cls(allowed=set(data["allowed"]), samples_seen=data["samples"])


def train_enumerated(samples: list[str]) -> EnumModel | None:
    """Decide whether a sampled parameter is a closed enumeration.

    Enumerated iff the distinct count d satisfies d <= max(10, 0.05*n) and
    no previously unseen value appears in the final third of the stream
    (pinned: indices >= (2*n)//3).  Returns None otherwise, or when fewer
    than N_MIN samples exist; the caller falls back to text.
    """
    n = len(samples)
    if n < N_MIN:
        return None
    seen: set[str] = set()
    last_new_index = -1
    for i, value in enumerate(samples):
        if value not in seen:
            seen.add(value)
            last_new_index = i
    if len(seen) > max(10, 0.05 * n):
        return None
    if last_new_index >= (2 * n) // 3:
        return None
    return EnumModel(allowed=seen, samples_seen=n)


# --- character-distribution format model ------------------------------------

def binned_distribution(data: bytes) -> np.ndarray:
    """Relative byte frequencies, sorted descending, aggregated into the
    six rank bins.  Sums to 1 for non-empty input."""
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    ranked = np.sort(counts)[::-1].astype(float)
    out = np.empty(len(RANK_BINS), dtype=float)
    for j, (lo, hi) in enumerate(RANK_BINS):
        out[j] = ranked[lo - 1:hi].sum()
    return out / len(data)


def chi2_score(data: bytes, idealized: np.ndarray) -> float:
    """Binned chi-square of one value against the trained distribution.

    Observed values are counts; expected counts are the idealized mass
    (floored at 1e-6 to stay finite) scaled by the value's length.
    """
    n = len(data)
    observed = binned_distribution(data) * n
    expected = np.maximum(np.asarray(idealized, dtype=float), _EXPECTED_EPS) * n
    diff = observed - expected
    # diff * diff, not ** 2: numpy's vectorized pow is not correctly rounded
    return float((diff * diff / expected).sum())


@dataclass
class CharDistModel:
    idealized: np.ndarray
    chi2_threshold: float
    samples_seen: int = 0

    def __post_init__(self) -> None:
        self.idealized = np.asarray(self.idealized, dtype=float)
        if self.idealized.shape != (len(RANK_BINS),):
            raise ValueError("idealized distribution must have six bins")
        if abs(float(self.idealized.sum()) - 1.0) > 1e-9:
            raise ValueError("idealized distribution must sum to 1")

    def score(self, value: str) -> float:
        return chi2_score(value.encode("utf-8", "replace"), self.idealized)

    def to_dict(self) -> dict:
        return {"idealized": [float(x) for x in self.idealized],
                "chi2_threshold": self.chi2_threshold,
                "samples": self.samples_seen}

    @classmethod
    def from_dict(cls, data: dict) -> "CharDistModel":
        return cls(idealized=data["idealized"],
                   chi2_threshold=data["chi2_threshold"],
                   samples_seen=data.get("samples", 0))


def train_format(samples: list[str]) -> CharDistModel | None:
    """Fit the idealized distribution as the mean of per-sample binned
    distributions; the alert threshold is the 95th percentile of training
    scores, floored at 11.07."""
    encoded = [s.encode("utf-8", "replace") for s in samples if s]
    if len(encoded) < N_MIN:
        return None
    dists = np.stack([binned_distribution(b) for b in encoded])
    idealized = dists.mean(axis=0)
    idealized = idealized / idealized.sum()
    scores = [chi2_score(b, idealized) for b in encoded]
    threshold = max(CHI2_FLOOR,
                    float(np.percentile(scores, 95, method="higher")))
    return CharDistModel(idealized=idealized, chi2_threshold=threshold,
                         samples_seen=len(encoded))


# --- web addresses ----------------------------------------------------------

@dataclass
class UrlWhitelist:
    trusted: list[tuple[str | None, str, str]] = field(default_factory=list)
    allow_relative_same_site: bool = True

    def to_dict(self) -> dict:
        return {"trusted": [[s, h, p] for (s, h, p) in self.trusted],
                "allow_relative_same_site": self.allow_relative_same_site}

    @classmethod
    def from_dict(cls, data: dict) -> "UrlWhitelist":
        return cls(trusted=[(s, h, p) for (s, h, p) in data.get("trusted", [])],
                   allow_relative_same_site=data.get("allow_relative_same_site", True))

    def add(self, scheme: str | None, host: str, path_prefix: str = "") -> None:
        entry = (scheme, host.lower(), path_prefix)
        if entry not in self.trusted:
            self.trusted.append(entry)

    def permits(self, scheme: str | None, host: str, path: str) -> bool:
        host = host.lower()
        for t_scheme, t_host, t_prefix in self.trusted:
            if t_scheme is not None and scheme is not None and t_scheme != scheme:
                continue
            if host == t_host and path.startswith(t_prefix):
                return True
        return False


def split_web_address(value: str) -> tuple[str | None, str | None, str]:
    """(scheme, host, path).  host None means relative-same-site.

    A value is absolute only with an explicit scheme, a "//" prefix, or a
    leading "www."; anything else (appadmin.jsp, /account) stays relative.
    """
    v = value.strip()
    m = _SCHEME_RE.match(v)
    if m:
        scheme = v[:m.end() - 3].lower()
        rest = v[m.end():]
        host, _, path = rest.partition("/")
        return scheme, host, "/" + path if path or rest.endswith("/") else "/"
    if v.startswith("//"):
        rest = v[2:]
        host, _, path = rest.partition("/")
        return None, host, "/" + path
    if v.lower().startswith("www."):
        host, _, path = v.partition("/")
        return None, host, "/" + path
    return None, None, v


# --- the validator ----------------------------------------------------------

@dataclass
class ValidationModels:
    specs: dict[str, ParamSpec] = field(default_factory=dict)
    enums: dict[str, EnumModel] = field(default_factory=dict)
    formats: dict[str, CharDistModel] = field(default_factory=dict)
    url_whitelist: UrlWhitelist = field(default_factory=UrlWhitelist)
    watched_params: set[str] = field(default_factory=set)
    # Configured address-carrying parameter names; these stay
    # destination-checked even on templates never seen in training.
    url_param_names: set[str] = field(default_factory=set)


class DataValidator:
    """Walks every parameter of a request in wire order and applies exactly
    one category scheme to each; the first alert wins."""

    def __init__(self, signatures: SignatureSet, models: ValidationModels,
                 severity_map: dict[str, str],
                 enumerated_headers: set[str] | None = None) -> None:
        self.signatures = signatures
        self.models = models
        self.severity = severity_map
        self.enumerated_headers = {h.lower() for h in (enumerated_headers or set())}

    def _spec_for(self, template: str, location: str, name: str) -> ParamSpec:
        key = scope_key(template, location, name)
        spec = self.models.specs.get(key)
        if spec is not None:
            return spec
        if location == BODY or location == QUERY:
            if name.lower() in self.models.url_param_names:
                return ParamSpec(template, location, name, WEB_ADDRESS,
                                 source="configured")
        if location == BODY or location == QUERY or location == COOKIE:
            if name in self.models.watched_params:
                return ParamSpec(template, location, name, APPLICATION)
        return ParamSpec(template, location, name, TEXT)

    def validate(self, req: CanonicalRequest, *, ledger=None,
                 secret: bytes | None = None) -> Alert | None:
        for alert in self.iter_verdicts(req, ledger=ledger, secret=secret):
            return alert
        return None

    def iter_verdicts(self, req: CanonicalRequest, *, ledger=None,
                      secret: bytes | None = None):
        tpl = req.path_template
        for name, pv in req.query_params.items():
            alert = self._validate_one(req, tpl, QUERY, name, pv, ledger, secret)
            if alert:
                yield alert
        for name, pv in req.body_params.items():
            alert = self._validate_one(req, tpl, BODY, name, pv, ledger, secret)
            if alert:
                yield alert
        for name, pv in req.cookies.items():
            alert = self._validate_one(req, tpl, COOKIE, name, pv, ledger, secret)
            if alert:
                yield alert
        for hname, values in req.headers.items():
            if hname in SKIP_HEADERS:
                continue
            for value in values:
                pv = ParamValue(original=value.encode("iso-8859-1", "replace"),
                                canonical=value, decode_rounds=0)
                alert = self._validate_one(req, tpl, HEADER, hname, pv,
                                           ledger, secret)
                if alert:
                    yield alert

    def _validate_one(self, req, template, location, name, pv, ledger, secret):
        spec = self._spec_for(template, location, name)
        # The signature blacklist guards every category; the per-category
        # scheme only runs on values that come back clean.
        hit = self._check_text(req, spec, pv, ledger, secret)
        if hit is not None or spec.category == TEXT:
            return hit
        handler = {
            NUMERIC: self._check_numeric,
            ENUMERATED: self._check_enumerated,
            FORMAT_SPECIFIC: self._check_format,
            WEB_ADDRESS: self._check_url,
            APPLICATION: self._check_application,
        }[spec.category]
        return handler(req, spec, pv, ledger, secret)

    def _alert(self, req, attack_class, confidence, score, spec, pv,
               severity=None) -> Alert:
        return Alert(
            attack_class=attack_class,
            severity=severity or self.severity.get(attack_class, LOW),
            confidence=confidence,
            score=score,
            module=MODULE,
            evidence=clip_evidence(f"{spec.location}:{spec.name}={pv.canonical}"),
            identity=req.identity,
            requested_url=req.requested_url,
        )

    def _check_text(self, req, spec, pv, ledger, secret) -> Alert | None:
        rule = self.signatures.match(pv.folded)
        if rule is None:
            return None
        alert = self._alert(req, rule.attack_class, HIGH, 1.0, spec, pv,
                            severity=rule.severity)
        alert.evidence = clip_evidence(
            f"{spec.location}:{spec.name} rule={rule.rule_id} {pv.canonical}")
        return alert

    def _check_numeric(self, req, spec, pv, ledger, secret) -> Alert | None:
        if _NUMERIC_RE.match(pv.canonical):
            return None
        return self._alert(req, TYPE_VIOLATION, HIGH, 1.0, spec, pv)

    def _check_enumerated(self, req, spec, pv, ledger, secret) -> Alert | None:
        model = self.models.enums.get(spec.scope_key)
        if model is None or pv.canonical in model.allowed:
            return None
        return self._alert(req, ENUM_VIOLATION, HIGH, 1.0, spec, pv)

    def _check_format(self, req, spec, pv, ledger, secret) -> Alert | None:
        model = self.models.formats.get(spec.scope_key)
        if model is None:
            return None
        if not pv.canonical:
            # Zero-length never matched a trained distribution.
            return self._alert(req, FORMAT_VIOLATION, HIGH, float("inf"), spec, pv)
        score = model.score(pv.canonical)
        if score <= model.chi2_threshold:
            return None
        confidence = HIGH if score > 2 * model.chi2_threshold else LOW
        return self._alert(req, FORMAT_VIOLATION, confidence, score, spec, pv)

    def _check_url(self, req, spec, pv, ledger, secret) -> Alert | None:
        wl = self.models.url_whitelist
        scheme, host, path = split_web_address(pv.canonical)
        if host is None:
            # Relative targets stay on this site; ".." escapes do not.
            if wl.allow_relative_same_site and ".." not in path.split("?")[0]:
                return None
            return self._alert(req, OPEN_REDIRECT, HIGH, 1.0, spec, pv)
        if wl.permits(scheme, host, path):
            return None
        return self._alert(req, OPEN_REDIRECT, HIGH, 1.0, spec, pv)

    def _check_application(self, req, spec, pv, ledger, secret) -> Alert | None:
        sid = req.session_id
        recorded = ledger.lookup(sid, spec.name) if (ledger and sid) else None
        if recorded is None:
            alert = self._alert(req, TAMPERING, HIGH, 1.0, spec, pv)
            alert.evidence = clip_evidence(
                f"{spec.location}:{spec.name} never issued for this session")
            return alert
        fresh = mark_digest(secret, sid, spec.name, pv.original)
        if digests_equal(recorded, fresh):
            return None
        return self._alert(req, TAMPERING, HIGH, 1.0, spec, pv)
