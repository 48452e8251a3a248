"""Offline learning.

Runs a labeled trace through the proxy in observation mode (detectors
dark, traffic flows, sessions and tokens behave exactly as they will in
production) while a collector samples everything the models need, then
fits the whole bundle in one shot.
"""

from __future__ import annotations

import logging
import math
import time
from collections import Counter

import numpy as np

from .access_controller import OTP_PARAM, RoleProfile
from .bot_detector import train_baseline
from .config import Config, TokenSource
from .data_validator import (
    APPLICATION, BODY, COOKIE, ENUMERATED, FORMAT_SPECIFIC, HEADER, N_MIN,
    NUMERIC, QUERY, TEXT, WEB_ADDRESS, _NUMERIC_RE, ParamSpec, UrlWhitelist,
    split_web_address, train_enumerated, train_format,
)
from .models import ModelBundle
from .pipeline import Pipeline
from .preprocessor import CanonicalRequest, train_request_filter
from .response_controller import TOKEN_PARAM, extract_set_values
from .trace import LABEL_ASSET, ReplayClient, TraceRecord
from .user_verifier import SessionRecord, UserProfile

log = logging.getLogger(__name__)

# Proxy-injected parameters never become part of a learned model.
EXCLUDED_PARAMS = frozenset({TOKEN_PARAM, OTP_PARAM})

MIN_USER_ACTIONS = 20
SAMPLE_CAP = 5000
SKELETON_CAP_MIN = 5
SKELETON_CAP_FRACTION = 0.02
PROFILE_PERCENTILE = 99.0


def value_skeleton(value: str) -> str:
    """Shape of a string: digit runs collapse to 'd', letter runs to 'a',
    everything else stays literal.  '2026-01-31' -> 'd-d-d'."""
    out: list[str] = []
    last = ""
    for ch in value:
        if ch.isdigit():
            cls = "d"
        elif ch.isalpha():
            cls = "a"
        else:
            cls = ch
        if cls in ("d", "a") and cls == last:
            continue
        out.append(cls)
        last = cls
    return "".join(out)


class TrainingCollector:
    """Observation-mode hook: records per-scope samples, per-IP timing
    events, per-user action streams, per-role usage, candidate trusted
    hosts, and which parameters the application round-trips verbatim."""

    def __init__(self, config: Config) -> None:
        self.config = config
        self.label: str = "benign"
        self.samples: dict[tuple[str, str, str], list[str]] = {}
        self.bot_events: dict[str, list[float]] = {}
        self.user_stream: list[tuple[str, str, str, float]] = []
        self.role_counts: list[tuple[str, str, str]] = []
        self.url_values: list[str] = []
        self._url_names = {n.lower() for n in config.url_param_names}
        self._enum_headers = {h.lower() for h in config.enumerated_headers}
        # session_id -> param name -> exact byte values the app served
        self._served: dict[str, dict[str, set[bytes]]] = {}
        self.submit_counts: Counter = Counter()
        self.echo_ok: Counter = Counter()
        self.echo_fail: Counter = Counter()

    # -- pipeline hooks ------------------------------------------------------

    def on_request(self, req: CanonicalRequest,
                   session: SessionRecord | None) -> None:
        if self.label == LABEL_ASSET:
            return
        ts = req.received_at
        self.bot_events.setdefault(req.identity.ip, []).append(ts)
        role = session.role if session else "visitor"
        self.role_counts.append((role, req.method, req.path_template))
        if session is not None and session.username:
            self.user_stream.append((session.username, session.session_id,
                                     UserProfile.action_key(
                                         req.method, req.path_template), ts))
        tpl = req.path_template
        for location, params in ((QUERY, req.query_params),
                                 (BODY, req.body_params),
                                 (COOKIE, req.cookies)):
            for name, pv in params.items():
                if name in EXCLUDED_PARAMS:
                    continue
                if location == COOKIE and \
                        name == self.config.session_cookie_name:
                    continue
                self._sample(tpl, location, name, pv.canonical)
                if location != COOKIE and name.lower() in self._url_names:
                    self.url_values.append(pv.canonical)
                if location != COOKIE and session is not None:
                    self._track_echo(session.session_id, name, pv.original)
        for hname in self._enum_headers:
            for value in req.headers.get(hname, []):
                self._sample(tpl, HEADER, hname, value)

    def on_response(self, req: CanonicalRequest, response,
                    session: SessionRecord | None) -> None:
        if self.label == LABEL_ASSET or session is None:
            return
        served = self._served.setdefault(session.session_id, {})
        for name, value in extract_set_values(response):
            if name not in EXCLUDED_PARAMS:
                served.setdefault(name, set()).add(value)

    # -- internals -----------------------------------------------------------

    def _sample(self, tpl: str, location: str, name: str, value: str) -> None:
        bucket = self.samples.setdefault((tpl, location, name), [])
        if len(bucket) < SAMPLE_CAP:
            bucket.append(value)

    def _track_echo(self, sid: str, name: str, original: bytes) -> None:
        self.submit_counts[name] += 1
        served = self._served.get(sid, {}).get(name)
        if served is not None and original in served:
            self.echo_ok[name] += 1
        else:
            self.echo_fail[name] += 1

    def watched_params(self) -> set[str]:
        """Parameters the app always hands out first and the client always
        echoes back unchanged.  Those are validated by keyed digest."""
        return {name for name in self.submit_counts
                if self.echo_ok[name] > 0 and self.echo_fail[name] == 0}


def assign_category(name: str, location: str, values: list[str], *,
                    watched: set[str], url_names: set[str],
                    n_min: int = N_MIN) -> str:
    """Pick exactly one validation scheme for a sampled parameter scope.

    Configured knowledge outranks inference: a parameter on the admin's
    address list is destination-checked even when the app happens to
    round-trip it, and round-tripped parameters are checked by digest.
    After that, typing requires real support (n_min samples) before
    anything stronger than the signature scan is claimed.
    """
    if location in (QUERY, BODY) and name.lower() in url_names:
        return WEB_ADDRESS
    if location in (QUERY, BODY) and name in watched:
        return APPLICATION
    if len(values) >= n_min:
        if all(_NUMERIC_RE.match(v) for v in values):
            return NUMERIC
        if train_enumerated(values) is not None:
            return ENUMERATED
        skeletons = {value_skeleton(v) for v in values if v}
        cap = max(SKELETON_CAP_MIN,
                  int(SKELETON_CAP_FRACTION * len(values)))
        if skeletons and len(skeletons) <= cap:
            return FORMAT_SPECIFIC
    return TEXT


def train_user_profiles(stream: list[tuple[str, str, str, float]],
                        warnings: list[str]) -> dict[str, UserProfile]:
    """Fit one bigram profile per user, then set each alert threshold by a
    calibration pass that replays the user's own stream with the same
    score-then-learn dynamics the live proxy uses.  The shipped counts are
    the batch counts; replaying the training traffic therefore reproduces
    the calibration scores exactly and stays below the threshold."""
    per_user: dict[str, list[tuple[str, str, float]]] = {}
    for username, sid, action, ts in stream:
        per_user.setdefault(username, []).append((sid, action, ts))

    profiles: dict[str, UserProfile] = {}
    for username, events in sorted(per_user.items()):
        profile = UserProfile()
        prev = None
        prev_sid = None
        for sid, action, ts in events:
            if sid != prev_sid:
                prev = None
            profile.observe(prev, action, _hour(ts))
            prev, prev_sid = action, sid

        cal = UserProfile.from_dict(profile.to_dict())
        scores: list[float] = []
        prev = None
        prev_sid = None
        for sid, action, ts in events:
            if sid != prev_sid:
                prev = None
            scores.append(cal.score(prev, action))
            cal.observe(prev, action, _hour(ts))
            prev, prev_sid = action, sid
        if scores:
            profile.anomaly_threshold = float(
                np.percentile(scores, PROFILE_PERCENTILE, method="higher"))
        else:
            profile.anomaly_threshold = math.inf
        if len(events) < MIN_USER_ACTIONS:
            warnings.append(f"user {username}: only {len(events)} actions, "
                            "profile is weakly supported")
        profiles[username] = profile
    return profiles


def _hour(ts: float) -> int:
    return time.gmtime(ts).tm_hour


def train_all(config: Config, upstream, records: list[TraceRecord], *,
              token_source: TokenSource | None = None) -> ModelBundle:
    """The whole offline fit.  Returns a bundle ready to save."""
    warnings: list[str] = []
    request_filter = train_request_filter(
        records, defaults=config.static_extensions)

    collector = TrainingCollector(config)
    pipeline = Pipeline(config, upstream,
                        token_source=token_source or TokenSource(config.replay_seed),
                        models=ModelBundle.empty(), observer=collector,
                        timer=lambda: 0.0)
    client = ReplayClient(pipeline.secret,
                          cookie_name=config.session_cookie_name)
    try:
        for rec in records:
            collector.label = rec.label
            raw = client.build(rec)
            response, _ = pipeline.handle_bytes(raw, ip=rec.ip, now=rec.ts)
            client.observe_response(rec, response)
    finally:
        pipeline.close()

    watched = collector.watched_params()
    url_names = {n.lower() for n in config.url_param_names}
    n_min = config.limits.min_training_samples

    specs: dict[str, ParamSpec] = {}
    enums = {}
    formats = {}
    for (tpl, location, name), values in sorted(collector.samples.items()):
        category = assign_category(name, location, values, watched=watched,
                                   url_names=url_names, n_min=n_min)
        spec = ParamSpec(tpl, location, name, category)
        specs[spec.scope_key] = spec
        if category == ENUMERATED:
            enums[spec.scope_key] = train_enumerated(values)
        elif category == FORMAT_SPECIFIC:
            model = train_format(values)
            if model is None:
                specs[spec.scope_key] = ParamSpec(tpl, location, name, TEXT)
                warnings.append(f"{spec.scope_key}: format fit failed, "
                                "falling back to text")
            else:
                formats[spec.scope_key] = model
        elif category == TEXT and len(values) < n_min:
            warnings.append(f"{spec.scope_key}: {len(values)} samples below "
                            f"{n_min}, signature scan only")

    whitelist = UrlWhitelist()
    for value in collector.url_values:
        scheme, host, _path = split_web_address(value)
        if host:
            whitelist.add(scheme, host, "/")

    profiles = train_user_profiles(collector.user_stream, warnings)

    role_profile = RoleProfile(min_support=config.limits.unlisted_min_support)
    for role, method, tpl in collector.role_counts:
        role_profile.observe(role, method, tpl)

    if collector.bot_events:
        baseline = train_baseline(collector.bot_events,
                                  window_s=config.limits.bot_window_s)
    else:
        baseline = train_baseline({}, window_s=config.limits.bot_window_s)
        warnings.append("no timing events in trace, bot baseline is the "
                        "conservative default")

    for warning in warnings:
        log.warning("%s", warning)

    return ModelBundle(
        request_filter=request_filter,
        bot_baseline=baseline,
        specs=specs,
        enums=enums,
        formats=formats,
        url_whitelist=whitelist,
        watched_params=sorted(watched),
        user_profiles=profiles,
        role_profile=role_profile,
        warnings=warnings,
    )
