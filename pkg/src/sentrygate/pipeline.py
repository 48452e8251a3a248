"""The request path: preprocess, screen, validate, verify, authorize,
forward, rewrite, log.  The first alert short-circuits to the defender;
at most one alert is ever raised per request.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import bot_detector, connection_verifier, response_controller, user_verifier
from .access_controller import (
    ALLOWED, DENIED, UNLISTED, GapReport, RbacPolicy, RoleProfile,
    analyze_unlisted, gate_sensitive, rbac_check,
)
from .alerts import Alert, ClientIdentity, clip_evidence, BOT, PROTOCOL, HIGH, LOW
from .bot_detector import BotBaseline, BotLists, HistoryStore
from .config import Config, TokenSource
from .connection_verifier import BlockList
from .data_validator import DataValidator, SignatureSet, STARTER_RULES, ValidationModels
from .defender import (
    CHALLENGE_2F, Defender, ResponseAction, LOG_ONLY, MONITOR,
)
from .event_log import EventLogger
from .httpmsg import MalformedRequest, RawRequest, Response, parse_request
from .keys import SECRET_LEN, load_secret
from .models import ModelBundle
from .preprocessor import (
    CanonicalRequest, StaticAssetModel, canonicalize, canonicalize_request,
    should_monitor,
)
from .response_controller import (
    CookieSealer, LeakRuleSet, DEFAULT_LEAK_RULES, MarkLedger,
    inject_csrf, mark, scrub, seal_cookies, unseal_request_cookies,
)
from .user_verifier import SessionStore, UserProfile, verify_stage1, verify_stage2

STAGE_PRE = "preprocessor"
STAGE_CONN = "connection_verifier"
STAGE_BOT = "bot_detector"
STAGE_DV = "data_validator"
STAGE_UV = "user_verifier"
STAGE_AC = "access_controller"
STAGE_UP = "upstream"
STAGE_RC = "response_controller"

FORWARDED = "forwarded"
REJECTED = "rejected"
CHALLENGED = "challenged"

_REJECT_BODY = b"<html><body>Request blocked.</body></html>"
_CHALLENGE_BODY = (b"<html><body>Additional verification required: resubmit "
                   b"with your __ips_otp code.</body></html>")
_UPSTREAM_DOWN_BODY = b"<html><body>Upstream unavailable.</body></html>"
_MALFORMED_BODY = b"<html><body>Bad request.</body></html>"


class UpstreamUnreachable(Exception):
    pass


@dataclass
class Verdict:
    ts: float
    ip: str
    method: str
    target: str
    outcome: str
    status: int
    filtered: bool = False
    alert: Alert | None = None
    action: ResponseAction | None = None
    timings: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.outcome in (REJECTED, CHALLENGED) and self.action is None:
            raise ValueError(f"{self.outcome} verdict requires an action")
        if self.outcome == FORWARDED and self.alert is not None:
            if self.action is None or self.action.kind not in (LOG_ONLY, MONITOR):
                raise ValueError("forwarded despite an alert needs log/monitor")

    def to_dict(self) -> dict:
        alert = None
        if self.alert is not None:
            alert = {
                "attack_class": self.alert.attack_class,
                "severity": self.alert.severity,
                "confidence": self.alert.confidence,
                "score": round(self.alert.score, 9),
                "module": self.alert.module,
                "evidence": self.alert.evidence,
            }
        action = None
        if self.action is not None:
            action = {"kind": self.action.kind, "status": self.action.http_status,
                      "monitor": self.action.monitor}
        return {
            "ts": self.ts, "ip": self.ip, "method": self.method,
            "target": self.target, "outcome": self.outcome,
            "status": self.status, "filtered": self.filtered,
            "alert": alert, "action": action,
            "stages": [name for name, _ in self.timings],
        }


def _local_response(status: int, body: bytes,
                    extra_headers: list[tuple[str, str]] | None = None) -> Response:
    headers = [("Content-Type", "text/html; charset=utf-8"),
               ("Content-Length", str(len(body)))]
    if extra_headers:
        headers.extend(extra_headers)
    return Response(status=status, headers=headers, body=body)


class Pipeline:
    """One proxy instance: stateful stores plus loaded models and policy."""

    def __init__(self, config: Config, upstream, *,
                 token_source: TokenSource | None = None,
                 models: ModelBundle | None = None,
                 policy: RbacPolicy | None = None,
                 timer=None, observer=None) -> None:
        self.config = config
        self.upstream = upstream
        self.tokens = token_source or TokenSource(None)
        self.timer = timer or time.perf_counter
        self.observer = observer

        secret_path = config.resolve(config.secret_file)
        self.secret = (load_secret(secret_path) if secret_path
                       else self.tokens.randbytes(SECRET_LEN))

        sig_path = config.resolve(config.signature_file)
        self.signatures = (SignatureSet.from_file(sig_path) if sig_path
                           else SignatureSet(STARTER_RULES))

        leak_path = config.resolve(config.leak_rules_file)
        self.leak_rules = (LeakRuleSet.from_file(leak_path) if leak_path
                           else LeakRuleSet(DEFAULT_LEAK_RULES))

        good = (bot_detector.load_list_file(config.resolve(config.good_bots_file))
                if config.good_bots_file else [])
        bad = (bot_detector.load_list_file(config.resolve(config.bad_bots_file))
               if config.bad_bots_file else [])
        agents = [b for b in bad if not _looks_like_ip(b)]
        bad_ips = [b for b in bad if _looks_like_ip(b)]
        self.bot_lists = BotLists(good_bot_ips=set(good),
                                  bad_bot_ips=set(bad_ips),
                                  bad_bot_agents=set(agents))

        if policy is not None:
            self.policy = policy
        elif config.policy_file:
            self.policy = RbacPolicy.from_file(config.resolve(config.policy_file))
        else:
            self.policy = RbacPolicy(roles={"visitor"}, grants={},
                                     sensitive_ops=set())

        bundle = models
        if bundle is None and config.model_bundle:
            bundle = ModelBundle.from_file(config.resolve(config.model_bundle))
        if bundle is None:
            bundle = ModelBundle.empty()
        self.models = bundle

        self.asset_model: StaticAssetModel = bundle.request_filter or \
            StaticAssetModel(extension_set=set(config.static_extensions))
        self.bot_baseline: BotBaseline | None = bundle.bot_baseline
        self.validator = DataValidator(
            self.signatures,
            ValidationModels(specs=bundle.specs, enums=bundle.enums,
                             formats=bundle.formats,
                             url_whitelist=bundle.url_whitelist,
                             watched_params=set(bundle.watched_params),
                             url_param_names={n.lower()
                                              for n in config.url_param_names}),
            config.severity,
            enumerated_headers=set(config.enumerated_headers))
        # Private copies: runtime keeps learning online, and that drift must
        # never leak back into the caller's bundle (replays stay repeatable).
        self.user_profiles = {name: UserProfile.from_dict(profile.to_dict())
                              for name, profile in bundle.user_profiles.items()}
        source_rp = bundle.role_profile
        if source_rp is None:
            self.role_profile = RoleProfile(
                min_support=config.limits.unlisted_min_support)
        else:
            self.role_profile = RoleProfile.from_dict(
                source_rp.to_dict(),
                min_support=config.limits.unlisted_min_support)

        self.block_lists = BlockList()
        if config.blocklist_seed_file:
            connection_verifier.load_seed(
                config.resolve(config.blocklist_seed_file), self.block_lists,
                now=0.0)
        self.histories = HistoryStore(config.limits.bot_window_s)
        self.sessions = SessionStore(self.tokens)
        self.mark_ledger = MarkLedger(self.secret)
        self.sealer = CookieSealer(self.secret, self.tokens)
        self.event_log = EventLogger(config.resolve(config.log_dir))
        self.gap_report = GapReport(config.resolve(config.gap_report_file))
        self.defender = Defender(config.response_policy, self.block_lists,
                                 self.sessions, self.event_log,
                                 mark_ledger=self.mark_ledger)
        self.handled = 0
        self._watch_armed = False

    # -- public entry points -------------------------------------------------

    def handle_bytes(self, raw: bytes, *, ip: str, now: float
                     ) -> tuple[Response, Verdict]:
        timings: list[tuple[str, float]] = []
        t0 = self.timer()
        try:
            raw_req = parse_request(raw, source_ip=ip, received_at=now)
        except MalformedRequest as exc:
            timings.append((STAGE_PRE, (self.timer() - t0) * 1000))
            return self._reject_malformed(exc, ip, now, timings)
        return self.handle(raw_req, now=now, _timings=timings, _t0=t0)

    def handle(self, raw_req: RawRequest, *, now: float,
               _timings: list | None = None, _t0: float | None = None
               ) -> tuple[Response, Verdict]:
        timings = _timings if _timings is not None else []
        t0 = _t0 if _t0 is not None else self.timer()
        self.handled += 1
        if self.handled % self.config.limits.purge_every == 0:
            self.block_lists.purge_expired(now)

        req = canonicalize_request(raw_req,
                                   session_cookie_name=self.config.session_cookie_name,
                                   decode_cap=self.config.limits.decode_cap)
        session = self.sessions.get(req.session_id)
        if session is not None:
            req.identity.username = session.username
        # Escalation only applies to alerts on requests after the one that
        # armed the watch, so snapshot the flag before any stage runs.
        self._watch_armed = session is not None and session.watch_flag

        unseal_alert = None
        if self.config.sealed_cookies:
            unseal_alert = self._unseal(req)
        timings.append((STAGE_PRE, (self.timer() - t0) * 1000))

        if unseal_alert is not None:
            return self._handle_alert(req, unseal_alert, now, timings)

        if not should_monitor(req, self.asset_model):
            return self._forward(req, now, timings, filtered=True)

        if self.observer is not None:
            # Training observation: detectors stay dark, traffic flows.
            self.observer.on_request(req, self.sessions.get(req.session_id))
            return self._forward(req, now, timings, filtered=False)

        ts = self.timer()
        blocked = connection_verifier.check(req, self.block_lists, now)
        timings.append((STAGE_CONN, (self.timer() - ts) * 1000))
        if blocked is not None:
            return self._reject_blocked(req, blocked, now, timings)

        ts = self.timer()
        alert = self._bot_stages(req, now)
        timings.append((STAGE_BOT, (self.timer() - ts) * 1000))
        if alert is not None:
            return self._handle_alert(req, alert, now, timings)

        ts = self.timer()
        alert = self.validator.validate(req, ledger=self.mark_ledger,
                                        secret=self.secret)
        timings.append((STAGE_DV, (self.timer() - ts) * 1000))
        if alert is not None:
            return self._handle_alert(req, alert, now, timings)

        ts = self.timer()
        stage1 = verify_stage1(
            req, self.sessions, now, self.config.severity,
            idle_timeout_s=self.config.limits.idle_timeout_s,
            login_fail_limit=self.config.limits.login_fail_limit,
            login_fail_window_s=self.config.limits.login_fail_window_s)
        session = stage1.session
        if stage1.alert is None:
            stage2 = verify_stage2(req, session, self.user_profiles, now,
                                   self.config.severity)
            alert = stage2.alert
        else:
            alert = stage1.alert
        timings.append((STAGE_UV, (self.timer() - ts) * 1000))
        if alert is not None:
            return self._handle_alert(req, alert, now, timings)

        ts = self.timer()
        gate = gate_sensitive(req, session, self.policy, self.secret, now,
                              ttl_s=self.config.limits.second_factor_ttl_s)
        if gate.outcome == "challenge":
            timings.append((STAGE_AC, (self.timer() - ts) * 1000))
            return self._challenge(req, now, timings)
        decision, alert = rbac_check(req, session, self.policy,
                                     self.config.severity)
        if decision == UNLISTED and alert is None:
            alert = analyze_unlisted(req, session, self.role_profile,
                                     self.gap_report, now, self.config.severity)
        timings.append((STAGE_AC, (self.timer() - ts) * 1000))
        if alert is not None:
            return self._handle_alert(req, alert, now, timings)

        return self._forward(req, now, timings, filtered=False)

    def close(self) -> None:
        self.event_log.close()

    # -- alert path ----------------------------------------------------------

    def _escalate_from_watch(self, req: CanonicalRequest, alert: Alert) -> Alert:
        if not getattr(self, "_watch_armed", False):
            return alert
        session = self.sessions.get(req.session_id)
        if session is not None and session.watch_flag:
            if session.watch_class is None or \
                    session.watch_class == alert.attack_class:
                alert.confidence = HIGH
                session.watch_flag = False
                session.watch_class = None
        return alert

    def _handle_alert(self, req: CanonicalRequest, alert: Alert, now: float,
                      timings: list) -> tuple[Response, Verdict]:
        alert = self._escalate_from_watch(req, alert)
        execution = self.defender.respond(alert, now)
        action = execution.action
        if not action.stops_request:
            # log_only / monitor: the request still goes through, but no
            # further detector gets a say (one alert per request).
            return self._forward(req, now, timings, filtered=False,
                                 alert=alert, action=action)
        extra = []
        if action.kind == "force_logout":
            extra.append(_clear_cookie(self.config.session_cookie_name))
        body = _CHALLENGE_BODY if action.kind == CHALLENGE_2F else _REJECT_BODY
        response = _local_response(action.http_status, body, extra)
        self._record_bot_event(req, response.status, now)
        verdict = Verdict(ts=now, ip=req.identity.ip, method=req.method,
                          target=req.requested_url, outcome=REJECTED,
                          status=response.status, alert=alert, action=action,
                          timings=timings)
        return response, verdict

    def _reject_malformed(self, exc, ip, now, timings):
        identity = ClientIdentity(ip=ip)
        alert = Alert(attack_class=PROTOCOL,
                      severity=self.config.severity.get(PROTOCOL, LOW),
                      confidence=HIGH, score=1.0, module=STAGE_PRE,
                      evidence=clip_evidence(str(exc)), identity=identity)
        execution = self.defender.respond(alert, now)
        response = _local_response(execution.action.http_status, _MALFORMED_BODY)
        verdict = Verdict(ts=now, ip=ip, method="-", target="-",
                          outcome=REJECTED, status=response.status,
                          alert=alert, action=execution.action, timings=timings)
        return response, verdict

    def _reject_blocked(self, req, blocked, now, timings):
        # Enforcement of an already-logged decision, not a new alert.
        action = ResponseAction(kind="reject_request", http_status=403)
        response = _local_response(403, _REJECT_BODY)
        self._record_bot_event(req, 403, now)
        verdict = Verdict(ts=now, ip=req.identity.ip, method=req.method,
                          target=req.requested_url, outcome=REJECTED,
                          status=403, action=action, timings=timings)
        return response, verdict

    def _challenge(self, req, now, timings):
        action = ResponseAction(kind=CHALLENGE_2F, http_status=401)
        response = _local_response(401, _CHALLENGE_BODY)
        self._record_bot_event(req, 401, now)
        verdict = Verdict(ts=now, ip=req.identity.ip, method=req.method,
                          target=req.requested_url, outcome=CHALLENGED,
                          status=401, action=action, timings=timings)
        return response, verdict

    # -- detector helpers ----------------------------------------------------

    def _unseal(self, req: CanonicalRequest) -> Alert | None:
        names = set(self.config.sealed_cookies)
        present = {n: pv.original.decode("iso-8859-1")
                   for n, pv in req.cookies.items()}
        plain, alert = unseal_request_cookies(
            present, names, self.sealer, req.identity, req.requested_url,
            self.config.severity)
        if alert is not None:
            return alert
        for name in names & req.cookies.keys():
            req.cookies[name] = canonicalize(
                plain[name].encode("utf-8"),
                decode_cap=self.config.limits.decode_cap)
        return None

    def _bot_stages(self, req: CanonicalRequest, now: float) -> Alert | None:
        ip = req.identity.ip
        if bot_detector.stage1_good_bot(ip, self.bot_lists):
            return None
        evidence = bot_detector.stage2_bad_bot(ip, req.identity.user_agent,
                                               self.bot_lists)
        if evidence is not None:
            return Alert(attack_class=BOT,
                         severity=self.config.severity.get(BOT, LOW),
                         confidence=HIGH, score=1.0, module=STAGE_BOT,
                         evidence=clip_evidence(f"bad-bot list {evidence}"),
                         identity=req.identity,
                         requested_url=req.requested_url)
        if self.bot_baseline is None:
            return None
        history = self.histories.for_ip(ip)
        score = bot_detector.stage3_behavior(history, self.bot_baseline, now)
        if score.verdict != "bot":
            return None
        return Alert(attack_class=BOT,
                     severity=self.config.severity.get(BOT, LOW),
                     confidence=score.confidence,
                     score=score.rate_z, module=STAGE_BOT,
                     evidence=clip_evidence(
                         f"window={score.window_count} "
                         f"errors={score.error_ratio:.2f} "
                         f"conditions={','.join(score.conditions)}"),
                     identity=req.identity, requested_url=req.requested_url)

    def _record_bot_event(self, req: CanonicalRequest, status: int,
                          now: float) -> None:
        self.histories.record(req.identity.ip, now, req.path_template, status)

    # -- forwarding and the response chain -----------------------------------

    def _forward(self, req: CanonicalRequest, now: float, timings: list, *,
                 filtered: bool, alert: Alert | None = None,
                 action: ResponseAction | None = None
                 ) -> tuple[Response, Verdict]:
        ts = self.timer()
        try:
            response = self.upstream(req.raw)
        except UpstreamUnreachable:
            timings.append((STAGE_UP, (self.timer() - ts) * 1000))
            fail = ResponseAction(kind="reject_request", http_status=502)
            response = _local_response(502, _UPSTREAM_DOWN_BODY)
            verdict = Verdict(ts=now, ip=req.identity.ip, method=req.method,
                              target=req.requested_url, outcome=REJECTED,
                              status=502, filtered=filtered, action=fail,
                              timings=timings)
            return response, verdict
        timings.append((STAGE_UP, (self.timer() - ts) * 1000))

        ts = self.timer()
        session = self.sessions.get(req.session_id)
        if not filtered:
            session, logged_out = self._consume_auth(req, response, session,
                                                     now)
            if session is None and not logged_out:
                session = self.sessions.issue(req.identity.ip,
                                              req.identity.user_agent, now)
                response.headers.append(_issue_cookie(
                    self.config.session_cookie_name, session.session_id))
        self._response_chain(req, response, session)
        timings.append((STAGE_RC, (self.timer() - ts) * 1000))

        if not filtered:
            self._record_bot_event(req, response.status, now)
            if self.observer is not None:
                self.observer.on_response(req, response, session)

        verdict = Verdict(ts=now, ip=req.identity.ip, method=req.method,
                          target=req.requested_url, outcome=FORWARDED,
                          status=response.status, filtered=filtered,
                          alert=alert, action=action, timings=timings)
        return response, verdict

    def _consume_auth(self, req, response, session, now):
        """Fold the upstream's auth headers into the session, stripping them
        from the client-bound response.  Returns (session, logged_out); a
        logout clears the cookie and must not trigger a fresh issue on the
        same response."""
        cfg = self.config
        user = response.first_header(cfg.auth_user_header)
        role = response.first_header(cfg.auth_role_header)
        logout = response.first_header(cfg.auth_logout_header)
        for h in (cfg.auth_user_header, cfg.auth_role_header,
                  cfg.auth_logout_header):
            response.drop_header(h)
        if session is not None:
            if user:
                session.username = user
                req.identity.username = user
            if role:
                session.role = role
            if req.method == "POST" and req.path == cfg.login_path \
                    and response.status == 401:
                session.record_failed_login(now, cfg.limits.login_fail_window_s)
            if logout:
                self.sessions.invalidate(session.session_id)
                self.mark_ledger.drop_session(session.session_id)
                response.headers.append(
                    _clear_cookie(cfg.session_cookie_name))
                return None, True
        return session, False

    def _response_chain(self, req, response, session) -> None:
        sid = session.session_id if session else None
        for label, count in scrub(response, self.leak_rules):
            self._controller_log(req.received_at, sid, "scrub",
                                 {"label": label, "count": count})
        if session is not None:
            forms = inject_csrf(response, session.csrf_token,
                                self.policy.sensitive_templates())
            if forms:
                self._controller_log(req.received_at, sid, "inject",
                                     {"forms": forms})
            watched = set(self.validator.models.watched_params)
            for name in mark(response, session.session_id, watched,
                             self.mark_ledger):
                self._controller_log(req.received_at, sid, "mark",
                                     {"param": name})
        if self.config.sealed_cookies:
            for name in seal_cookies(response, set(self.config.sealed_cookies),
                                     self.sealer):
                self._controller_log(req.received_at, sid, "seal",
                                     {"param": name})

    def _controller_log(self, now, sid, op, detail) -> None:
        try:
            self.event_log.controller_record(now=now, session_id=sid,
                                             op=op, detail=detail)
        except OSError:    # pragma: no cover - writer already swallows IO
            pass


def _issue_cookie(name: str, value: str) -> tuple[str, str]:
    return ("Set-Cookie", f"{name}={value}; Path=/; HttpOnly")


def _clear_cookie(name: str) -> tuple[str, str]:
    return ("Set-Cookie", f"{name}=; Path=/; Max-Age=0")


def _looks_like_ip(entry: str) -> bool:
    head = entry.split(".")[0]
    return head.isdigit()
