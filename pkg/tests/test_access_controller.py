import json

import pytest

from sentrygate.access_controller import (
    ALLOWED, DENIED, UNLISTED, GapReport, RbacPolicy, RoleProfile,
    analyze_unlisted, gate_sensitive, rbac_check,
)
from sentrygate.alerts import HIGH, LOW, UNAUTHORIZED_ACCESS
from sentrygate.config import DEFAULT_SEVERITY, TokenSource
from sentrygate.keys import otp_code
from sentrygate.user_verifier import SessionStore
from util import T0, canon

SEV = dict(DEFAULT_SEVERITY)
SECRET = bytes(range(32))


def make_policy():
    return RbacPolicy(
        roles={"visitor", "member", "admin"},
        grants={
            "visitor": {("GET", "/"), ("GET", "/product/{id}")},
            "member": {("GET", "/"), ("GET", "/product/{id}"),
                       ("GET", "/account"), ("POST", "/purchase")},
            "admin": {("GET", "/admin"), ("POST", "/purchase")},
        },
        sensitive_ops={("POST", "/purchase")},
    )


def member_session(username="alice", role="member"):
    store = SessionStore(TokenSource(9))
    rec = store.issue("10.9.9.9", "UnitTest/1.0", T0)
    rec.username, rec.role = username, role
    return rec


# --- policy decisions -------------------------------------------------------

def test_decide_trichotomy():
    policy = make_policy()
    assert policy.decide("member", "GET", "/account") == ALLOWED
    assert policy.decide("visitor", "GET", "/account") == DENIED
    assert policy.decide("visitor", "GET", "/admin") == DENIED
    # Listed nowhere at all: unlisted even for admin.
    assert policy.decide("admin", "GET", "/internal/backup") == UNLISTED
    assert policy.decide("admin", "DELETE", "/product/{id}") == UNLISTED


def test_grant_for_unknown_role_rejected():
    with pytest.raises(ValueError):
        RbacPolicy(roles={"member"}, grants={"ghost": {("GET", "/")}},
                   sensitive_ops=set())


def test_sensitive_lookup():
    policy = make_policy()
    assert policy.is_sensitive("POST", "/purchase")
    assert not policy.is_sensitive("GET", "/purchase")
    assert policy.sensitive_templates() == {"/purchase"}


def test_policy_from_file(tmp_path):
    path = tmp_path / "rbac.json"
    path.write_text(json.dumps({
        "roles": ["member"],
        "grants": {"member": [["GET", "/"]]},
        "sensitive": [["POST", "/x"]],
    }))
    policy = RbacPolicy.from_file(str(path))
    assert policy.decide("member", "GET", "/") == ALLOWED
    assert policy.is_sensitive("POST", "/x")


# --- second factor gate -----------------------------------------------------

def purchase_req(otp=None):
    body = b"ProductId=2"
    if otp is not None:
        body += b"&__ips_otp=" + otp.encode()
    return canon("POST", "/purchase", body=body)


def test_gate_skips_anonymous_and_non_sensitive():
    policy = make_policy()
    assert gate_sensitive(purchase_req(), None, policy, SECRET, T0).outcome == "proceed"
    rec = member_session()
    ok = gate_sensitive(canon("GET", "/account"), rec, policy, SECRET, T0)
    assert ok.outcome == "proceed" and not ok.granted_now


def test_gate_challenges_without_code():
    rec = member_session()
    res = gate_sensitive(purchase_req(), rec, make_policy(), SECRET, T0)
    assert res.outcome == "challenge"
    assert rec.second_factor_at is None


def test_gate_accepts_current_and_previous_minute():
    policy = make_policy()
    minute = int(T0 // 60)

    rec = member_session()
    now_code = otp_code(SECRET, rec.session_id, minute)
    res = gate_sensitive(purchase_req(now_code), rec, policy, SECRET, T0)
    assert res.outcome == "proceed" and res.granted_now
    assert rec.second_factor_at == T0

    rec = member_session()
    old_code = otp_code(SECRET, rec.session_id, minute - 1)
    res = gate_sensitive(purchase_req(old_code), rec, policy, SECRET, T0)
    assert res.outcome == "proceed" and res.granted_now

    rec = member_session()
    stale = otp_code(SECRET, rec.session_id, minute - 2)
    assert gate_sensitive(purchase_req(stale), rec, policy, SECRET, T0).outcome \
        == "challenge"


def test_gate_rejects_wrong_code():
    rec = member_session()
    minute = int(T0 // 60)
    code = otp_code(SECRET, rec.session_id, minute)
    wrong = f"{(int(code) + 1) % 1_000_000:06d}"
    res = gate_sensitive(purchase_req(wrong), rec, make_policy(), SECRET, T0)
    assert res.outcome == "challenge"
    assert rec.second_factor_at is None


def test_grant_outlives_one_request_then_expires():
    policy = make_policy()
    rec = member_session()
    rec.second_factor_at = T0
    within = gate_sensitive(purchase_req(), rec, policy, SECRET, T0 + 300.0)
    assert within.outcome == "proceed" and not within.granted_now
    beyond = gate_sensitive(purchase_req(), rec, policy, SECRET, T0 + 300.1)
    assert beyond.outcome == "challenge"


# --- rbac alerts ------------------------------------------------------------

def test_rbac_check_decisions():
    policy = make_policy()
    req = canon("GET", "/account")

    decision, alert = rbac_check(req, member_session(), policy, SEV)
    assert decision == ALLOWED and alert is None

    decision, alert = rbac_check(req, None, policy, SEV)   # anonymous visitor
    assert decision == DENIED
    assert alert.attack_class == UNAUTHORIZED_ACCESS
    assert alert.confidence == HIGH
    assert "visitor" in alert.evidence

    decision, alert = rbac_check(canon("GET", "/internal/backup"),
                                 member_session(), policy, SEV)
    assert decision == UNLISTED and alert is None


# --- unlisted-route analyzer ------------------------------------------------

def test_unlisted_untrained_role(tmp_path):
    report = GapReport(str(tmp_path / "gaps.jsonl"))
    profile = RoleProfile()
    req = canon("GET", "/internal/backup")
    alert = analyze_unlisted(req, member_session(), profile, report, T0, SEV)
    assert alert.attack_class == UNAUTHORIZED_ACCESS
    assert alert.confidence == LOW and alert.score == 0.0
    lines = [json.loads(l) for l in
             (tmp_path / "gaps.jsonl").read_text().splitlines()]
    assert lines == [{"ts": T0, "role": "member", "method": "GET",
                      "template": "/internal/backup",
                      "decision": "untrained-role"}]


def test_unlisted_pass_and_alert_by_support(tmp_path):
    report = GapReport(str(tmp_path / "gaps.jsonl"))
    profile = RoleProfile()
    for _ in range(5):
        profile.observe("member", "GET", "/help")
    profile.observe("member", "GET", "/promo")
    profile.observe("member", "GET", "/promo")

    ok = analyze_unlisted(canon("GET", "/help"), member_session(),
                          profile, report, T0, SEV)
    assert ok is None

    thin = analyze_unlisted(canon("GET", "/promo"), member_session(),
                            profile, report, T0 + 1, SEV)
    assert thin.confidence == LOW and thin.score == 2.0

    decisions = [json.loads(l)["decision"] for l in
                 (tmp_path / "gaps.jsonl").read_text().splitlines()]
    assert decisions == ["pass", "alert"]
    assert report.templates == {"/help", "/promo"}


def test_gap_report_without_file_still_tracks_templates():
    report = GapReport(None)
    profile = RoleProfile()
    profile.observe("member", "GET", "/help")
    analyze_unlisted(canon("GET", "/other"), member_session(),
                     profile, report, T0, SEV)
    assert report.templates == {"/other"}


def test_role_profile_round_trip():
    profile = RoleProfile(min_support=3)
    profile.observe("member", "GET", "/help")
    profile.observe("member", "GET", "/help")
    profile.observe("admin", "POST", "/restock")
    clone = RoleProfile.from_dict(profile.to_dict(), min_support=3)
    assert clone.support("member", "GET", "/help") == 2
    assert clone.support("member", "GET", "/missing") == 0
    assert clone.knows_role("admin") and not clone.knows_role("ghost")
    assert clone.to_dict() == profile.to_dict()
