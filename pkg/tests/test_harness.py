from sentrygate.alerts import Alert, ClientIdentity, HIGH, SQLI, XSS
from sentrygate.defender import (
    CHALLENGE_2F, LOG_ONLY, REJECT_REQUEST, ResponseAction,
)
from sentrygate.harness import StubShop, evaluate, write_environment
from sentrygate.pipeline import CHALLENGED, FORWARDED, REJECTED, Verdict
from util import T0, raw_request, trec

EXPECTED_CLASSES = {
    "sqli", "xss", "type_violation", "enum_violation", "format_violation",
    "open_redirect", "tampering", "csrf", "session_hijack", "brute_force",
    "bot", "unauthorized_access",
}


def login(shop, user, password, sid):
    body = f"user={user}&pass={password}".encode()
    return shop(raw_request("POST", "/login", cookies={"SESSIONID": sid},
                            body=body))


# --- stub application -------------------------------------------------------

def test_login_gate_and_auth_announcement():
    shop = StubShop()
    resp = login(shop, "alice", "wrong", "s1")
    assert resp.status == 401 and shop.auth == {}

    resp = login(shop, "alice", "pw-alice-9", "s1")
    assert resp.status == 200
    assert resp.first_header("x-auth-user") == "alice"
    assert resp.first_header("x-auth-role") == "member"
    assert shop.auth == {"s1": "alice"}

    resp = shop(raw_request("GET", "/logout", cookies={"SESSIONID": "s1"}))
    assert resp.first_header("x-auth-logout") == "1"
    assert shop.auth == {}


def test_admin_console_checks_role():
    shop = StubShop()
    login(shop, "alice", "pw-alice-9", "s1")
    login(shop, "dave", "pw-dave-4", "s2")
    assert shop(raw_request("GET", "/admin")).status == 403
    assert shop(raw_request("GET", "/admin",
                            cookies={"SESSIONID": "s1"})).status == 403
    resp = shop(raw_request("GET", "/admin", cookies={"SESSIONID": "s2"}))
    assert resp.status == 200 and b"Admin console" in resp.body


def test_search_leaks_driver_diagnostics():
    shop = StubShop()
    resp = shop(raw_request("GET", "/search?q=error%20test"))
    assert resp.status == 200
    assert b"ODBC SQL Server Driver" in resp.body
    assert resp.first_header("server") == "Apache/2.4.41 (Ubuntu)"
    clean = shop(raw_request("GET", "/search?q=desk"))
    assert b"ODBC" not in clean.body


def test_product_page_and_unknown_id():
    shop = StubShop()
    resp = shop(raw_request("GET", "/product/2"))
    assert resp.status == 200
    assert b'name="ProductId" value="2"' in resp.body
    assert b'name="Price" value="79.00"' in resp.body
    assert shop(raw_request("GET", "/product/9001")).status == 404


def test_purchase_requires_a_signed_in_user():
    shop = StubShop()
    body = b"ProductId=2&Price=79.0&quantity=1"
    assert shop(raw_request("POST", "/purchase", body=body)).status == 403
    assert shop.orders == 0
    login(shop, "bob", "pw-bob-3", "s9")
    resp = shop(raw_request("POST", "/purchase", cookies={"SESSIONID": "s9"},
                            body=body))
    assert resp.status == 200 and shop.orders == 1


def test_redirect_reflects_target_param():
    shop = StubShop()
    resp = shop(raw_request("GET", "/redirect?target=https://evil.example/x"))
    assert resp.status == 302
    assert resp.first_header("location") == "https://evil.example/x"


def test_home_sets_prefs_cookie_once():
    shop = StubShop()
    first = shop(raw_request("GET", "/"))
    assert any(v.startswith("prefs=")
               for v in first.header_values("set-cookie"))
    again = shop(raw_request("GET", "/", cookies={"prefs": "dark"}))
    assert again.header_values("set-cookie") == []


# --- generated traces -------------------------------------------------------

def test_training_trace_is_clean(rig):
    labels = {rec.label for rec in rig.train_records}
    assert labels == {"benign", "asset"}
    assert all(rec.attack_class is None for rec in rig.train_records)
    ts = [rec.ts for rec in rig.train_records]
    assert ts == sorted(ts)


def test_eval_trace_covers_every_class(rig):
    benign = [r for r in rig.eval_records if r.label == "benign"]
    attacks = [r for r in rig.eval_records if r.label == "attack"]
    assert len(benign) >= 500
    scenarios = {r.scenario for r in attacks}
    assert len(scenarios) == 16
    assert {r.attack_class for r in attacks} == EXPECTED_CLASSES
    ts = [rec.ts for rec in rig.eval_records]
    assert ts == sorted(ts)


def test_write_environment_lays_down_the_rig(tmp_path):
    config = write_environment(str(tmp_path))
    for name in ("secret.key", "policy.json", "good_bots.txt",
                 "bad_bots.txt", "blocklist_seed.json"):
        assert (tmp_path / name).exists()
    assert (tmp_path / "secret.key").read_bytes() == bytes(range(32))
    assert config.replay_seed == 7
    assert config.session_cookie_name == "SESSIONID"


# --- scoring ----------------------------------------------------------------

def mk_verdict(rec, outcome, status, *, alert_class=None, action=None):
    alert = None
    if alert_class is not None:
        alert = Alert(attack_class=alert_class, severity=HIGH,
                      confidence=HIGH, score=3.0, module="data_validator",
                      evidence="x", identity=ClientIdentity(ip=rec.ip),
                      requested_url=rec.target)
    return Verdict(ts=rec.ts, ip=rec.ip, method=rec.method, target=rec.target,
                   outcome=outcome, status=status, alert=alert, action=action)


def test_evaluate_scores_scenarios_not_requests():
    reject = ResponseAction(REJECT_REQUEST)
    results = [
        (trec(1.0, "1.1.1.1", "a", "GET", "/"),
         mk_verdict(trec(1.0, "1.1.1.1", "a", "GET", "/"), FORWARDED, 200)),
        # Two requests in one sqli scenario; only the second is caught.
        (r1 := trec(2.0, "2.2.2.2", "b", "GET", "/search?q=x", label="attack",
                    attack_class=SQLI, scenario="sqli-probe"),
         mk_verdict(r1, REJECTED, 403, action=reject)),
        (r2 := trec(3.0, "2.2.2.2", "b", "GET", "/search?q=y", label="attack",
                    attack_class=SQLI, scenario="sqli-probe"),
         mk_verdict(r2, REJECTED, 403, alert_class=SQLI, action=reject)),
        # Wrong-class alert never credits the scenario.
        (r3 := trec(4.0, "3.3.3.3", "c", "GET", "/p", label="attack",
                    attack_class=XSS, scenario="xss-miss"),
         mk_verdict(r3, FORWARDED, 200, alert_class=SQLI,
                    action=ResponseAction(LOG_ONLY))),
    ]
    report = evaluate(results)
    assert report.total == 4 and report.benign == 1 and report.attack == 3
    assert report.per_scenario["sqli-probe"] == {"class": SQLI,
                                                 "detected": True}
    assert report.per_scenario["xss-miss"]["detected"] is False
    assert report.per_class[SQLI]["rate"] == 1.0
    assert report.per_class[XSS]["rate"] == 0.0
    assert report.detection_floor() == 0.0
    assert report.confusion[SQLI] == {"(blocked)": 1, SQLI: 1}
    assert report.confusion[XSS] == {SQLI: 1}
    assert report.false_positives == 0


def test_evaluate_counts_only_stopping_actions_as_fp():
    benign = trec(1.0, "1.1.1.1", "a", "GET", "/search?q=ok")
    challenged = trec(2.0, "1.1.1.1", "a", "POST", "/purchase")
    logged = trec(3.0, "1.1.1.1", "a", "GET", "/account")
    results = [
        (benign, mk_verdict(benign, REJECTED, 403, alert_class=SQLI,
                            action=ResponseAction(REJECT_REQUEST))),
        (challenged, mk_verdict(challenged, CHALLENGED, 401,
                                action=ResponseAction(CHALLENGE_2F,
                                                      http_status=401))),
        (logged, mk_verdict(logged, FORWARDED, 200, alert_class=XSS,
                            action=ResponseAction(LOG_ONLY))),
    ]
    report = evaluate(results)
    assert report.false_positives == 1
    assert report.fp_details[0]["target"] == "/search?q=ok"
    assert report.fp_details[0]["alert"] == SQLI
    assert report.benign_alerts == 2             # logged one still counted
    assert report.actions_by_class == {
        SQLI: {"reject_request": 1}, XSS: {"log_only": 1}}
