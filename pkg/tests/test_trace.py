import pytest

from sentrygate.httpmsg import Response, parse_request
from sentrygate.keys import otp_code
from sentrygate.trace import (
    ReplayClient, TraceRecord, load_trace, save_trace,
)
from util import T0, trec

SECRET = bytes(range(32))


# --- records and files ------------------------------------------------------

def test_record_label_validation():
    with pytest.raises(ValueError):
        TraceRecord(ts=T0, ip="1.1.1.1", ctx="a", method="GET", target="/",
                    label="weird")
    with pytest.raises(ValueError):
        TraceRecord(ts=T0, ip="1.1.1.1", ctx="a", method="GET", target="/",
                    label="attack")                 # class required


def test_trace_file_round_trip(tmp_path):
    records = [
        trec(T0, "1.1.1.1", "a", "GET", "/", headers=[("Host", "shop")],
             body=b"", label="benign", attack_class=None, scenario=None),
        trec(T0 + 1, "2.2.2.2", "b", "POST", "/search",
             headers=[("Host", "shop"), ("Content-Type",
                                         "application/x-www-form-urlencoded")],
             body=bytes(range(256)), label="attack", attack_class="sqli",
             scenario="sqli-probe"),
    ]
    path = tmp_path / "trace.jsonl"
    save_trace(str(path), records)
    loaded = load_trace(str(path))
    assert loaded == records
    assert loaded[1].body == bytes(range(256))      # binary-safe via base64


# --- the replay client ------------------------------------------------------

def client():
    return ReplayClient(SECRET, cookie_name="SESSIONID")


def parse(raw):
    return parse_request(raw, source_ip="9.9.9.9", received_at=T0)


def page(body=b"", cookies=(), ctype="text/html"):
    headers = [("Content-Type", ctype), ("Content-Length", str(len(body)))]
    headers.extend(("Set-Cookie", c) for c in cookies)
    return Response(status=200, headers=headers, body=body)


def benign(ctx, method="GET", target="/", headers=(), body=b""):
    return trec(T0, "9.9.9.9", ctx, method, target, headers=list(headers),
                body=body, label="benign", attack_class=None, scenario=None)


def test_cookies_learned_and_attached():
    c = client()
    first = benign("a")
    assert b"Cookie:" not in c.build(first)
    c.observe_response(first, page(cookies=["SESSIONID=abc123; Path=/; HttpOnly"]))
    raw = c.build(benign("a", target="/account"))
    req = parse(raw)
    assert req.first_header("cookie") == "SESSIONID=abc123"
    # Other contexts have their own jar.
    assert b"Cookie:" not in c.build(benign("b"))


def test_explicit_cookie_header_wins():
    c = client()
    c.observe_response(benign("victim"),
                       page(cookies=["SESSIONID=stolen1; Path=/"]))
    theft = benign("thief", target="/account",
                   headers=[("Cookie", "SESSIONID={{session:victim}}")])
    req = parse(c.build(theft))
    assert req.first_header("cookie") == "SESSIONID=stolen1"


def test_cookie_cleared_on_max_age_zero_or_empty():
    c = client()
    c.observe_response(benign("a"), page(cookies=["SESSIONID=abc; Path=/"]))
    c.observe_response(benign("a"),
                       page(cookies=["SESSIONID=; Path=/; Max-Age=0"]))
    assert c.jars["a"] == {}
    c.observe_response(benign("a"), page(cookies=["SESSIONID=neu"]))
    c.observe_response(benign("a"), page(cookies=["SESSIONID="]))
    assert "SESSIONID" not in c.jars["a"]


def test_csrf_token_scraped_from_form_then_links():
    c = client()
    c.observe_response(benign("a"), page(
        b'<form method="post"><input type="hidden" '
        b'name="__ips_token" value="feed01"></form>'))
    assert c.tokens["a"] == "feed01"
    # A later page with only an amended link updates the token.
    c.observe_response(benign("a"), page(
        b'<a href="/purchase?__ips_token=beef02">buy</a>'))
    assert c.tokens["a"] == "beef02"

    filled = c.build(benign("a", method="POST", target="/purchase",
                            body=b"ProductId=2&__ips_token={{csrf:a}}"))
    req = parse(filled)
    assert req.body == b"ProductId=2&__ips_token=beef02"


def test_content_length_recomputed_after_substitution():
    c = client()
    c.observe_response(benign("a"), page(
        b'<input type="hidden" name="__ips_token" value="0123456789abcdef">'))
    rec = benign("a", method="POST", target="/purchase",
                 headers=[("Content-Length", "5")],
                 body=b"t={{csrf:a}}")
    req = parse(c.build(rec))
    assert req.body == b"t=0123456789abcdef"
    assert req.first_header("content-length") == str(len(req.body))
    assert len(req.header_values("content-length")) == 1


def test_otp_placeholder_uses_record_minute():
    c = client()
    c.observe_response(benign("a"), page(cookies=["SESSIONID=abc; Path=/"]))
    rec = benign("a", method="POST", target="/purchase",
                 body=b"__ips_otp={{otp:a}}")
    req = parse(c.build(rec))
    want = otp_code(SECRET, "abc", int(T0 // 60))
    assert req.body == b"__ips_otp=" + want.encode()


def test_unresolved_placeholders_become_empty():
    c = client()
    raw = c.build(benign("ghost", target="/x?sid={{session:ghost}}"))
    assert b"sid=" in raw.split(b"\r\n", 1)[0]
    assert b"{{" not in raw
