"""Request builders shared across the test modules."""

from __future__ import annotations

from sentrygate.httpmsg import RawRequest
from sentrygate.preprocessor import canonicalize_request
from sentrygate.trace import TraceRecord

T0 = 1_600_000_000.0


def raw_request(method="GET", target="/", *, ip="10.9.9.9", ua="UnitTest/1.0",
                cookies=None, headers=None, body=b"", ts=T0) -> RawRequest:
    hdrs = [("Host", "shop.local")]
    if ua is not None:
        hdrs.append(("User-Agent", ua))
    if cookies:
        pairs = "; ".join(f"{k}={v}" for k, v in cookies.items())
        hdrs.append(("Cookie", pairs))
    if body:
        hdrs.append(("Content-Type", "application/x-www-form-urlencoded"))
        hdrs.append(("Content-Length", str(len(body))))
    if headers:
        hdrs.extend(headers)
    return RawRequest(source_ip=ip, received_at=ts, method=method,
                      target=target, version="HTTP/1.1", headers=hdrs,
                      body=body)


def canon(method="GET", target="/", *, decode_cap=3, session_cookie="SESSIONID",
          **kw):
    return canonicalize_request(
        raw_request(method, target, **kw),
        session_cookie_name=session_cookie, decode_cap=decode_cap)


def trec(ts, ip, ctx, method, target, *, headers=None, body=b"",
         label="benign", attack_class=None, scenario=None) -> TraceRecord:
    hdrs = [("Host", "shop.local"), ("User-Agent", "TraceTest/1.0")]
    if body:
        hdrs.append(("Content-Type", "application/x-www-form-urlencoded"))
        hdrs.append(("Content-Length", str(len(body))))
    if headers:
        hdrs.extend(headers)
    return TraceRecord(ts=ts, ip=ip, ctx=ctx, method=method, target=target,
                       headers=hdrs, body=body, label=label,
                       attack_class=attack_class, scenario=scenario)
