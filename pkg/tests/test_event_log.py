import json
import os

import pytest

from sentrygate.alerts import Alert, ClientIdentity, HIGH, LOW, SQLI, XSS
from sentrygate.event_log import (
    CONTROLLER_PREFIX, EventLogger, QueryFilter, SchemaError, _finite,
    escape_evidence,
)
from util import T0

DAY1 = "20200913"        # gmtime of T0
DAY2 = "20200914"


def mk_alert(cls=SQLI, ip="10.0.0.1", evidence="q=' or '1'='1"):
    return Alert(attack_class=cls, severity=HIGH, confidence=HIGH, score=2.5,
                 module="data_validator", evidence=evidence,
                 identity=ClientIdentity(ip=ip, session_id="s1",
                                         username="alice"),
                 requested_url="/search?q=x")


@pytest.fixture
def logger(tmp_path):
    log = EventLogger(str(tmp_path / "logs"))
    yield log
    log.close()


def test_defender_record_round_trip(logger):
    seq = logger.defender_record(now=T0, alert=mk_alert(), action_kind="block_ip")
    assert seq == 1
    recs = logger.query(QueryFilter(ts_from=T0, ts_to=T0 + 1))
    assert len(recs) == 1
    rec = recs[0]
    assert rec["attack_class"] == SQLI
    assert rec["action_kind"] == "block_ip"
    assert rec["username"] == "alice" and rec["ip"] == "10.0.0.1"
    assert rec["score"] == 2.5
    assert "note" not in rec
    assert "'" not in rec["evidence"]          # evidence travels escaped


def test_day_files_and_seq_ordering(logger):
    logger.defender_record(now=T0, alert=mk_alert(), action_kind="log_only")
    logger.defender_record(now=T0 + 86400, alert=mk_alert(XSS),
                           action_kind="log_only")
    logger.defender_record(now=T0 + 1, alert=mk_alert(), action_kind="log_only")
    logger.flush()
    names = sorted(os.listdir(logger.log_dir))
    assert names == [f"defender-{DAY1}.jsonl", f"defender-{DAY2}.jsonl"]
    recs = logger.query(QueryFilter(ts_from=T0, ts_to=T0 + 2 * 86400))
    assert [r["seq"] for r in recs] == [1, 3, 2]       # time order, seq ties
    assert [r["ts"] for r in recs] == [T0, T0 + 1, T0 + 86400]


def test_query_filters(logger):
    logger.defender_record(now=T0, alert=mk_alert(SQLI, ip="1.1.1.1"),
                           action_kind="log_only")
    logger.defender_record(now=T0 + 5, alert=mk_alert(XSS, ip="2.2.2.2"),
                           action_kind="log_only")
    logger.defender_record(now=T0 + 10, alert=mk_alert(SQLI, ip="2.2.2.2"),
                           action_kind="log_only")

    window = logger.query(QueryFilter(ts_from=T0, ts_to=T0 + 10))
    assert [r["ts"] for r in window] == [T0, T0 + 5]   # ts_to is exclusive

    only_sqli = logger.query(QueryFilter(ts_from=T0, ts_to=T0 + 60,
                                         attack_class=SQLI))
    assert [r["attack_class"] for r in only_sqli] == [SQLI, SQLI]

    by_ip = logger.query(QueryFilter(ts_from=T0, ts_to=T0 + 60, ip="2.2.2.2"))
    assert len(by_ip) == 2


def test_query_survives_truncated_line(logger):
    logger.defender_record(now=T0, alert=mk_alert(), action_kind="log_only")
    logger.flush()
    path = os.path.join(logger.log_dir, f"defender-{DAY1}.jsonl")
    with open(path, "a", encoding="utf-8") as fh:
        fh.write('{"ts": 16000')                       # crash artifact
    recs = logger.query(QueryFilter(ts_from=T0, ts_to=T0 + 1))
    assert len(recs) == 1


def test_defender_schema_is_enforced(logger):
    alert = mk_alert()
    alert.attack_class = "not-a-class"                 # bypasses construction
    with pytest.raises(SchemaError):
        logger.defender_record(now=T0, alert=alert, action_kind="log_only")
    alert = mk_alert()
    alert.confidence = "medium"
    with pytest.raises(SchemaError):
        logger.defender_record(now=T0, alert=alert, action_kind="log_only")


def test_controller_records_by_op(logger):
    logger.controller_record(now=T0, session_id="s1", op="scrub",
                             detail={"label": "server-banner", "count": 2})
    logger.controller_record(now=T0 + 1, session_id="s1", op="mark",
                             detail={"param": "ProductId"})
    logger.controller_record(now=T0 + 2, session_id=None, op="seal",
                             detail={"param": "prefs"})
    logger.controller_record(now=T0 + 3, session_id="s1", op="inject",
                             detail={"forms": 1})
    recs = logger.query(QueryFilter(ts_from=T0, ts_to=T0 + 60),
                        prefix=CONTROLLER_PREFIX)
    assert [r["op"] for r in recs] == ["scrub", "mark", "seal", "inject"]
    assert recs[0]["detail"] == {"label": "server-banner", "count": 2}
    assert recs[2]["session_id"] is None


@pytest.mark.parametrize("op,detail", [
    ("purge", {"param": "x"}),                         # unknown op
    ("mark", {"param": "x", "count": 1}),              # extra key
    ("scrub", {"label": "ok"}),                        # missing key
    ("mark", {"param": "name=value"}),                 # value smuggled in
    ("mark", {"param": "a;b"}),
    ("mark", {"param": "p" * 65}),                     # name cap
    ("inject", {"forms": True}),                       # bool is not a count
    ("scrub", {"label": "x", "count": "2"}),           # str is not a count
])
def test_controller_schema_rejections(logger, op, detail):
    with pytest.raises(SchemaError):
        logger.controller_record(now=T0, session_id="s1", op=op, detail=detail)


def test_escape_evidence_neutralizes_markup():
    out = escape_evidence('<script>alert("x")</script>')
    assert "<" not in out and '"' not in out
    assert "%3C" in out
    # Common log punctuation stays readable.
    assert escape_evidence("ip=1.2.3.4, path /a_b (ok)") == \
        "ip=1.2.3.4, path /a_b (ok)"


def test_escape_evidence_clips_to_cap():
    out = escape_evidence("a" * 1000)
    assert out == "a" * 256


def test_finite_guards_json():
    assert _finite(2.5) == 2.5
    assert _finite(float("inf")) == 1e308
    assert _finite(float("-inf")) == 1e308
    assert _finite(float("nan")) == 1e308
    record = json.dumps({"score": _finite(float("inf"))})
    assert json.loads(record)["score"] == 1e308
