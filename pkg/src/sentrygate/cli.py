"""Command line front end.

Subcommands cover the whole lifecycle: run the proxy (serve), fit models
from a recorded trace (train), replay a trace against trained models and
score it (replay), run the self-contained demo loop (simulate), maintain
the block list seed (block), and summarize event logs (report).
"""

from __future__ import annotations

import argparse
import http.client
import http.server
import json
import math
import os
import sys
import time

from .config import Config, ConfigError, TokenSource
from .connection_verifier import KINDS
from .event_log import EventLogger, QueryFilter
from .httpmsg import RawRequest, Response
from .models import BundleError, ModelBundle
from .pipeline import Pipeline, UpstreamUnreachable
from .trace import ReplayClient, load_trace, replay_trace, save_trace
from .trainer import train_all

_HOP_HEADERS = {"transfer-encoding", "content-length", "connection"}


class HttpUpstream:
    """Forward a raw request to the real origin over a fresh connection."""

    def __init__(self, hostport: str, timeout: float = 10.0) -> None:
        host, _, port = hostport.partition(":")
        self.host = host
        self.port = int(port) if port else 80
        self.timeout = timeout

    def __call__(self, raw: RawRequest) -> Response:
        try:
            conn = http.client.HTTPConnection(
                self.host, self.port, timeout=self.timeout)
            conn.putrequest(raw.method, raw.target,
                            skip_host=True, skip_accept_encoding=True)
            for name, value in raw.headers:
                conn.putheader(name, value)
            conn.endheaders(raw.body or b"")
            resp = conn.getresponse()
            body = resp.read()
            headers = [(n, v) for n, v in resp.getheaders()
                       if n.lower() not in _HOP_HEADERS]
            headers.append(("Content-Length", str(len(body))))
            status = resp.status
            conn.close()
            return Response(status=status, headers=headers, body=body)
        except (OSError, http.client.HTTPException) as exc:
            raise UpstreamUnreachable(str(exc)) from exc


def _make_handler(pipeline: Pipeline):
    class Handler(http.server.BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _dispatch(self) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(length) if length > 0 else b""
            raw = RawRequest(
                source_ip=self.client_address[0], received_at=time.time(),
                method=self.command, target=self.path,
                version=self.request_version,
                headers=list(self.headers.items()), body=body)
            response, _ = pipeline.handle(raw, now=time.time())
            self.send_response_only(response.status)
            has_length = False
            for name, value in response.headers:
                if name.lower() == "content-length":
                    has_length = True
                self.send_header(name, value)
            if not has_length:
                self.send_header("Content-Length", str(len(response.body)))
            self.send_header("Connection", "close")
            self.end_headers()
            if self.command != "HEAD":
                self.wfile.write(response.body)
            self.close_connection = True

        do_GET = _dispatch
        do_POST = _dispatch
        do_PUT = _dispatch
        do_DELETE = _dispatch
        do_PATCH = _dispatch
        do_HEAD = _dispatch
        do_OPTIONS = _dispatch

        def log_message(self, fmt: str, *args) -> None:
            # Traffic goes to the event logs, not stderr.
            pass

    return Handler


def _upstream_for(config: Config, use_stub: bool):
    if use_stub:
        from .harness import StubShop
        return StubShop(session_cookie=config.session_cookie_name)
    return HttpUpstream(config.upstream)


def _print_report(rep) -> None:
    print(f"requests: {rep.total}  benign={rep.benign} "
          f"attack={rep.attack} asset={rep.asset}")
    print(f"alerts: {rep.alerts}  on-benign={rep.benign_alerts}  "
          f"false-positives={rep.false_positives}")
    for name in sorted(rep.per_class):
        row = rep.per_class[name]
        print(f"  {name:<20} {row['detected']}/{row['scenarios']} "
              f"scenarios  rate={row['rate']:.2f}")
    missed = [n for n, row in sorted(rep.per_scenario.items())
              if not row["detected"]]
    if missed:
        print("missed scenarios: " + ", ".join(missed))


def _gate(rep) -> int:
    ok = rep.false_positives == 0 and rep.detection_floor() == 1.0
    return 0 if ok else 1


# --- subcommands ------------------------------------------------------------

def _cmd_serve(args) -> int:
    config = Config.from_file(args.config)
    models = ModelBundle.from_file(args.bundle) if args.bundle else None
    pipeline = Pipeline(config, HttpUpstream(config.upstream), models=models)
    host, _, port = config.listen.partition(":")
    server = http.server.ThreadingHTTPServer(
        (host or "127.0.0.1", int(port or 8080)), _make_handler(pipeline))
    print(f"listening on {config.listen}, upstream {config.upstream}",
          file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        pipeline.close()
    return 0


def _cmd_train(args) -> int:
    config = Config.from_file(args.config)
    records = load_trace(args.trace)
    upstream = _upstream_for(config, args.stub)
    bundle = train_all(config, upstream, records,
                       token_source=TokenSource(config.replay_seed))
    bundle.save(args.out)
    print(f"trained on {len(records)} records -> {args.out}")
    print(f"  param specs: {len(bundle.specs)}  watched: "
          f"{sorted(bundle.watched_params)}")
    print(f"  user profiles: {sorted(bundle.user_profiles)}")
    for warning in bundle.warnings:
        print(f"  warning: {warning}", file=sys.stderr)
    return 0


def _run_replay(config: Config, bundle: ModelBundle, records, upstream):
    from .harness import evaluate
    pipeline = Pipeline(config, upstream, models=bundle,
                        token_source=TokenSource(config.replay_seed),
                        timer=lambda: 0.0)
    try:
        results = replay_trace(pipeline, records)
    finally:
        pipeline.close()
    return results, evaluate(results)


def _cmd_replay(args) -> int:
    config = Config.from_file(args.config)
    bundle = ModelBundle.from_file(args.bundle)
    records = load_trace(args.trace)
    _, rep = _run_replay(config, bundle, records,
                         _upstream_for(config, args.stub))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(rep.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
    _print_report(rep)
    return _gate(rep)


def _cmd_simulate(args) -> int:
    from .harness import (StubShop, generate_eval_trace,
                          generate_training_trace, write_environment)
    config = write_environment(args.dir)
    train_records = generate_training_trace(args.seed)
    eval_records = generate_eval_trace(args.seed)
    save_trace(os.path.join(args.dir, "train.jsonl"), train_records)
    save_trace(os.path.join(args.dir, "eval.jsonl"), eval_records)

    shop = StubShop(session_cookie=config.session_cookie_name)
    bundle = train_all(config, shop, train_records,
                       token_source=TokenSource(config.replay_seed))
    bundle_path = os.path.join(args.dir, "models.json")
    bundle.save(bundle_path)
    print(f"trained: {len(bundle.specs)} param specs, watched="
          f"{sorted(bundle.watched_params)}")

    _, rep = _run_replay(config, bundle, eval_records,
                         StubShop(session_cookie=config.session_cookie_name))
    metrics_path = os.path.join(args.dir, "metrics.json")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(rep.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    _print_report(rep)
    print(f"bundle: {bundle_path}")
    print(f"metrics: {metrics_path}")
    return _gate(rep)


def _cmd_block(args) -> int:
    config = Config.from_file(args.config)
    path = config.resolve(config.blocklist_seed_file)
    if path is None:
        print("config has no blocklist_seed_file", file=sys.stderr)
        return 2
    if args.kind not in KINDS:
        print(f"kind must be one of {', '.join(KINDS)}", file=sys.stderr)
        return 2
    try:
        with open(path, "r", encoding="utf-8") as fh:
            entries = json.load(fh)
    except FileNotFoundError:
        entries = []
    entries = [e for e in entries
               if not (e["kind"] == args.kind and e["key"] == args.key)]
    entries.append({"kind": args.kind, "key": args.key,
                    "ttl": args.ttl if args.ttl is not None else "permanent",
                    "reason": args.reason})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=1)
        fh.write("\n")
    print(f"block list now has {len(entries)} entries")
    return 0


def _cmd_report(args) -> int:
    config = Config.from_file(args.config)
    logger = EventLogger(config.resolve(config.log_dir))
    try:
        flt = QueryFilter(ts_from=args.since, ts_to=args.until,
                          attack_class=args.attack_class, ip=args.ip)
        records = logger.query(flt)
    finally:
        logger.close()
    by_class: dict[str, int] = {}
    by_action: dict[str, int] = {}
    by_ip: dict[str, int] = {}
    for rec in records:
        by_class[rec["attack_class"]] = by_class.get(rec["attack_class"], 0) + 1
        by_action[rec["action_kind"]] = by_action.get(rec["action_kind"], 0) + 1
        by_ip[rec["ip"]] = by_ip.get(rec["ip"], 0) + 1
    print(f"{len(records)} defense records")
    for name, count in sorted(by_class.items(), key=lambda kv: -kv[1]):
        print(f"  class {name:<20} {count}")
    for name, count in sorted(by_action.items(), key=lambda kv: -kv[1]):
        print(f"  action {name:<19} {count}")
    top = sorted(by_ip.items(), key=lambda kv: -kv[1])[:5]
    for ip, count in top:
        print(f"  source {ip:<19} {count}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sentrygate",
        description="Inline application-layer intrusion prevention proxy.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the proxy in front of the origin")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--bundle", help="trained model bundle to enforce with")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("train", help="fit models from a recorded trace")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--stub", action="store_true",
                   help="use the built-in demo shop as the origin")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("replay", help="replay a labeled trace and score it")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--report", help="write the metric report JSON here")
    p.add_argument("--stub", action="store_true")
    p.set_defaults(func=_cmd_replay)

    p = sub.add_parser("simulate",
                       help="full demo: environment, traces, train, score")
    p.add_argument("--dir", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("block", help="add an entry to the block list seed")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--kind", required=True)
    p.add_argument("--key", required=True)
    p.add_argument("--ttl", type=float, default=None,
                   help="seconds until expiry; omit for permanent")
    p.add_argument("--reason", default="operator")
    p.set_defaults(func=_cmd_block)

    p = sub.add_parser("report", help="summarize defense event logs")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--since", type=float, default=0.0)
    p.add_argument("--until", type=float, default=math.inf)
    p.add_argument("--attack-class", dest="attack_class", default=None)
    p.add_argument("--ip", default=None)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, BundleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
