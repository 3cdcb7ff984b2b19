"""Command line: ``streamgate gen | run | report | serve``.

Settings come from flags, then an optional ``--config`` file of
``key = value`` lines (keys are flag names with underscores), then the
built-in defaults.  ``STREAMGATE_ENDPOINT`` overrides the endpoint from
the config file; an explicit ``--endpoint`` flag still wins.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .bench.harness import MODES, run_benchmark
from .bench.report import build_report, format_table, summary_rows
from .bench.workload import Workload, WorkloadSpec, generate_workload
from .engine import Engine
from .gateway import Gateway
from .policy import PolicyStore
from .proxy import CachingProxy
from .querygraph import GPS, WEATHER
from .server import GatewayClient, serve

ENDPOINT_ENV = "STREAMGATE_ENDPOINT"

DEFAULTS = {
    "seed": 0,
    "sequence": "zipf",
    "n_direct_queries": 1500,
    "direct_query_dist": "160:170:130:124:254:290:372",
    "n_policies": 1000,
    "n_requests": 1500,
    "zipf_alpha": 0.223,
    "max_rank": 300,
    "mode": "gateway",
    "endpoint": None,
    "host": "127.0.0.1",
    "port": 7070,
    "proxy": False,
    "strict": False,
    "out": None,
}


def read_config(path: str | Path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{n}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_settings(args: argparse.Namespace, environ=os.environ) -> dict:
    config = read_config(args.config) if args.config else {}
    if environ.get(ENDPOINT_ENV):
        config["endpoint"] = environ[ENDPOINT_ENV]
    settings = {}
    for key, default in DEFAULTS.items():
        value = getattr(args, key, None)
        if value is None:
            value = config.get(key, default)
        settings[key] = _typed(key, value, default)
    return settings


def _typed(key: str, value, default):
    if value is None or not isinstance(value, str) or isinstance(default, str) or default is None:
        return value
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    return type(default)(value)


def workload_spec(s: dict) -> WorkloadSpec:
    dist = s["direct_query_dist"]
    if isinstance(dist, str):
        dist = tuple(int(x) for x in dist.split(":"))
    return WorkloadSpec(s["n_direct_queries"], dist, s["n_policies"], s["n_requests"],
                        s["zipf_alpha"], s["max_rank"], s["seed"], s["sequence"])


# ------------------------------------------------------------------ commands

def cmd_gen(args, s: dict) -> int:
    out = Path(s["out"] or "workload")
    w = generate_workload(workload_spec(s))
    w.save(out)
    print(f"wrote {len(w.queries)} scripts, {len(w.policies)} policies, "
          f"{len(w.requests)} requests to {out}")
    return 0


def cmd_run(args, s: dict) -> int:
    w = Workload.load(args.workload) if args.workload else generate_workload(workload_spec(s))
    client = None
    if s["endpoint"]:
        client = GatewayClient.from_endpoint(s["endpoint"])
    try:
        result = run_benchmark(w, s["mode"], client)
    finally:
        if client is not None:
            client.close()
    out = Path(s["out"] or f"bench-{s['mode'].replace('+', '-')}.csv")
    result.write_csv(out)
    summary = result.summary()
    print(format_table(summary_rows({s["mode"]: result.records})), end="")
    if "policy_load" in summary:
        print(f"policy load mean {summary['policy_load']['mean'] * 1e3:.4f} ms "
              f"over {summary['policy_load']['n']} policies")
    print(f"status counts {json.dumps(summary['status'], sort_keys=True)}")
    print(f"records written to {out}")
    return 0


def cmd_report(args, s: dict) -> int:
    out = Path(s["out"] or "report")
    written = build_report(args.csv, out)
    print(written["summary_txt"].read_text(), end="")
    for name, path in written.items():
        print(f"{name} {path}")
    return 0


def cmd_serve(args, s: dict) -> int:
    engine = Engine(host=f"{s['host']}:{s['port']}")
    for schema in (WEATHER, GPS):
        engine.register_stream(schema)
    store = PolicyStore(engine.schema)
    gateway = Gateway(engine, store, strict=s["strict"])
    for path in sorted(Path(args.policies).glob("*.xml")) if args.policies else ():
        store.load_policy(path.read_text())
    proxy = CachingProxy(gateway) if s["proxy"] else None
    server = serve(engine, store, gateway, s["host"], s["port"], proxy)
    host, port = server.address
    print(f"listening on {host}:{port} ({len(store)} policies, "
          f"proxy {'on' if proxy else 'off'})", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamgate", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def workload_flags(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--sequence", choices=("zipf", "unique"))
        sp.add_argument("--n-direct-queries", dest="n_direct_queries", type=int)
        sp.add_argument("--direct-query-dist", dest="direct_query_dist",
                        help="seven ratios for F:M:A:FM:FA:MA:FMA")
        sp.add_argument("--n-policies", dest="n_policies", type=int)
        sp.add_argument("--n-requests", dest="n_requests", type=int)
        sp.add_argument("--zipf-alpha", dest="zipf_alpha", type=float)
        sp.add_argument("--max-rank", dest="max_rank", type=int)

    gen = sub.add_parser("gen", help="write a workload directory")
    workload_flags(gen)
    gen.add_argument("-o", "--out", help="output directory (default: workload)")
    gen.set_defaults(func=cmd_gen)

    run = sub.add_parser("run", help="time a request sequence")
    workload_flags(run)
    run.add_argument("--workload", help="directory written by gen (default: generate)")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--endpoint", help="host:port of a running gateway")
    run.add_argument("-o", "--out", help="CSV path for per-request records")
    run.set_defaults(func=cmd_run)

    report = sub.add_parser("report", help="summary table and figures from CSVs")
    report.add_argument("csv", nargs="+")
    report.add_argument("-o", "--out", help="output directory (default: report)")
    report.set_defaults(func=cmd_report)

    srv = sub.add_parser("serve", help="run a gateway over TCP")
    srv.add_argument("--host")
    srv.add_argument("--port", type=int)
    srv.add_argument("--proxy", action="store_true", default=None,
                     help="put the caching proxy in front of the gateway")
    srv.add_argument("--strict", action="store_true", default=None,
                     help="block partial-result merges")
    srv.add_argument("--policies", help="directory of policy XML files to load")
    srv.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args)
        return args.func(args, settings)
    except (OSError, ValueError) as exc:
        print(f"streamgate: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
