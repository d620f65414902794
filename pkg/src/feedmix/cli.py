"""Command-line surface: `run` starts the service; `stream`, `stats` and
`plot` are thin clients over the admin API; `compact` is offline store
maintenance.

Exit codes: 0 ok, 2 bad flags/config, 3 admin port busy, 4 service
unreachable."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import requests

from . import __version__
from .config import ConfigError, load_config
from .monitor import buckets_from_json, write_csv
from .plotting import render_metrics_chart
from .service import Service, StartupError
from .store import StreamStore

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PORT_BUSY = 3
EXIT_UNREACHABLE = 4


def _service_url(args) -> str:
    if args.service:
        return args.service.rstrip("/")
    cfg = load_config(getattr(args, "config", None))
    return f"http://{cfg.admin_listen}"


def _get_json(url: str) -> dict:
    resp = requests.get(url, timeout=10)
    resp.raise_for_status()
    return resp.json()


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, cfg.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
    )
    try:
        service = Service(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return service.run_forever()
    except StartupError as exc:
        print(f"startup error: {exc}", file=sys.stderr)
        return EXIT_PORT_BUSY


def cmd_stream_add(args) -> int:
    payload = {
        "url": args.url,
        "channels": [c.strip() for c in args.channels.split(",") if c.strip()],
    }
    if args.interval is not None:
        payload["poll_interval"] = args.interval
    if args.id:
        payload["id"] = args.id
    base = _service_url(args)
    try:
        resp = requests.post(f"{base}/streams", json=payload, timeout=10)
    except requests.ConnectionError as exc:
        print(f"service unreachable at {base}: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    print(json.dumps(resp.json(), indent=2))
    return EXIT_OK if resp.status_code == 201 else EXIT_USAGE


def cmd_stream_rm(args) -> int:
    base = _service_url(args)
    try:
        resp = requests.delete(f"{base}/streams/{args.id}", timeout=10)
    except requests.ConnectionError as exc:
        print(f"service unreachable at {base}: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    if resp.status_code == 204:
        print(f"removed {args.id}")
        return EXIT_OK
    print(resp.text or f"HTTP {resp.status_code}", file=sys.stderr)
    return EXIT_USAGE


def cmd_stream_prioritize(args) -> int:
    base = _service_url(args)
    try:
        resp = requests.post(f"{base}/streams/{args.id}/prioritize", timeout=10)
    except requests.ConnectionError as exc:
        print(f"service unreachable at {base}: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    print(json.dumps(resp.json(), indent=2))
    return EXIT_OK if resp.status_code == 202 else EXIT_USAGE


def _fetch_buckets(args):
    base = _service_url(args)
    try:
        payload = _get_json(f"{base}/metrics")
    except requests.ConnectionError as exc:
        print(f"service unreachable at {base}: {exc}", file=sys.stderr)
        return None
    buckets = buckets_from_json(payload["buckets"])
    if args.window is not None:
        buckets = buckets[-args.window:]
    return buckets


def cmd_stats(args) -> int:
    buckets = _fetch_buckets(args)
    if buckets is None:
        return EXIT_UNREACHABLE
    write_csv(buckets, args.csv)
    print(f"wrote {len(buckets)} buckets to {args.csv}")
    if args.plot:
        render_metrics_chart(buckets, args.plot)
        print(f"wrote chart to {args.plot}")
    return EXIT_OK


def cmd_plot(args) -> int:
    buckets = _fetch_buckets(args)
    if buckets is None:
        return EXIT_UNREACHABLE
    render_metrics_chart(buckets, args.out)
    print(f"wrote chart to {args.out}")
    if args.csv:
        write_csv(buckets, args.csv)
        print(f"wrote {len(buckets)} buckets to {args.csv}")
    return EXIT_OK


def cmd_compact(args) -> int:
    if args.store_root:
        root = args.store_root
    else:
        try:
            root = load_config(args.config).store_root
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    store = StreamStore(root)
    try:
        result = store.compact()
    finally:
        store.close()
    print(json.dumps(result))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feedmix", description=__doc__)
    parser.add_argument("--version", action="version", version=f"feedmix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="start the service")
    p_run.add_argument("--config", help="config file (falls back to $FEEDMIX_CONFIG)")
    p_run.set_defaults(func=cmd_run)

    p_stream = sub.add_parser("stream", help="manage streams via the admin API")
    stream_sub = p_stream.add_subparsers(dest="stream_command", required=True)

    p_add = stream_sub.add_parser("add")
    p_add.add_argument("--url", required=True)
    p_add.add_argument("--channels", default="news", help="comma-separated channel kinds")
    p_add.add_argument("--interval", type=float, default=None, help="poll interval seconds")
    p_add.add_argument("--id", default=None)
    p_add.add_argument("--service", default=None, help="admin base URL")
    p_add.add_argument("--config", default=None)
    p_add.set_defaults(func=cmd_stream_add)

    p_rm = stream_sub.add_parser("rm")
    p_rm.add_argument("id")
    p_rm.add_argument("--service", default=None)
    p_rm.add_argument("--config", default=None)
    p_rm.set_defaults(func=cmd_stream_rm)

    p_prio = stream_sub.add_parser("prioritize")
    p_prio.add_argument("id")
    p_prio.add_argument("--service", default=None)
    p_prio.add_argument("--config", default=None)
    p_prio.set_defaults(func=cmd_stream_prioritize)

    p_stats = sub.add_parser("stats", help="export metrics buckets as CSV")
    p_stats.add_argument("--window", type=int, default=None, help="most recent N buckets")
    p_stats.add_argument("--csv", required=True, help="output CSV path")
    p_stats.add_argument("--plot", default=None, help="also render a chart here")
    p_stats.add_argument("--service", default=None)
    p_stats.add_argument("--config", default=None)
    p_stats.set_defaults(func=cmd_stats)

    p_plot = sub.add_parser("plot", help="render the metrics chart")
    p_plot.add_argument("--out", required=True, help="output figure path (.svg/.png)")
    p_plot.add_argument("--window", type=int, default=None)
    p_plot.add_argument("--csv", default=None, help="also export the buckets here")
    p_plot.add_argument("--service", default=None)
    p_plot.add_argument("--config", default=None)
    p_plot.set_defaults(func=cmd_plot)

    p_compact = sub.add_parser("compact", help="offline store maintenance")
    p_compact.add_argument("--store-root", default=None)
    p_compact.add_argument("--config", default=None)
    p_compact.set_defaults(func=cmd_compact)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
