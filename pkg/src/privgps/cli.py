"""Command line: ``privgps {daemon,aggregate,loadgen,sim}``."""

from __future__ import annotations

import argparse
import asyncio
import logging
import math
import signal
import sys

from privgps import protocol
from privgps.mechanisms import CoinPair, coins_for_epsilon

log = logging.getLogger("privgps")


def _coins_arg(text: str) -> CoinPair:
    try:
        p, q = (float(x) for x in text.split(","))
        return CoinPair(p, q)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--coins wants P,Q: {exc}") from None


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _channel(args) -> CoinPair:
    if args.coins is not None:
        return args.coins
    return coins_for_epsilon(args.epsilon)


def _open_out(path: str | None):
    return open(path, "w", newline="") if path and path != "-" else sys.stdout


def cmd_daemon(args) -> int:
    from privgps.daemon import LocationDaemon
    from privgps.gps_source import parse_source_spec
    from privgps.policy import load_policies

    try:
        with open(args.policy, "rb") as fh:
            store = load_policies(fh.read())
        source = parse_source_spec(args.source, args.speedup, args.no_throttle)
        daemon = LocationDaemon(store, source, port=args.port, seed=args.seed, max_clients=args.max_clients,
                                policy_path=args.policy)
    except (OSError, ValueError) as exc:
        print(f"privgps daemon: {exc}", file=sys.stderr)
        return 2

    async def main() -> int:
        try:
            await daemon.start()
        except OSError as exc:
            print(f"privgps daemon: cannot bind port {args.port}: {exc}", file=sys.stderr)
            return 2
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, lambda: asyncio.ensure_future(daemon.stop()))
        if args.reload_signal:
            loop.add_signal_handler(signal.SIGUSR1, daemon.reload_policies)
        print(f"listening on 127.0.0.1:{daemon.port}", flush=True)
        await daemon.serve_forever()
        return 0

    return asyncio.run(main())


def cmd_aggregate(args) -> int:
    from privgps.tools import aggregate as agg

    try:
        fh = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
        with fh:
            records = agg.read_records(fh)
        rows = agg.aggregate(records, _channel(args), agg.parse_grid(args.grid))
    except (OSError, ValueError) as exc:
        print(f"privgps aggregate: {exc}", file=sys.stderr)
        return 2
    out = _open_out(args.out)
    agg.write_csv(rows, out)
    if out is not sys.stdout:
        out.close()
    return 0


def cmd_loadgen(args) -> int:
    from privgps.tools import loadgen

    host, _, port = args.addr.rpartition(":")

    async def main():
        reports = []
        for it in range(args.iterations):
            r = await loadgen.run_load(args.clients, args.epoch_ms, args.duration_ms, host or "127.0.0.1",
                                       int(port), app_id=args.app_id, iteration=it)
            reports.append(r)
            log.info("iteration %d: mean reports %.2f, violations %d, refusals %s",
                     it, loadgen.mean_reports([r]), r.violations, r.refusals)
        return reports

    reports = asyncio.run(main())
    out = _open_out(args.out)
    loadgen.write_csv(reports, out)
    if out is not sys.stdout:
        out.close()
    violations = sum(r.violations for r in reports)
    print(f"mean reports per client over {args.iterations} iteration(s): {loadgen.mean_reports(reports):.2f}; "
          f"gap violations: {violations}", file=sys.stderr)
    return 1 if violations else 0


def cmd_sim(args) -> int:
    from privgps.tools import sim
    from privgps.tools.aggregate import parse_grid

    try:
        grid = parse_grid(args.grid)
        dist = [float(x) for x in args.dist.split(",")]
        cells = sim.simulate(args.owners, grid, dist, _channel(args), args.seed)
    except ValueError as exc:
        print(f"privgps sim: {exc}", file=sys.stderr)
        return 2
    out = _open_out(args.out)
    sim.write_csv(cells, out)
    if out is not sys.stdout:
        out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="privgps", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("daemon", help="run the privatizing location daemon")
    d.add_argument("--port", type=int, default=protocol.DEFAULT_PORT)
    d.add_argument("--policy", required=True, help="policy JSON file")
    d.add_argument("--source", required=True, help="nmea:<path> or synthetic:<lat>,<lon>;<lat>,<lon>[/speed=M][/rate=H]")
    d.add_argument("--speedup", type=float, default=1.0)
    d.add_argument("--no-throttle", action="store_true", help="replay NMEA as fast as possible")
    d.add_argument("--seed", type=_u64, default=None, help="reproducible noise (testing only)")
    d.add_argument("--max-clients", type=int, default=64)
    d.add_argument("--reload-signal", action="store_true", help="re-read the policy file on SIGUSR1")
    d.set_defaults(func=cmd_daemon)

    def channel(p):
        g = p.add_mutually_exclusive_group(required=True)
        g.add_argument("--epsilon", type=float)
        g.add_argument("--coins", type=_coins_arg, help="P,Q")

    a = sub.add_parser("aggregate", help="estimate per-cell counts from NDJSON responses")
    a.add_argument("--input", default="-")
    a.add_argument("--grid", required=True, help="ROWSxCOLS:CELL_M@LAT,LON")
    channel(a)
    a.add_argument("--out", default="-")
    a.set_defaults(func=cmd_aggregate)

    lg = sub.add_parser("loadgen", help="drive concurrent subscribers against a daemon")
    lg.add_argument("--clients", type=int, default=25)
    lg.add_argument("--epoch-ms", type=int, default=5000)
    lg.add_argument("--duration-ms", type=int, default=60000)
    lg.add_argument("--addr", default=f"127.0.0.1:{protocol.DEFAULT_PORT}")
    lg.add_argument("--iterations", type=int, default=10)
    lg.add_argument("--app-id", default="loadgen")
    lg.add_argument("--out", default="-")
    lg.set_defaults(func=cmd_loadgen)

    s = sub.add_parser("sim", help="simulate a population study end to end")
    s.add_argument("--owners", type=int, required=True)
    s.add_argument("--grid", required=True, help="ROWSxCOLS:CELL_M@LAT,LON")
    s.add_argument("--dist", required=True, help="comma-separated per-cell proportions")
    channel(s)
    s.add_argument("--seed", type=_u64, default=0)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_sim)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if getattr(args, "epsilon", None) is not None and not (args.epsilon > 0 and math.isfinite(args.epsilon)):
        print("--epsilon must be positive", file=sys.stderr)
        return 2
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
