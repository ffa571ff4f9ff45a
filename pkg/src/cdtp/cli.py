"""Command-line entry points: cdtp-server, cdtp, bwprobe, cdtp-batch, cdtp-bench."""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import sys
import time
from pathlib import Path

from . import wire
from .bandwidth import (MeasurementConfig, MeasurementError, MeasurementFailed, StageTimes,
                        compute_capacity, compute_queue_delay, run_initiator, run_responder,
                        sanity_check)
from .client import Client, ClientConfig, ClientError, batch_control
from .server import Server, ServerConfig
from .transport import AsyncioNet


def _env_port(name: str, default: int) -> int:
    value = os.environ.get(name)
    return int(value) if value else default


def server_port() -> int:
    return _env_port("CDTP_SERVER_PORT", wire.SERVER_PORT)


def _addr(text: str, default_port: int) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep:
        return (text, default_port)
    return (host or "127.0.0.1", int(port))


def _logging(args) -> None:
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        stream=sys.stderr)


def _measurement_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("bandwidth measurement")
    g.add_argument("--base-size", type=int, default=600, help="base probe payload (bytes)")
    g.add_argument("--steps", type=int, default=3, help="measurement steps m")
    g.add_argument("--factor", type=int, default=2, help="size multiplication factor")
    g.add_argument("--step-timeout", type=float, default=2.0, help="seconds per stage")
    g.add_argument("--max-rounds", type=int, default=10, help="extra rounds while insane")
    g.add_argument("--seed", type=int, default=0, help="payload RNG seed")


def _measurement(args) -> MeasurementConfig:
    return MeasurementConfig(args.base_size, args.steps, args.factor, args.step_timeout,
                             args.max_rounds, args.seed)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="count", default=0)


# --------------------------------------------------------------------------
# cdtp-server
# --------------------------------------------------------------------------


def server_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="cdtp-server", description="Serve a directory over CDTP.")
    p.add_argument("--root", help="directory to serve (default: current directory)")
    p.add_argument("--port", type=int, help="UDP/TCP port (default 6000 or $CDTP_SERVER_PORT)")
    p.add_argument("--bind", default="127.0.0.1", help="address to bind and advertise")
    p.add_argument("--config", help="INI file with [server] and [measurement] sections")
    p.add_argument("--tolerance", type=float, help="bandwidth compatibility band (0..1)")
    p.add_argument("--fraction", type=float, help="max tail lead as a fraction of the file")
    p.add_argument("--max-chunk", type=int, help="largest chunk size accepted")
    p.add_argument("--mode", choices=("cdtp", "ftp-baseline"))
    p.add_argument("--egress-bps", type=float, help="emulate a slow uplink (bits/second)")
    _measurement_flags(p)
    _common(p)
    args = p.parse_args(argv)
    _logging(args)
    over = {}
    for key, val in (("root", args.root), ("port", args.port), ("bw_tolerance", args.tolerance),
                     ("progress_fraction", args.fraction), ("max_chunk_size", args.max_chunk),
                     ("mode", args.mode)):
        if val is not None:
            over[key] = val
    if args.port is None and not args.config:
        over["port"] = server_port()
    try:
        if args.config:
            config = ServerConfig.from_file(args.config, **over)
        else:
            config = ServerConfig(measurement=_measurement(args), **over)
    except (ValueError, FileNotFoundError) as exc:
        print(f"cdtp-server: {exc}", file=sys.stderr)
        return 2
    net = AsyncioNet(args.bind, egress_rate=args.egress_bps / 8 if args.egress_bps else None)

    async def run():
        server = Server(net, config)
        await server.start()
        print(f"serving {server.tree.root} on {net.ip}:{server.port}", flush=True)
        try:
            await asyncio.Event().wait()
        finally:
            await server.close()

    try:
        asyncio.run(run())
    except FileNotFoundError as exc:
        print(f"cdtp-server: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cdtp-server: cannot listen on port {config.port}: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        pass
    return 0


# --------------------------------------------------------------------------
# cdtp (client)
# --------------------------------------------------------------------------


def _client_config(args, **extra) -> ClientConfig:
    return ClientConfig(server=_addr(args.server, server_port()), chunk_size=args.chunk_size,
                        request_timeout=args.timeout, measurement=_measurement(args), **extra)


def client_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="cdtp", description="CDTP client.")
    p.add_argument("--server", default=f"127.0.0.1:{server_port()}", help="host:port")
    p.add_argument("--bind", default="127.0.0.1", help="local address")
    p.add_argument("--chunk-size", type=int, default=8192)
    p.add_argument("--timeout", type=float, default=3.0, help="request timeout (s)")
    p.add_argument("--cd", dest="chdir", help="change directory before the command")
    _measurement_flags(p)
    _common(p)
    sub = p.add_subparsers(dest="cmd", required=True)
    sub.add_parser("ls", help="list the current directory")
    sub.add_parser("pwd", help="print the current directory")
    c = sub.add_parser("cd", help="check that a directory can be entered")
    c.add_argument("dir")
    g = sub.add_parser("get", help="download a file")
    g.add_argument("file")
    g.add_argument("-o", "--output", help="output path (default: basename in cwd)")
    g.add_argument("--linger", action="store_true",
                   help="keep serving the next chain member before exiting")
    b = sub.add_parser("batch-wait", help="wait for remote BeginRequest commands")
    b.add_argument("--file", required=True, help="file fetched on each BeginRequest")
    b.add_argument("--port", type=int, default=_env_port("CDTP_BATCH_PORT",
                                                         wire.BATCH_CLIENT_PORT))
    b.add_argument("--output-dir", default=".")
    b.add_argument("--count", type=int, default=0, help="exit after this many gets (0: never)")
    args = p.parse_args(argv)
    _logging(args)

    async def run() -> int:
        extra = {}
        if args.cmd == "batch-wait":
            extra = {"batch_file": args.file, "batch_port": args.port,
                     "output_dir": args.output_dir}
        client = Client(AsyncioNet(args.bind), _client_config(args, **extra),
                        on_progress=_progress_printer() if args.cmd == "get" else None)
        try:
            await client.start()
            if args.chdir:
                await client.cd(args.chdir)
            if args.cmd == "ls":
                for name in await client.ls():
                    print(name)
            elif args.cmd == "pwd":
                print(await client.pwd())
            elif args.cmd == "cd":
                await client.cd(args.dir)
                print(await client.pwd())
            elif args.cmd == "get":
                start = time.monotonic()
                data = await client.get(args.file)
                elapsed = time.monotonic() - start
                out = Path(args.output or Path(args.file).name)
                out.write_bytes(data)
                rate = len(data) * 8 / elapsed if elapsed > 0 else 0.0
                print(f"\nreceived {len(data)} bytes in {elapsed:.3f} s ({rate:.0f} bps) -> {out}")
                if args.linger:
                    await client.wait_serving_done()
            elif args.cmd == "batch-wait":
                await client.start_batch()
                done = 0
                while not args.count or done < args.count:
                    await asyncio.sleep(0.2)
                    state = client.download
                    if state is not None and state.done and not client._batch_running:
                        done += 1
                        client.download = None
            return 0
        finally:
            await client.close()

    try:
        return asyncio.run(run())
    except (ClientError, OSError) as exc:
        print(f"cdtp: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


def _progress_printer():
    last = [0.0]

    def show(state):
        now = time.monotonic()
        if now - last[0] < 0.5 and state.bytes_received < state.file_size:
            return
        last[0] = now
        pct = 100.0 * state.bytes_received / state.file_size if state.file_size else 100.0
        print(f"progress {state.bytes_received}/{state.file_size} {pct:.1f}%",
              file=sys.stderr, flush=True)
    return show


# --------------------------------------------------------------------------
# bwprobe
# --------------------------------------------------------------------------


def _print_result(r) -> None:
    print(f"capacity_bps={r.capacity_bps:.0f} queue_delay_ms={r.queue_delay_ns / 1e6:.3f} "
          f"sane={str(r.sane).lower()} steps={r.steps_used} rounds={r.rounds}")


def bwprobe_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="bwprobe", description="Packet-pair capacity probe.")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--initiate", metavar="HOST:PORT", help="measure towards a responder")
    mode.add_argument("--respond", metavar="PORT", type=int, help="answer probes on PORT")
    mode.add_argument("--scenario", metavar="FILE", help="measure inside a simulated scenario")
    mode.add_argument("--replay", metavar="T1,T2,T3,T4",
                      help="evaluate recorded stage minima (milliseconds)")
    p.add_argument("--bind", default="127.0.0.1")
    p.add_argument("--duration", type=float, default=0.0, help="respond for N seconds (0: forever)")
    p.add_argument("--trace", metavar="CSV", help="write the simulated event trace (--scenario)")
    _measurement_flags(p)
    _common(p)
    args = p.parse_args(argv)
    _logging(args)
    try:
        cfg = _measurement(args)
    except ValueError as exc:
        print(f"bwprobe: {exc}", file=sys.stderr)
        return 2

    if args.replay:
        return _replay(args.replay, cfg)
    if args.scenario:
        return _scenario_probe(args, cfg)
    net = AsyncioNet(args.bind)
    if args.respond is not None:
        async def respond():
            task = asyncio.ensure_future(run_responder(net, args.respond))
            if args.duration:
                await asyncio.sleep(args.duration)
                task.cancel()
            try:
                await task
            except asyncio.CancelledError:
                pass
        try:
            asyncio.run(respond())
        except KeyboardInterrupt:
            pass
        return 0
    peer = _addr(args.initiate, 0)
    try:
        result = asyncio.run(run_initiator(net, peer, cfg))
    except MeasurementError as exc:
        print(f"bwprobe: measurement failed: {exc}", file=sys.stderr)
        return 1
    _print_result(result)
    return 0


def _replay(text: str, cfg: MeasurementConfig) -> int:
    try:
        t = [int(round(float(v) * 1_000_000)) for v in text.split(",")]
        times = StageTimes(*t)
    except (TypeError, ValueError):
        print("bwprobe: --replay needs four comma-separated times", file=sys.stderr)
        return 2
    f = cfg.multiplication_factor
    sane = sanity_check(*times.as_tuple(), factor=f)
    q = compute_queue_delay(*times.as_tuple(), factor=f)
    try:
        cap = compute_capacity(*times.as_tuple(), cfg.base_payload_size, factor=f, time_unit=1e-9)
    except MeasurementError as exc:
        print(f"bwprobe: {exc}", file=sys.stderr)
        print(f"sane={str(sane).lower()}")
        return 1
    if q < 0:
        q, sane = 0, False
    print(f"capacity_bps={cap * 8:.0f} queue_delay_ms={q / 1e6:.3f} sane={str(sane).lower()} "
          f"steps=1 rounds=1")
    return 0


def _scenario_probe(args, cfg: MeasurementConfig) -> int:
    from .simnet.aio import Simulation
    from .simnet.scenario import ScenarioError, load

    try:
        sc = load(args.scenario)
        src, dst = sc.endpoint("initiator"), sc.endpoint("responder")
    except (OSError, ScenarioError, KeyError) as exc:
        print(f"bwprobe: bad scenario: {exc}", file=sys.stderr)
        return 2
    if args.trace:
        sc.network.sim.trace = sc.network.sim.trace or []
    sim = Simulation(sc.network, time_limit_s=sc.time_limit_s or 3600)
    a, b = sim.host(src), sim.host(dst)

    async def main():
        responder = asyncio.ensure_future(run_responder(b, 5000))
        try:
            return await run_initiator(a, (b.ip, 5000), cfg)
        finally:
            responder.cancel()

    try:
        result = sim.run(main())
    except (MeasurementFailed, MeasurementError) as exc:
        print(f"bwprobe: measurement failed: {exc}", file=sys.stderr)
        return 1
    finally:
        sim.close()
        if args.trace:
            sc.network.sim.dump_trace(args.trace)
    _print_result(result)
    return 0


# --------------------------------------------------------------------------
# cdtp-batch
# --------------------------------------------------------------------------


def batch_main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="cdtp-batch", description="Start gets on remote clients.")
    p.add_argument("targets", nargs="+", metavar="HOST[:PORT]")
    p.add_argument("--port", type=int, default=_env_port("CDTP_BATCH_CONTROLLER_PORT",
                                                         wire.BATCH_CONTROLLER_PORT))
    p.add_argument("--bind", default="127.0.0.1")
    p.add_argument("--reply-timeout", type=float, default=5.0)
    p.add_argument("--result-timeout", type=float, default=300.0)
    _common(p)
    args = p.parse_args(argv)
    _logging(args)
    default = _env_port("CDTP_BATCH_PORT", wire.BATCH_CLIENT_PORT)
    targets = [_addr(t, default) for t in args.targets]
    rows = asyncio.run(batch_control(AsyncioNet(args.bind), targets, args.reply_timeout,
                                     args.result_timeout, args.port))
    print(f"{'target':<24} {'reply':>6} {'result':>7}")
    ok = True
    for t, row in rows.items():
        reply = "timeout" if row["reply"] is None else str(row["reply"])
        result = "-" if row["reply"] == 0 else (
            "timeout" if row["result"] is None else str(row["result"]))
        ok = ok and row["reply"] == 1 and row["result"] == 1
        print(f"{t[0] + ':' + str(t[1]):<24} {reply:>6} {result:>7}")
    return 0 if ok else 1


# --------------------------------------------------------------------------
# cdtp-bench
# --------------------------------------------------------------------------


def bench_main(argv=None) -> int:
    from .bench import ExperimentSpec, run_both, to_csv

    p = argparse.ArgumentParser(prog="cdtp-bench",
                                description="Compare chained and direct downloads.")
    p.add_argument("--topology", choices=("simnet", "loopback"), default="simnet")
    p.add_argument("--server-bps", type=int, default=120000)
    p.add_argument("--client-bps", type=int, default=100_000_000)
    p.add_argument("--file-size", type=int, default=561282)
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--stagger", type=float, default=5.0)
    p.add_argument("--chunk-size", type=int, default=8192)
    p.add_argument("--out", help="CSV output path (default: stdout)")
    _measurement_flags(p)
    _common(p)
    args = p.parse_args(argv)
    _logging(args)
    try:
        spec = ExperimentSpec(args.topology, args.server_bps, args.client_bps,
                              file_size=args.file_size, clients=args.clients,
                              stagger=args.stagger, seed=args.seed, chunk_size=args.chunk_size,
                              measurement=_measurement(args))
    except ValueError as exc:
        print(f"cdtp-bench: {exc}", file=sys.stderr)
        return 2
    cdtp, ftp = run_both(spec)
    text = to_csv(cdtp, ftp)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if cdtp.failed or ftp.failed:
        print("cdtp-bench: at least one client failed", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(client_main())
