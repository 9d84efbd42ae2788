"""bench: run cases, serve the queue API, inspect artifacts."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bench",
        description="EMT real-time simulation and relay test bench")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a case file")
    p_run.add_argument("case", type=Path)
    p_run.add_argument("--realtime", action="store_true",
                       help="pace steps against the wall clock")
    p_run.add_argument("--out", type=Path, default=None,
                       help="run directory (default <case>.run)")
    p_run.add_argument("--t-end", type=float, default=None,
                       help="override the simulated stop time")
    p_run.add_argument("--report", action="store_true",
                       help="render figures and CSV after the run")

    p_serve = sub.add_parser("serve", help="start the queue/API service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8421)
    p_serve.add_argument("--runs-dir", type=Path, default=Path("runs"))
    p_serve.add_argument("--token", default=None,
                         help="require this static token on every request")
    p_serve.add_argument("--frontend", type=Path, default=None,
                         help="static console assets to serve at /")

    p_ct = sub.add_parser("comtrade", help="COMTRADE tools")
    ct_sub = p_ct.add_subparsers(dest="ct_command", required=True)
    p_cmp = ct_sub.add_parser("compare", help="overlay two records")
    p_cmp.add_argument("record_a", help=".cfg path or basename")
    p_cmp.add_argument("record_b", help=".cfg path or basename")
    p_cmp.add_argument("--map", default=None,
                       help="analog channel pairs, e.g. 0:0,1:2")
    p_cmp.add_argument("--no-align", action="store_true",
                       help="skip cross-correlation time alignment")

    p_sv = sub.add_parser("sv", help="sampled values tools")
    sv_sub = p_sv.add_subparsers(dest="sv_command", required=True)
    p_dump = sv_sub.add_parser("pcap-dump", help="decode SV frames in a pcap")
    p_dump.add_argument("pcap", type=Path)
    p_dump.add_argument("--limit", type=int, default=20)

    p_rep = sub.add_parser("report", help="render figures + CSV for a run")
    p_rep.add_argument("run_dir", type=Path)
    p_rep.add_argument("--out", type=Path, default=None)

    args = parser.parse_args(argv)
    return {
        "run": _cmd_run,
        "serve": _cmd_serve,
        "comtrade": _cmd_comtrade,
        "sv": _cmd_sv,
        "report": _cmd_report,
    }[args.command](args)


def _cmd_run(args) -> int:
    from . import rtexec
    from .caseformat import CaseParseError, parse_case

    try:
        case = parse_case(args.case.read_text())
    except CaseParseError as exc:
        for diag in exc.diagnostics:
            print(f"{args.case}:{diag}", file=sys.stderr)
        return 2
    out_dir = args.out or args.case.with_suffix(".run")
    mode = rtexec.REALTIME if args.realtime else rtexec.BATCH
    result = rtexec.run(case, mode, out_dir=out_dir,
                        t_end_override=args.t_end)
    t = result.timing
    print(f"run finished: {t.steps} steps at dt={t.dt * 1e6:.0f} us "
          f"({t.mode})")
    print(f"  mean step work {t.mean_step_work * 1e6:.1f} us, "
          f"p99 {t.p99_step_work * 1e6:.1f} us, "
          f"max {t.max_step_work * 1e6:.1f} us, overruns {t.overruns}")
    if result.relay is not None and result.relay.trip_time is not None:
        print(f"  relay tripped at t={result.relay.trip_time:.6f} s")
    for warning in t.warnings:
        print(f"  note: {warning}")
    print(f"  artifacts in {out_dir}")
    if args.report:
        from .report import render_run_report
        for path in render_run_report(out_dir):
            print(f"  wrote {path}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import BenchService, create_app

    service = BenchService(args.runs_dir, token=args.token)
    frontend = args.frontend
    if frontend is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        frontend = bundled if bundled.is_dir() else None
    app = create_app(service, frontend_dir=frontend)
    print(f"serving on http://{args.host}:{args.port} "
          f"(runs in {args.runs_dir})")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_comtrade(args) -> int:
    from .comtrade import compare, read_files

    rec_a = read_files(args.record_a)
    rec_b = read_files(args.record_b)
    channel_map = None
    if args.map:
        channel_map = [tuple(int(x) for x in pair.split(":"))
                       for pair in args.map.split(",")]
    report = compare(rec_a, rec_b, channel_map=channel_map,
                     time_align=not args.no_align)
    print(f"time alignment: lag {report.lag_seconds * 1e3:+.3f} ms "
          f"at {report.base_rate:.0f} Hz base")
    for ch in report.channels:
        print(f"  {ch.id_a:>10s} vs {ch.id_b:<10s} "
              f"rms {ch.rms:.4g} ({ch.rms_pct_of_peak:.2f}% of peak) "
              f"max {ch.max_abs:.4g}")
    for id_a, id_b, delta in report.digital_time_diffs:
        shown = "never/mismatch" if delta != delta or delta == float("inf") \
            else f"{delta * 1e3:+.3f} ms"
        print(f"  {id_a:>10s} vs {id_b:<10s} first-assert diff {shown}")
    return 0


def _cmd_sv(args) -> int:
    from ._ber import Malformed
    from .etherlink import read_pcap
    from .sv import sv_decode

    frames = read_pcap(args.pcap)
    print(f"{len(frames)} frames in {args.pcap}")
    shown = 0
    bad = 0
    for t, frame in frames:
        try:
            parsed = sv_decode(frame)
        except Malformed:
            bad += 1
            continue
        if shown < args.limit:
            vals = " ".join(f"{v:>9d}" for v in parsed.values)
            print(f"  t={t:9.6f} svID={parsed.sv_id} "
                  f"smpCnt={parsed.smp_cnt:4d} [{vals}]")
            shown += 1
    if len(frames) > shown:
        print(f"  ... {len(frames) - shown - bad} more SV frames")
    if bad:
        print(f"  {bad} non-SV frames skipped")
    return 0


def _cmd_report(args) -> int:
    from .report import render_run_report

    for path in render_run_report(args.run_dir, args.out):
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
