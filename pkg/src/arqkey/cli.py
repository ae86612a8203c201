"""Command-line entry point: ``arqkey {sec,reference,simulate,grid,serve,send}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import secrets
import socket
import sys
from dataclasses import asdict
from pathlib import Path

from arqkey import harness, transport
from arqkey.adversary import CompromisedKey, eve_attempt_reconstruction, eve_view
from arqkey.channel import ChannelParams, GilbertElliott, QualityModel, arrival_trace, write_records
from arqkey.errors import ArqKeyError, Unreachable
from arqkey.pipeline import run_session, write_log
from arqkey.protocol import alice_generate_burst, new_session_id
from arqkey.regularize import regularize_and_classify
from arqkey.security import (
    ChannelRates,
    compromise_probability,
    min_packets_for_sec,
    sec_curve,
    security_level,
    write_curve_csv,
)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

CHANNEL_FLAGS = {
    "cb": "c_b",
    "ce": "c_e",
    "arq_rtt": "arq_rtt",
    "max_retx": "max_retransmissions",
    "jitter": "jitter_sd",
    "skew_ppm": "skew_ppm",
    "latency": "base_latency",
    "gap": "send_gap",
}


class UsageError(Exception):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except ValueError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = secrets.randbits(32)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _dump(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


# -- sec ------------------------------------------------------------------


def cmd_sec(args) -> int:
    if args.cb is None:
        raise UsageError("--cb is required")
    if args.curve:
        n = args.n if args.n is not None else harness.REFERENCE_N
        path = write_curve_csv(sec_curve(n, args.cb), args.curve)
        print(f"wrote {path}")
        return EXIT_OK
    if args.ce is None:
        raise UsageError("--ce is required unless --curve is given")
    rates = ChannelRates(args.cb, args.ce)
    if args.n is None and args.target is None:
        raise UsageError("give --n and/or --target")
    if args.n is not None:
        sec = security_level(args.n, rates)
        print(f"N={args.n} c_b={args.cb} c_e={args.ce}")
        print(f"P={compromise_probability(args.n, rates):.6e}")
        print(f"SEC={sec:.4f} bits" if math.isfinite(sec) else "SEC=inf bits")
    if args.target is not None:
        try:
            print(f"min N for {args.target} bits: {min_packets_for_sec(args.target, rates)}")
        except Unreachable as exc:
            print(f"unreachable: {exc}", file=sys.stderr)
            return EXIT_FAILURE
    return EXIT_OK


def cmd_reference(args) -> int:
    path = harness.reproduce_reference_curve(args.out, n=args.n, c_b=args.cb)
    print(f"wrote {path}")
    return EXIT_OK


# -- simulate -----------------------------------------------------------


def _channel_from(args, config: dict) -> ChannelParams:
    fields = dict(config.get("channel", {}))
    if isinstance(fields.get("quality"), dict):
        fields["quality"] = QualityModel(**fields["quality"])
    if isinstance(fields.get("burst"), dict):
        fields["burst"] = GilbertElliott(**fields["burst"])
    for flag, name in CHANNEL_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            fields[name] = value
    try:
        return ChannelParams(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad channel parameters: {exc}") from exc


def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    params = _channel_from(args, config)
    n = args.n if args.n is not None else int(config.get("n", 1000))
    if args.seed is None and "seed" in config:
        args.seed = int(config["seed"])
    seed = _seed(args)
    classification = args.classification or config.get("classification", "timing")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    effective = {"n": n, "seed": seed, "classification": classification, "channel": asdict(params)}
    _dump(out / "config.json", effective)

    tr = run_session(n, params, seed, classification)
    write_records(tr.outcomes, out / "trace.csv")
    trace = arrival_trace(tr.outcomes)
    if len(trace) >= 2:
        (out / "fit.json").write_text(regularize_and_classify(trace, params.arq_rtt).to_json() + "\n")
    counts = tr.classification_counts()
    summary = {
        "session_id": tr.session_id,
        "aborted": tr.aborted,
        "abort_reason": tr.abort_reason,
        "agreement": tr.agreed,
        "selected": len(tr.selected),
        "classification": counts,
        "classification_accuracy": counts["correct"] / counts["delivered"] if counts["delivered"] else None,
        "closed_form_sec_bits": security_level(n, ChannelRates(params.c_b, params.c_e)),
    }
    if not tr.aborted:
        (out / "announcement.json").write_text(tr.announcement.to_json() + "\n")
        _dump(out / "keys.json", {"alice": tr.alice_key.hex(), "bob": tr.bob_key.hex(), "fingerprint": tr.bob_key.fingerprint})
        result = eve_attempt_reconstruction(eve_view(tr.packets, tr.outcomes, tr.announcement))
        compromised = isinstance(result, CompromisedKey)
        eve = {"compromised": compromised, "missing": [] if compromised else sorted(result.indices)}
        _dump(out / "eve.json", eve)
        summary["compromise"] = compromised
    _dump(out / "summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if not tr.aborted else EXIT_FAILURE


# -- grid ------------------------------------------------------------------


def cmd_grid(args) -> int:
    if args.config is None:
        config = dict(harness.DEFAULT_GRID)
    else:
        config = _load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.sessions is not None:
        config["sessions_per_cell"] = args.sessions
    report = harness.timed_grid(config, args.out, workers=args.workers)
    print(harness.summary_text(report), end="")
    failed = report["totals"]["mismatches"] > 0 or not report.get("oracle_equivalence", {"pass": True})["pass"]
    return EXIT_FAILURE if failed else EXIT_OK


# -- live transport -----------------------------------------------------------


def cmd_serve(args) -> int:
    udp = transport.bind_udp(args.host, args.udp_port)
    listener = socket.create_server((args.host, args.tcp_port))
    print(f"listening udp={udp.getsockname()[1]} tcp={listener.getsockname()[1]}", flush=True)
    with udp, listener:
        result = transport.serve_once(udp, listener, args.arq_rtt, timeout=args.timeout)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_log(transport.raw_to_records(result.raw), out / "raw.jsonl")
        (out / "announcement.json").write_text(result.announcement.to_json() + "\n")
    print(f"selected={len(result.announcement.selected_indices)} fingerprint={result.key.fingerprint}")
    return EXIT_OK


def cmd_send(args) -> int:
    session_id = args.session_id if args.session_id is not None else new_session_id()
    seed = args.seed
    packets = alice_generate_burst(args.n, session_id, seed=seed)
    with transport.connect_control(args.host, args.tcp_port, timeout=args.timeout) as control:
        result = transport.run_alice(packets, (args.host, args.udp_port), control, args.gap)
    print(
        f"selected={len(result.announcement.selected_indices)} slipped={len(result.send_report.slipped)} "
        f"fingerprint={result.key.fingerprint}"
    )
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arqkey", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sec", help="closed-form security level / packet count")
    p.add_argument("--n", type=int)
    p.add_argument("--cb", type=float)
    p.add_argument("--ce", type=float)
    p.add_argument("--target", type=float, help="target security level in bits")
    p.add_argument("--curve", metavar="CSV", help="write SEC over c_e in [0,1] for --n/--cb")
    p.set_defaults(func=cmd_sec)

    p = sub.add_parser("reference", help="write the N=617, c_b=0.9 security curve")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=harness.REFERENCE_N)
    p.add_argument("--cb", type=float, default=harness.REFERENCE_CB)
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("simulate", help="one simulated session end to end")
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--classification", choices=["timing", "oracle"])
    p.add_argument("--cb", type=float)
    p.add_argument("--ce", type=float)
    p.add_argument("--arq-rtt", dest="arq_rtt", type=float)
    p.add_argument("--max-retx", dest="max_retx", type=int)
    p.add_argument("--jitter", type=float, help="jitter std. dev. in seconds")
    p.add_argument("--skew-ppm", dest="skew_ppm", type=float)
    p.add_argument("--latency", type=float)
    p.add_argument("--gap", type=float, help="send interval in seconds")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("grid", help="end-to-end experiment grid")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("serve", help="Bob: receive a live burst")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--udp-port", dest="udp_port", type=int, default=47001)
    p.add_argument("--tcp-port", dest="tcp_port", type=int, default=47002)
    p.add_argument("--arq-rtt", dest="arq_rtt", type=float, default=0.008)
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("send", help="Alice: send a live burst")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--udp-port", dest="udp_port", type=int, default=47001)
    p.add_argument("--tcp-port", dest="tcp_port", type=int, default=47002)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--gap", type=float, default=0.002)
    p.add_argument("--seed", type=int)
    p.add_argument("--session-id", dest="session_id", type=int)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_send)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"arqkey: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArqKeyError, ValueError) as exc:
        print(f"arqkey: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
