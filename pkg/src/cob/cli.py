"""Command line entry point: ``cob simulate | check-params | figures | verify-certificate | replay``.

Exit codes: 0 success, 1 safety violation or invalid certificate, 2 bad
parameters, 3 unreadable or undecodable input.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import struct
import sys
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import analysis
from .cob_node import verify_certificate
from .gossip_sim import RunMetrics, SimConfig, collect_statistics, replay, run
from .protocol_types import DecodeError, _Reader, decode_certificate, encode_certificate
from .sortition import (
    Crypto,
    InvalidParameter,
    NoFeasibleCommittee,
    SimulatedSignatures,
    SortitionParams,
    as_fraction,
    check_assumptions,
    concat,
    make_hasher,
    min_committee_size,
)

EXIT_OK, EXIT_SAFETY, EXIT_PARAM, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("cob")


class ParameterError(ValueError):
    pass


# --- experiment setup ---------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    config: SimConfig
    repetitions: int = 1
    out: Optional[Path] = None
    traces: bool = False
    certificates: bool = False

    def __post_init__(self):
        if self.repetitions < 1:
            raise ParameterError("repetitions must be >= 1")


def run_seed(master: int, index: int) -> int:
    digest = hashlib.sha256(concat(b"cob-run", master & 0xFFFFFFFFFFFFFFFF, index)).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def worker_count(requested: Optional[int] = None) -> int:
    env = os.environ.get("COB_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ParameterError(f"COB_WORKERS must be an integer, got {env!r}") from None
    if requested:
        return max(1, requested)
    return max(1, os.cpu_count() or 1)


# --- certificate bundles -----------------------------------------------------------------

BUNDLE_MAGIC = b"CobB\x01"


def export_certificate(cert, sortition: SortitionParams, crypto) -> bytes:
    """Certificate plus everything a fresh process needs to check it.

    Layout: magic, u32 body length, body, SHA-256 of everything before it.
    The body holds the public parameters as JSON, the signer registry entries
    (signatures are simulated, so verifying needs them) and the encoded
    certificate.
    """
    params = {
        "N": sortition.N,
        "n": sortition.n,
        "r": sortition.r.hex(),
        "hasher": crypto.hasher.describe(),
    }
    pks = sorted({e.player for e in cert.prev_step_sigs + cert.this_step_sigs})
    entries = crypto.scheme.registry_entries(pks)
    body = bytearray()
    blob = json.dumps(params, sort_keys=True, separators=(",", ":")).encode()
    body += struct.pack(">I", len(blob)) + blob
    body += struct.pack(">I", len(entries))
    for pk in sorted(entries):
        for part in (pk, entries[pk]):
            body += struct.pack(">I", len(part)) + part
    enc = encode_certificate(cert)
    body += struct.pack(">I", len(enc)) + enc
    head = BUNDLE_MAGIC + struct.pack(">I", len(body)) + bytes(body)
    return head + hashlib.sha256(head).digest()


def verify_bundle(data: bytes) -> bool:
    """True iff the bundle is intact and its certificate verifies.

    Raises DecodeError when the framing is wrong (bad magic, truncated, padded).
    """
    k = len(BUNDLE_MAGIC)
    if not data.startswith(BUNDLE_MAGIC) or len(data) < k + 4 + 32:
        raise DecodeError("not a certificate bundle")
    (size,) = struct.unpack(">I", data[k:k + 4])
    if len(data) != k + 4 + size + 32:
        raise DecodeError("bundle length does not match its header")
    head, digest = data[:-32], data[-32:]
    if hashlib.sha256(head).digest() != digest:
        return False
    r = _Reader(head[k + 4:])
    try:
        params = json.loads(r.blob().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"bad parameter block: {exc}") from None
    count = r.u32()
    entries = [(r.blob(), r.blob()) for _ in range(count)]
    cert = decode_certificate(r.blob())
    r.done()
    try:
        hasher = make_hasher(params["hasher"])
        sortition = SortitionParams(int(params["N"]), int(params["n"]), bytes.fromhex(params["r"]))
    except (KeyError, TypeError, ValueError):
        return False
    scheme = SimulatedSignatures(hasher)
    for pk, sk in entries:
        if scheme.register(sk) != pk:
            return False
    return verify_certificate(cert, sortition, Crypto(hasher, scheme))


# --- commands ------------------------------------------------------------------------


def _one_run(args):
    config, index, out, traces, certificates = args
    result = run(config)
    if out is not None and traces and result.trace is not None:
        (out / "traces").mkdir(parents=True, exist_ok=True)
        (out / "traces" / f"run_{index:05d}.trace").write_bytes(result.trace)
    if out is not None and certificates:
        honest = [st for i, st in sorted(result.states.items()) if st.certificate is not None and i not in result.malicious]
        if honest:
            (out / "certificates").mkdir(parents=True, exist_ok=True)
            bundle = export_certificate(honest[0].certificate, result.sortition, result.crypto)
            (out / "certificates" / f"run_{index:05d}.cert").write_bytes(bundle)
    return result.metrics


CSV_FIELDS = (
    "seed", "N", "n", "m", "h", "strategy", "scenario", "ell", "T", "halt_max", "all_halted", "timeout",
    "last_broadcast_step", "cgf_loops", "bytes_total", "bytes_honest", "assumption_clean", "safety_flagged",
)


def run_batch(configs: Sequence[SimConfig], workers: int = 1) -> List[RunMetrics]:
    """Metrics of one run per config, in order; parallel when workers > 1."""
    jobs = [(cfg, i, None, False, False) for i, cfg in enumerate(configs)]
    return _map(jobs, workers)


def _map(jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with Pool(min(workers, len(jobs))) as pool:
            return pool.map(_one_run, jobs, chunksize=max(1, len(jobs) // (4 * workers)))
    return [_one_run(j) for j in jobs]


def simulate(spec: ExperimentSpec, workers: int = 1) -> List[RunMetrics]:
    base = spec.config
    jobs = [
        (replace(base, seed=run_seed(base.seed, i), record_trace=spec.traces), i, spec.out, spec.traces, spec.certificates)
        for i in range(spec.repetitions)
    ]
    if spec.out is not None:
        spec.out.mkdir(parents=True, exist_ok=True)
    metrics = _map(jobs, workers)
    if spec.out is not None:
        write_reports(spec.out, metrics)
    return metrics


def write_reports(out: Path, metrics: Sequence[RunMetrics]):
    rows = [m.to_dict() for m in metrics]
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for row in rows:
            w.writerow([row[k] for k in CSV_FIELDS])
    (out / "metrics.json").write_text(json.dumps(rows, sort_keys=True, indent=1) + "\n")
    (out / "aggregate.json").write_text(json.dumps(collect_statistics(metrics).to_dict(), sort_keys=True, indent=1) + "\n")


def _premise(h) -> Fraction:
    hh = as_fraction(h)
    if not Fraction(2, 3) < hh <= 1:
        raise ParameterError(f"honest ratio must satisfy 2/3 < h <= 1, got {h}")
    return hh


def build_config(args) -> SimConfig:
    values: Dict = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text()))
        except OSError as exc:
            raise IOError(str(exc)) from None
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config file is not valid JSON: {exc}") from None
    for name in ("N", "n", "h", "m", "seed", "adversary", "scenario", "max_steps", "delay_model", "epsilon", "Omega", "Lambda", "lam"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if args.adversary_param:
        params = dict(values.get("adversary_params", {}))
        for item in args.adversary_param:
            key, _, raw = item.partition("=")
            try:
                params[key] = json.loads(raw)
            except json.JSONDecodeError:
                params[key] = raw
        values["adversary_params"] = params
    if isinstance(values.get("adversary_params"), dict):
        values["adversary_params"] = tuple(sorted(values["adversary_params"].items()))
    for key in ("runs", "out"):
        values.pop(key, None)
    known = {f.name for f in fields(SimConfig)}
    unknown = set(values) - known
    if unknown:
        raise ParameterError(f"unknown configuration keys: {sorted(unknown)}")
    if "N" not in values:
        raise ParameterError("N is required")
    values.setdefault("h", 0.8)
    _premise(values["h"])
    if "n" not in values:
        values["n"] = min_committee_size(values["N"], values["h"], values.get("epsilon", 1e-4))
    try:
        return SimConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ParameterError(str(exc)) from None


def cmd_simulate(args) -> int:
    config = build_config(args)
    runs = args.runs
    if runs is None and args.config:
        runs = json.loads(Path(args.config).read_text()).get("runs")
    out = Path(args.out) if args.out else None
    spec = ExperimentSpec(config, runs or 1, out, args.trace, args.certificates)
    metrics = simulate(spec, worker_count(args.workers))
    agg = collect_statistics(metrics)
    print(json.dumps(agg.to_dict(), sort_keys=True))
    return EXIT_SAFETY if agg.flagged_runs else EXIT_OK


def cmd_check_params(args) -> int:
    _premise(args.h)
    n = args.n
    if n is None:
        try:
            n = min_committee_size(args.N, args.h, args.epsilon)
        except NoFeasibleCommittee as exc:
            print(json.dumps({"N": args.N, "h": args.h, "epsilon": args.epsilon, "satisfied": False, "error": str(exc)}))
            return EXIT_PARAM
    report = check_assumptions(args.N, args.h, n, args.epsilon)
    d = {
        "N": args.N, "h": args.h, "n": report.n, "t_H": report.t_H, "epsilon": report.epsilon,
        "p_cond1": report.p_cond1, "p_cond2": report.p_cond2, "satisfied": report.satisfied,
    }
    print(json.dumps(d, sort_keys=True))
    return EXIT_OK if report.satisfied else EXIT_PARAM


def cmd_figures(args) -> int:
    _premise(args.h)
    if args.ell_max < 1 or args.n < 1:
        raise ParameterError("ell_max and n must be >= 1")
    rows = analysis.figure_data(args.h, args.n, range(1, args.ell_max + 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "figures.csv").write_text(analysis.figure_csv(rows))
    (out / "figure_loglog.svg").write_text(analysis.figure_svg(rows, log=True))
    (out / "figure_linear.svg").write_text(analysis.figure_svg(rows, log=False))
    print(f"wrote {len(rows)} rows to {out / 'figures.csv'}")
    return EXIT_OK


def cmd_verify_certificate(args) -> int:
    data = Path(args.file).read_bytes()
    ok = verify_bundle(data)
    print("valid" if ok else "invalid")
    return EXIT_OK if ok else EXIT_SAFETY


def cmd_replay(args) -> int:
    snaps = replay(Path(args.trace).read_bytes())
    for i in sorted(snaps):
        print(i, hashlib.sha256(snaps[i]).hexdigest())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cob", description="Leaderless multidimensional Byzantine agreement: simulator and cost model")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a seeded batch of simulations")
    s.add_argument("--config", help="JSON file with SimConfig fields (flags override)")
    s.add_argument("--N", type=int)
    s.add_argument("--n", type=int, help="expected players per step (default: smallest safe size)")
    s.add_argument("--h", type=float)
    s.add_argument("--m", type=int)
    s.add_argument("--seed", type=int, help="master seed")
    s.add_argument("--adversary")
    s.add_argument("--adversary-param", action="append", metavar="KEY=VALUE")
    s.add_argument("--scenario")
    s.add_argument("--max-steps", dest="max_steps", type=int)
    s.add_argument("--delay-model", dest="delay_model", choices=("uniform", "graph"))
    s.add_argument("--epsilon", type=float)
    s.add_argument("--Omega", type=int)
    s.add_argument("--Lambda", type=int)
    s.add_argument("--lam", type=int)
    s.add_argument("--runs", type=int)
    s.add_argument("--out")
    s.add_argument("--trace", action="store_true", help="write one trace per run")
    s.add_argument("--certificates", action="store_true", help="export one certificate bundle per run")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("check-params", help="check committee-size assumptions")
    c.add_argument("--N", type=int, required=True)
    c.add_argument("--h", type=float, required=True)
    c.add_argument("--n", type=int)
    c.add_argument("--epsilon", type=float, default=1e-9)
    c.set_defaults(func=cmd_check_params)

    f = sub.add_parser("figures", help="regenerate the byte-cost comparison")
    f.add_argument("--h", type=float, default=0.8)
    f.add_argument("--n", type=int, default=4000)
    f.add_argument("--ell-max", dest="ell_max", type=int, default=1000)
    f.add_argument("--out", default="figures")
    f.set_defaults(func=cmd_figures)

    v = sub.add_parser("verify-certificate", help="check an exported certificate bundle")
    v.add_argument("file")
    v.set_defaults(func=cmd_verify_certificate)

    r = sub.add_parser("replay", help="re-execute a trace and print node state digests")
    r.add_argument("trace")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ParameterError, InvalidParameter, NoFeasibleCommittee) as exc:
        print(f"parameter error: {exc}", file=sys.stderr)
        return EXIT_PARAM
    except DecodeError as exc:
        print(f"decode error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
