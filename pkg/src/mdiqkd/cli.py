"""Command-line scenario runner.

Subcommands::

    mdiqkd run --scenario S.json [--out R.json] [--trace T.csv] [--threads N] [--seed N]
    mdiqkd dump-tables --kind SixState-24 [--theta 0.5] [--coding FlipParityPerCell] [--out T.csv]
    mdiqkd discriminate --problem P.json [--out R.json]

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import adversary as adv
from .common import ConfigError
from .decoy import ChannelModel, Intensity, IntensitySchedule
from .discrimination import (
    DiscriminationProblem,
    UsdInfeasible,
    helstrom,
    min_error,
    unambiguous_discrimination,
)
from .opsets import CodingScheme, CodingMode, build_catalog, default_coding, table_rows
from .protocol import ProtocolConfig, run_session
from .qmath import A_STATE, B_STATE, MINUS, ONE, PLUS, ZERO, PureState

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

_NAMED_STATES = {"0": ZERO, "1": ONE, "+": PLUS, "-": MINUS, "a": A_STATE, "b": B_STATE}

# key -> required?  Nested dicts describe sub-blocks.
_SCHEMA = {
    "protocol": {
        "kind": True,
        "rounds": True,
        "seed": True,
        "theta": False,
        "coding": False,
        "error_sample_fraction": False,
        "basis_chooser": False,
        "delegate_measurement": False,
        "session_id": False,
        "alice_bases": False,
        "pnp": {"enabled": False, "bases": False, "gate_fidelity": False, "control_policy": False},
    },
    "channel": {"transmittance": False, "dark_count": False, "depolarizing": False},
    "measurement_link": {"transmittance": False, "dark_count": False, "depolarizing": False},
    "attack": {"type": True, "basis_policy": False, "probes": False, "method": False,
               "block_single": False, "mode": False, "constant": False},
    "decoy": {"alice": False, "bob": False, "ratio": False},
    "output": {"report": False, "trace": False},
}
_REQUIRED_BLOCKS = {"protocol"}


def _check_keys(doc: dict, schema: dict, path: str = "") -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or '<root>'}: expected a table/object")
    for key in doc:
        if key not in schema:
            raise ConfigError(f"{path}{key}: unknown key")
    for key, rule in schema.items():
        where = f"{path}{key}"
        if key not in doc:
            if rule is True or (not path and key in _REQUIRED_BLOCKS):
                raise ConfigError(f"{where}: missing required key")
            continue
        if isinstance(rule, dict):
            _check_keys(doc[key], rule, where + ".")


def load_scenario(path: str | Path) -> dict:
    """Parse a JSON or TOML scenario and validate its keys."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario: {exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            doc = tomllib.loads(text)
        else:
            doc = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse scenario: {exc}") from exc
    _check_keys(doc, _SCHEMA)
    return doc


def parse_state(value) -> PureState:
    """A named state ('0', '1', '+', '-', 'a', 'b') or an amplitude list.

    Amplitudes are real numbers or [re, im] pairs.
    """
    if isinstance(value, str):
        if value not in _NAMED_STATES:
            raise ConfigError(f"unknown state name {value!r}")
        return _NAMED_STATES[value]
    try:
        amps = [complex(a[0], a[1]) if isinstance(a, (list, tuple)) else complex(a) for a in value]
        return PureState(np.array(amps), normalize=True)
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"bad state {value!r}: {exc}") from exc


def _schedule(rows) -> IntensitySchedule:
    return IntensitySchedule(tuple(Intensity(r["label"], float(r["mu"]), float(r["prob"])) for r in rows))


def _attack(block: dict | None):
    if block is None:
        return None
    kind = block["type"]
    params = {k: v for k, v in block.items() if k != "type"}
    allowed = {
        "none": set(),
        "intercept_resend": {"basis_policy"},
        "pna": {"probes", "method"},
        "pns": {"block_single"},
        "cheat": {"mode", "constant"},
    }
    if kind not in allowed:
        raise ConfigError(f"attack.type: unknown attack {kind!r}")
    extra = set(params) - allowed[kind]
    if extra:
        raise ConfigError(f"attack.{sorted(extra)[0]}: not a parameter of {kind}")
    if kind == "none":
        return None
    if kind == "intercept_resend":
        return adv.InterceptResend(**params)
    if kind == "pna":
        if "probes" in params:
            params["probes"] = tuple(parse_state(p) for p in params["probes"])
        return adv.PnaAttack(**params)
    if kind == "pns":
        return adv.PnsAttack(**params)
    return adv.MeasurementCheat(**params)


def build_config(doc: dict, seed: int | None = None, threads: int = 1, trace: bool = False) -> ProtocolConfig:
    """Turn a validated scenario document into a ProtocolConfig."""
    p = doc["protocol"]
    pnp = p.get("pnp", {})
    decoy = doc.get("decoy", {})
    try:
        return ProtocolConfig(
            kind=p["kind"],
            rounds=int(p["rounds"]),
            seed=int(p["seed"] if seed is None else seed),
            theta=p.get("theta"),
            coding=p.get("coding"),
            error_sample_fraction=float(p.get("error_sample_fraction", 0.1)),
            basis_chooser=p.get("basis_chooser"),
            delegate_measurement=bool(p.get("delegate_measurement", True)),
            session_id=int(p.get("session_id", 0)),
            alice_bases=tuple(p["alice_bases"]) if "alice_bases" in p else None,
            pnp_enabled=bool(pnp.get("enabled", False)),
            pnp_bases=tuple(pnp["bases"]) if "bases" in pnp else None,
            gate_fidelity=float(pnp.get("gate_fidelity", 1.0)),
            control_policy=pnp.get("control_policy", "random"),
            channel=ChannelModel(**doc.get("channel", {})),
            measurement_link=ChannelModel(**doc.get("measurement_link", {})),
            attack=_attack(doc.get("attack")),
            alice_schedule=_schedule(decoy["alice"]) if "alice" in decoy else None,
            bob_schedule=_schedule(decoy["bob"]) if "bob" in decoy else None,
            decoy_ratio=float(decoy.get("ratio", 0.5)),
            threads=threads,
            trace=trace,
        )
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_text(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return buf.getvalue()


def cmd_run(args) -> int:
    doc = load_scenario(args.scenario)
    if args.seed is not None:
        doc["protocol"]["seed"] = args.seed
    out = doc.get("output", {})
    trace_path = args.trace or out.get("trace")
    report_path = args.out or out.get("report")
    config = build_config(doc, threads=args.threads, trace=trace_path is not None)
    start = time.perf_counter()
    report = run_session(config)
    elapsed = time.perf_counter() - start
    payload = {
        "tool": "mdiqkd",
        "version": __version__,
        "scenario": doc,
        "report": report.as_dict(),
        "wall_clock_seconds": elapsed,
    }
    _write_text(report_path, _dump_json(payload))
    if trace_path is not None:
        Path(trace_path).write_text(_rows_to_csv(report.trace_rows()))
    return EXIT_OK


def cmd_dump_tables(args) -> int:
    try:
        catalog = build_catalog(args.kind, args.theta)
        scheme = default_coding(catalog) if args.coding is None else (
            CodingScheme.fixed(catalog) if CodingMode(args.coding) is CodingMode.FIXED_PER_OPERATOR
            else CodingScheme.flip_parity()
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write_text(args.out, _rows_to_csv(table_rows(catalog, scheme)))
    return EXIT_OK


def discriminate_problem(doc: dict) -> dict:
    """Min-error and unambiguous discrimination results for a problem document."""
    unknown = set(doc) - {"states", "priors"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
    if "states" not in doc:
        raise ConfigError("states: missing required key")
    states = [parse_state(s) for s in doc["states"]]
    try:
        problem = DiscriminationProblem(states, doc.get("priors"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    me = min_error(problem)
    result = {
        "min_error": {
            "success": me.success,
            "upper_bound": me.upper_bound,
            "certificate_residual": me.residual,
            "converged": me.converged,
            "iterations": me.iterations,
        },
    }
    if len(states) == 2:
        result["helstrom"] = helstrom(states[0], states[1], problem.priors[0])
    try:
        usd = unambiguous_discrimination(problem)
        recip = usd.reciprocal
        psi = problem.matrix()
        result["unambiguous"] = {
            "feasible": True,
            "conclusive": list(usd.conclusive),
            "rate": usd.rate,
            "biorthogonality_residual": float(np.abs(recip.conj().T @ psi - np.eye(len(states))).max()),
        }
    except UsdInfeasible as exc:
        result["unambiguous"] = {"feasible": False, "reason": str(exc)}
    return result


def cmd_discriminate(args) -> int:
    try:
        doc = json.loads(Path(args.problem).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read problem: {exc}") from exc
    _write_text(args.out, _dump_json(discriminate_problem(doc)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdiqkd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario and write a JSON report")
    run.add_argument("--scenario", required=True)
    run.add_argument("--out")
    run.add_argument("--trace")
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--seed", type=int)
    run.set_defaults(func=cmd_run)

    tables = sub.add_parser("dump-tables", help="write keep/discard and coding tables as CSV")
    tables.add_argument("--kind", required=True)
    tables.add_argument("--theta", type=float)
    tables.add_argument("--coding")
    tables.add_argument("--out")
    tables.set_defaults(func=cmd_dump_tables)

    disc = sub.add_parser("discriminate", help="solve a state discrimination problem")
    disc.add_argument("--problem", required=True)
    disc.add_argument("--out")
    disc.set_defaults(func=cmd_discriminate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
