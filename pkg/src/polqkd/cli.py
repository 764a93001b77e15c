"""Command-line front end.

Exit codes: 0 success, 1 a scramble run left an event unrecovered,
2 invalid input (bad config, malformed tally file, unusable tallies).
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import DomainError
from .scenarios import emit, read_config, run_scenario, scenario_from_dict, scenario_to_dict

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_INVALID = 2

_COMMANDS = {
    "povm": "povm-table",
    "stability": "stability",
    "scramble": "scramble",
    "sweep": "sweep",
    "keyrate": "keyrate",
}


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on its own; raise instead so main() owns exit codes
    def error(self, message):
        raise _ArgumentError(f"{self.prog}: error: {message}")


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _distances(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad distance list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="polqkd", description="Chip-based polarization QKD decoder simulations.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "povm": "port-probability table of the decoder",
        "stability": "unattended QBER time series",
        "scramble": "scrambled link with closed-loop compensation",
        "sweep": "finite-key rate versus distance",
        "keyrate": "finite-key analysis of a tally file",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="scenario JSON file (kind must match the command)")
        p.add_argument("--seed", type=_seed, help="unsigned 64-bit seed")
        p.add_argument("--mode", choices=("expect", "mc"), help="expectation values or Monte Carlo counts")
        p.add_argument("--out", help="output directory")
        p.add_argument("--preset", help="field-run preset: 25km, 50km, 75km, 100km (or 'reference' for sweeps)")
        p.add_argument("--print-config", action="store_true", help="print the resolved scenario and exit")
        if name == "sweep":
            p.add_argument("--distances", type=_distances, help="comma-separated km, e.g. 25,50,75,100")
        if name == "keyrate":
            p.add_argument("--tally", required=True, help="CSV with basis,intensity,n,m,duration_s")
    return parser


def _resolve(args) -> dict:
    """Raw config JSON with the command-line overrides laid on top."""
    kind = _COMMANDS[args.command]
    data: dict = {}
    if args.config:
        data = read_config(args.config)
        if data.get("kind", kind) != kind:
            raise DomainError(f"config is a {data['kind']!r} scenario, not {kind!r}")
    data["kind"] = kind
    overrides = {
        "seed": args.seed,
        "mode": args.mode,
        "output_dir": args.out,
        "preset": args.preset,
        "distances": getattr(args, "distances", None),
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    return data


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        scenario = scenario_from_dict(_resolve(args))
        if args.print_config:
            print(json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True))
            return EXIT_OK
        result = run_scenario(scenario, getattr(args, "tally", None))
        paths = emit(result, scenario)
    except (DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for path in paths:
        print(path)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
