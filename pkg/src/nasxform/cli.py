"""Command-line entry point: ``nasxform {dump,transform,verify,fisher,search}``.

Every run prints its report followed by ``RESULT ok 0`` or ``RESULT fail <code>``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import CapExceeded, ConfigError, InvalidSpec, NasXformError, ParseError, TransformError
from .interp import count_macs, realizes
from .ir import ConvSpec, LoopNest, conv_nest
from .legality import check_semantic_legality
from .nnet import fisher_potential, load_network_config, network_config_from_dict, toy_network_config
from .search import run_search, search_config_from_dict
from .transforms import NEURAL, SEMANTIC, parse_sequence

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_TRANSFORM = 4
EXIT_LEGALITY = 5
EXIT_IO = 6


class CommandFailed(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        print(f"RESULT fail {EXIT_USAGE}")
        sys.exit(EXIT_USAGE)


def _read_json(path: str) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise CommandFailed(EXIT_IO, f"cannot read {p}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CommandFailed(EXIT_CONFIG, f"{p}: invalid JSON: {exc}") from exc


def load_spec(path: str) -> ConvSpec:
    """A convolution file: ``{"schema_version": 1, "spec": {ConvSpec fields}}``
    (the fields may also sit at the top level)."""
    d = _read_json(path)
    if not isinstance(d, dict) or d.get("schema_version") != 1:
        raise ConfigError(f"{path}: schema_version must be 1")
    fields = d.get("spec", {k: v for k, v in d.items() if k != "schema_version"})
    try:
        return ConvSpec.from_dict(fields)
    except (InvalidSpec, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _write(path: Optional[str], text: str) -> None:
    if path is None:
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise CommandFailed(EXIT_IO, f"cannot write {path}: {exc.strerror or exc}") from exc


def _apply_steps(nest: LoopNest, dsl: str) -> list[tuple[str, str, LoopNest]]:
    """``(step, class, nest after step)`` for every step of ``dsl``."""
    seq = parse_sequence(dsl)
    out = []
    for idx, step in enumerate(seq.steps):
        try:
            nest = step.apply(nest)
        except (TransformError, InvalidSpec) as exc:
            raise CommandFailed(EXIT_TRANSFORM, f"step {idx} `{step}`: {type(exc).__name__}: {exc}") from exc
        out.append((str(step), step.cls, nest))
    return out


def _macs_line(before: int, after: int) -> str:
    return f"macs {before} -> {after} (x{after / before:.4f})" if before else f"macs {before} -> {after}"


def cmd_dump(args) -> list[str]:
    nest = conv_nest(load_spec(args.config))
    _write(args.out, nest.serialize() + "\n")
    return [nest.serialize(), f"macs {count_macs(nest)}"]


def cmd_transform(args) -> list[str]:
    spec = load_spec(args.config)
    nest = conv_nest(spec)
    steps = _apply_steps(nest, args.sequence or "")
    final = steps[-1][2] if steps else nest
    _write(args.out, final.serialize() + "\n")
    lines = [final.serialize()]
    if final.provenance is not None and final.provenance != spec:
        lines.append(f"derived {final.provenance.describe()}")
    lines.append(_macs_line(count_macs(nest), count_macs(final)))
    return lines


def cmd_verify(args) -> list[str]:
    spec = load_spec(args.config)
    nest = conv_nest(spec)
    steps = _apply_steps(nest, args.sequence or "")
    final = steps[-1][2] if steps else nest
    lines, failed = [], False
    # maximal runs of semantic steps, each checked against the nest it started from
    before, run = nest, []
    for step, cls, after in steps + [("", NEURAL, None)]:
        if cls == SEMANTIC:
            run.append((step, after))
            continue
        if run:
            try:
                res = check_semantic_legality(before, run[-1][1], args.caps)
            except CapExceeded as exc:
                raise CommandFailed(EXIT_LEGALITY, f"{exc}; shrink H, W or the channel counts, "
                                                   f"or raise --caps") from exc
            text = " | ".join(s for s, _ in run)
            lines.append(f"semantic [{text}]: {res.verdict}"
                         + (f" ({res.reason})" if res.reason else f" ({res.instances} instances)"))
            failed |= not res.legal
            run = []
        if step:
            lines.append(f"neural [{step}]: semantic check not-applicable")
            before = after
    neural = any(cls == NEURAL for _, cls, _ in steps)
    if neural:
        lines.append("oracle: not equivalent to the original by construction (neural rewrite)")
        derived = final.provenance
        if derived is None:
            lines.append("derived: no convolution descriptor matches the rewritten nest")
        else:
            ok = realizes(final, derived, args.seed)
            lines.append(f"derived {derived.describe()}: {'oracle-equal' if ok else 'oracle-differs'}")
            failed |= not ok
    else:
        ok = realizes(final, spec, args.seed)
        lines.append(f"oracle: {'equal' if ok else 'differs'}")
        failed |= not ok
    lines.append(_macs_line(count_macs(nest), count_macs(final)))
    if failed:
        raise CommandFailed(EXIT_LEGALITY, "\n".join(lines))
    return lines


def _network_config(args):
    if args.config is None:
        return toy_network_config()
    try:
        return load_network_config(args.config)
    except OSError as exc:
        raise CommandFailed(EXIT_IO, f"cannot read {args.config}: {exc.strerror or exc}") from exc


def cmd_fisher(args) -> list[str]:
    cfg = _network_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    report = fisher_potential(cfg.build(seed), cfg.batch(seed))
    _write(args.out, json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    return [report.format()]


def cmd_search(args) -> list[str]:
    if args.config is None:
        d = {"schema_version": 1}
    else:
        d = _read_json(args.config)
        if not isinstance(d, dict) or d.get("schema_version") != 1:
            raise ConfigError(f"{args.config}: schema_version must be 1")
    unknown = set(d) - {"schema_version", "search", "network"}
    if unknown:
        raise ConfigError(f"unknown search file fields: {sorted(unknown)}")
    sdict = {"schema_version": 1, **d.get("search", {})}
    if args.seed is not None:
        sdict["seed"] = args.seed
    if args.caps is not None:
        sdict["cap"] = args.caps
    cfg = search_config_from_dict(sdict)
    if "network" in d:
        net = network_config_from_dict({"schema_version": 1, **d["network"]})
    else:
        net = toy_network_config()
    try:
        report = run_search(cfg, net, args.out, jobs=args.jobs)
    except OSError as exc:
        raise CommandFailed(EXIT_IO, str(exc)) from exc
    lines = [report.summary()]
    if args.out:
        lines.append(f"report {args.out}  csv {Path(args.out).with_suffix('.csv')}")
    return lines


COMMANDS = {
    "dump": (cmd_dump, "print the loop nest of a convolution file"),
    "transform": (cmd_transform, "apply a transformation sequence and print the rewritten nest"),
    "verify": (cmd_verify, "check dependence preservation and interpreter equivalence"),
    "fisher": (cmd_fisher, "Fisher Potential of a network config at initialisation"),
    "search": (cmd_search, "random transformation search with the Fisher rejection filter"),
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nasxform", description="Loop-nest transformations for convolutions.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", metavar="PATH", required=name in ("dump", "transform", "verify"),
                        help="convolution file (dump/transform/verify), network config (fisher) "
                             "or search file (search)")
        sp.add_argument("--seed", type=int, metavar="U64", help="seed override")
        sp.add_argument("--out", metavar="PATH", help="write the result to PATH")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("transform", "verify"):
            sp.add_argument("--sequence", metavar="DSL", default="", help="e.g. 'tile(h,4) | group(co,ci,2)'")
        if name in ("verify", "search"):
            sp.add_argument("--caps", type=int, metavar="INSTANCES", help="statement-instance cap")
        if name == "search":
            sp.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None and args.seed < 0:
        build_parser().error("--seed must be non-negative")
    if getattr(args, "jobs", 1) < 1:
        build_parser().error("--jobs must be at least 1")
    if args.command in ("dump", "transform", "verify") and args.seed is None:
        args.seed = 0
    fn = COMMANDS[args.command][0]
    try:
        lines = fn(args)
        code = EXIT_OK
    except CommandFailed as exc:
        lines, code = [str(exc)], exc.code
    except ConfigError as exc:
        lines, code = [f"config error: {exc}"], EXIT_CONFIG
    except (TransformError, ParseError) as exc:
        lines, code = [f"transform error: {type(exc).__name__}: {exc}"], EXIT_TRANSFORM
    except CapExceeded as exc:
        lines, code = [f"{exc}; shrink the problem or raise --caps"], EXIT_LEGALITY
    except OSError as exc:
        lines, code = [f"io error: {exc}"], EXIT_IO
    except NasXformError as exc:
        lines, code = [f"error: {type(exc).__name__}: {exc}"], EXIT_CONFIG
    for line in lines:
        print(line)
    print(f"RESULT {'ok' if code == EXIT_OK else 'fail'} {code}")
    return code


if __name__ == "__main__":
    sys.exit(main())
