"""Random transformation-sequence search with a Fisher Potential rejection filter.

Every candidate draws one sequence per layer from its own RNG stream
``(seed, index)``, so candidates can be evaluated in any order or in worker
processes and still produce the same report. Semantic runs inside a sequence
are checked for dependence preservation; the derived network is screened by
comparing its Fisher Potential with the original's. Survivors are ranked by
MAC count, then by higher Fisher Potential, then by their DSL text.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import CapExceeded, ConfigError, Exhausted, NasXformError
from .ir import DEFAULT_INSTANCE_CAP, ConvSpec, LoopNest, conv_nest
from .legality import check_semantic_legality
from .nnet import (
    Batch,
    FisherReport,
    Layer,
    Network,
    NetworkConfig,
    build_network,
    fisher_decision,
    fisher_potential,
)
from .transforms import NEURAL, SEMANTIC, TENSOR_ROLES, Transform, TransformSequence, parse_step

SCHEMA_VERSION = 1
SEMANTIC_KINDS = ("interchange", "strip_mine", "tile", "unroll", "fuse", "split")
NEURAL_KINDS = ("bottleneck", "group", "depthwise")
DEFAULT_KINDS = SEMANTIC_KINDS + NEURAL_KINDS

CONFIG_FIELDS = ("candidate_count", "max_length", "kinds", "bottleneck_factors", "group_factors",
                 "tile_factors", "unroll_factors", "modifiable", "seed", "cap", "layer_veto")


@dataclass(frozen=True)
class SearchConfig:
    candidate_count: int = 1000
    max_length: int = 6
    kinds: tuple[str, ...] = DEFAULT_KINDS
    bottleneck_factors: tuple[int, ...] = (2, 4)
    group_factors: tuple[int, ...] = (2, 4, 8)
    tile_factors: tuple[int, ...] = (2, 4)  # strip_mine and tile
    unroll_factors: tuple[int, ...] = (2, 4)
    modifiable: Optional[tuple[bool, ...]] = None  # per layer; None means every layer
    seed: int = 0
    cap: Optional[int] = DEFAULT_INSTANCE_CAP
    layer_veto: Optional[float] = None  # reject when a layer keeps less than this fraction

    def __post_init__(self):
        if self.candidate_count < 0:
            raise ConfigError("candidate_count must be non-negative")
        if self.max_length < 1:
            raise ConfigError("max_length must be at least 1")
        for k in self.kinds:
            if k not in DEFAULT_KINDS:
                raise ConfigError(f"unknown transformation kind {k!r} in kinds")
        for name in ("bottleneck_factors", "group_factors", "tile_factors", "unroll_factors"):
            vals = getattr(self, name)
            if any(not isinstance(v, int) or v < 2 for v in vals):
                raise ConfigError(f"{name} must hold integers >= 2")
        if self.layer_veto is not None and not 0 <= self.layer_veto <= 1:
            raise ConfigError("layer_veto must lie in [0, 1]")

    def is_modifiable(self, layer: int) -> bool:
        return self.modifiable is None or (layer < len(self.modifiable) and self.modifiable[layer])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kinds"] = list(self.kinds)
        for name in ("bottleneck_factors", "group_factors", "tile_factors", "unroll_factors"):
            d[name] = list(d[name])
        if self.modifiable is not None:
            d["modifiable"] = list(self.modifiable)
        return {"schema_version": SCHEMA_VERSION, **d}


def search_config_from_dict(d: dict) -> SearchConfig:
    if not isinstance(d, dict):
        raise ConfigError("search config must be a JSON object")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {d.get('schema_version')!r}")
    unknown = set(d) - set(CONFIG_FIELDS) - {"schema_version"}
    if unknown:
        raise ConfigError(f"unknown search config fields: {sorted(unknown)}")
    kw = {}
    for name in CONFIG_FIELDS:
        if name not in d:
            continue
        v = d[name]
        if name in ("candidate_count", "max_length", "seed"):
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"field {name!r} must be an integer")
        elif name == "cap":
            if v is not None and (not isinstance(v, int) or v < 1):
                raise ConfigError("field 'cap' must be a positive integer or null")
        elif name == "layer_veto":
            if v is not None and not isinstance(v, (int, float)):
                raise ConfigError("field 'layer_veto' must be a number or null")
        elif name == "modifiable":
            if v is not None:
                if not isinstance(v, list) or not all(isinstance(x, bool) for x in v):
                    raise ConfigError("field 'modifiable' must be a list of booleans or null")
                v = tuple(v)
        else:
            if not isinstance(v, list):
                raise ConfigError(f"field {name!r} must be a list")
            v = tuple(v)
        kw[name] = v
    return SearchConfig(**kw)


# --------------------------------------------------------------------------- #
# candidates

@dataclass(frozen=True)
class SemanticRun:
    """A maximal run of semantic steps inside one layer's sequence."""
    layer: int
    before: tuple[str, ...]  # steps applied before the run
    steps: tuple[str, ...]


@dataclass
class Candidate:
    index: int
    sequences: tuple[TransformSequence, ...]  # one per layer
    specs: tuple[ConvSpec, ...]  # derived layer descriptors
    origin_specs: tuple[ConvSpec, ...]  # chain-repaired inputs each sequence was drawn against
    runs: tuple[SemanticRun, ...] = ()
    verdicts: list[dict] = field(default_factory=list)
    fisher: Optional[FisherReport] = None
    status: str = "pending"  # pending | survivor | rejected
    rejected_by: Optional[str] = None  # semantic | fisher
    reason: str = ""

    @property
    def dsl(self) -> str:
        return " ; ".join(str(s) or "identity" for s in self.sequences)

    @property
    def has_neural(self) -> bool:
        return any(NEURAL in s.classes for s in self.sequences)

    @property
    def macs_per_layer(self) -> list[int]:
        return [s.macs for s in self.specs]

    @property
    def macs(self) -> int:
        return sum(self.macs_per_layer)

    def network(self, origin: Network) -> Network:
        layers = [Layer(s, l.relu) for s, l in zip(self.specs, origin.layers)]
        return build_network(layers, origin.num_classes, origin.seed)

    def row(self) -> dict:
        return {
            "index": self.index,
            "sequence": [str(s) or "identity" for s in self.sequences],
            "dsl": self.dsl,
            "status": self.status,
            "rejected_by": self.rejected_by,
            "reason": self.reason,
            "verdicts": self.verdicts,
            "macs": self.macs,
            "macs_per_layer": self.macs_per_layer,
            "fisher_per_layer": None if self.fisher is None else self.fisher.per_layer,
            "fisher_total": None if self.fisher is None else self.fisher.total,
        }


class _Applier:
    """Applies step prefixes to a layer's nest, memoised per process."""

    def __init__(self):
        self.cache: dict[tuple, Optional[LoopNest]] = {}

    def get(self, spec: ConvSpec, steps: tuple[str, ...]) -> Optional[LoopNest]:
        key = (spec, steps)
        if key in self.cache:
            return self.cache[key]
        if not steps:
            nest = conv_nest(spec)
        else:
            prev = self.get(spec, steps[:-1])
            nest = None if prev is None else _try_apply(prev, steps[-1])
        self.cache[key] = nest
        return nest


def _try_apply(nest: LoopNest, step: str) -> Optional[LoopNest]:
    t = parse_step(step)
    try:
        out = t.apply(nest)
    except (NasXformError, ValueError):
        return None
    if out.provenance is None:
        return None
    return out


def _options(nest: LoopNest, kind: str, cfg: SearchConfig) -> list[str]:
    parts: list[Optional[int]] = [None] if len(nest.bands) == 1 else list(range(len(nest.bands)))
    out = []
    for part in parts:
        band = nest.bands[0 if part is None else part]
        its = band.iterators
        names = [it.name for it in its]
        args: list[tuple] = []
        if kind == "interchange":
            args = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
        elif kind in ("strip_mine", "tile"):
            args = [(it.name, f) for it in its for f in cfg.tile_factors if f < it.trip]
        elif kind == "unroll":
            args = [(it.name, f) for it in its for f in cfg.unroll_factors if f <= it.trip]
        elif kind == "fuse":
            args = [(a, b) for a, b in zip(names, names[1:])]
        elif kind == "split":
            args = [(it.name, (it.trip // 2, it.trip - it.trip // 2)) for it in its if it.trip >= 2]
        elif kind == "bottleneck":
            args = [(it.name, b) for it in its if it.role in TENSOR_ROLES for b in cfg.bottleneck_factors]
        elif kind == "group":
            cos = [it.name for it in its if it.role == "co"]
            cis = [it.name for it in its if it.role == "ci"]
            args = [(a, b, g) for a in cos for b in cis for g in cfg.group_factors]
        elif kind == "depthwise":
            args = [()]
        out.extend(str(Transform(kind, a, part)) for a in args)
    return out


def _draw_step(rng: np.random.Generator, nest: LoopNest, spec: ConvSpec, prefix: tuple[str, ...],
               kinds: Sequence[str], cfg: SearchConfig, applier: _Applier) -> Optional[str]:
    """Uniform kind, then uniform valid parameters; invalid picks are re-drawn."""
    kinds = list(kinds)
    while kinds:
        kind = kinds.pop(int(rng.integers(len(kinds))))
        opts = _options(nest, kind, cfg)
        while opts:
            step = opts.pop(int(rng.integers(len(opts))))
            if applier.get(spec, prefix + (step,)) is not None:
                return step
    return None


def _semantic_runs(layer: int, steps: Sequence[str]) -> list[SemanticRun]:
    runs, start = [], None
    for i, s in enumerate(list(steps) + [None]):
        sem = s is not None and parse_step(s).cls == SEMANTIC
        if sem and start is None:
            start = i
        elif not sem and start is not None:
            runs.append(SemanticRun(layer, tuple(steps[:start]), tuple(steps[start:i])))
            start = None
    return runs


def draw_candidate(origin_specs: Sequence[ConvSpec], cfg: SearchConfig, index: int,
                   applier: Optional[_Applier] = None) -> Candidate:
    applier = applier or _Applier()
    rng = np.random.default_rng([cfg.seed, index])
    sequences, derived, drawn_against, runs = [], [], [], []
    for k, spec in enumerate(origin_specs):
        if derived:
            prev = derived[-1]
            spec = spec.replace(Ci=prev.Co_eff, H=prev.Ho_eff, W=prev.Wo_eff)
        drawn_against.append(spec)
        steps: tuple[str, ...] = ()
        if cfg.is_modifiable(k) and cfg.kinds:
            length = int(rng.integers(1, cfg.max_length + 1))
            for i in range(length):
                nest = applier.get(spec, steps)
                step = _draw_step(rng, nest, spec, steps, cfg.kinds, cfg, applier)
                if step is None:
                    if i == 0:
                        raise Exhausted(f"layer {k}: no valid transformation among {list(cfg.kinds)}")
                    break
                steps += (step,)
        final = applier.get(spec, steps)
        sequences.append(TransformSequence.parse(" | ".join(steps)))
        derived.append(final.provenance)
        runs.extend(_semantic_runs(k, steps))
    return Candidate(index, tuple(sequences), tuple(derived), tuple(drawn_against), tuple(runs))


def make_candidate(origin_specs: Sequence[ConvSpec], sequences: Sequence[str], index: int = 0,
                   applier: Optional[_Applier] = None) -> Candidate:
    """A candidate from explicit per-layer DSL sequences, chain-repaired like drawn ones."""
    if len(sequences) != len(origin_specs):
        raise ConfigError(f"{len(sequences)} sequences for {len(origin_specs)} layers")
    applier = applier or _Applier()
    seqs, derived, drawn_against, runs = [], [], [], []
    for k, (spec, text) in enumerate(zip(origin_specs, sequences)):
        if derived:
            prev = derived[-1]
            spec = spec.replace(Ci=prev.Co_eff, H=prev.Ho_eff, W=prev.Wo_eff)
        seq = TransformSequence.parse(text)
        steps = tuple(str(t) for t in seq.steps)
        final = seq.apply(conv_nest(spec))
        if final.provenance is None:
            raise ConfigError(f"layer {k}: `{text}` does not produce a convolution")
        applier.cache.setdefault((spec, steps), final)
        drawn_against.append(spec)
        seqs.append(seq)
        derived.append(final.provenance)
        runs.extend(_semantic_runs(k, steps))
    return Candidate(index, tuple(seqs), tuple(derived), tuple(drawn_against), tuple(runs))


def draw_candidates(origin: Union[Network, Sequence[ConvSpec]], cfg: SearchConfig) -> list[Candidate]:
    specs = origin.specs if isinstance(origin, Network) else list(origin)
    applier = _Applier()
    return [draw_candidate(specs, cfg, i, applier) for i in range(cfg.candidate_count)]


# --------------------------------------------------------------------------- #
# filtering and ranking

class _Scorer:
    def __init__(self, origin: Network, batch: Batch, cfg: SearchConfig):
        self.origin, self.batch, self.cfg = origin, batch, cfg
        self.origin_fisher = fisher_potential(origin, batch)
        self.applier = _Applier()
        self.legality: dict[tuple, dict] = {}
        self.fisher: dict[tuple, FisherReport] = {tuple(origin.specs): self.origin_fisher}

    def verdict(self, cand: Candidate, run: SemanticRun) -> dict:
        spec = cand.origin_specs[run.layer]
        key = (spec, run.before, run.steps)
        if key not in self.legality:
            before = self.applier.get(spec, run.before)
            after = self.applier.get(spec, run.before + run.steps)
            try:
                res = check_semantic_legality(before, after, self.cfg.cap)
                v, reason = res.verdict.value, res.reason
            except CapExceeded as exc:
                v, reason = "cap-exceeded", str(exc)
            self.legality[key] = {"steps": " | ".join(run.steps), "verdict": v, "reason": reason}
        # the cache is shared by layers with equal specs; the layer is the caller's
        return {"layer": run.layer, **self.legality[key]}

    def score(self, cand: Candidate) -> Candidate:
        cand = dataclasses.replace(cand, verdicts=[], fisher=None, status="pending", rejected_by=None, reason="")
        for run in cand.runs:
            v = self.verdict(cand, run)
            cand.verdicts.append(v)
            if v["verdict"] != "legal":
                cand.status, cand.rejected_by = "rejected", "semantic"
                cand.reason = f"layer {run.layer} [{v['steps']}]: {v['verdict']} {v['reason']}".strip()
                return cand
        key = tuple(cand.specs)
        if key not in self.fisher:
            self.fisher[key] = fisher_potential(cand.network(self.origin), self.batch)
        cand.fisher = self.fisher[key]
        decision = fisher_decision(self.origin_fisher, cand.fisher, self.cfg.layer_veto)
        if decision.accepted:
            cand.status = "survivor"
        else:
            cand.status, cand.rejected_by, cand.reason = "rejected", "fisher", decision.reason
        return cand


def rank_key(cand: Candidate) -> tuple:
    return (cand.macs, -cand.fisher.total if cand.fisher else 0.0, cand.dsl)


def rank(cands: Sequence[Candidate]) -> list[Candidate]:
    return sorted((c for c in cands if c.status == "survivor"), key=rank_key)


def filter_and_score(cands: Sequence[Candidate], origin: Network, batch: Batch,
                     cfg: Optional[SearchConfig] = None) -> list[Candidate]:
    """Score every candidate in place order and return the ranked survivors.

    The scored candidates (survivors and rejections) are available through
    :func:`score_candidates`; this wrapper keeps only the ranking.
    """
    return rank(score_candidates(cands, origin, batch, cfg))


def score_candidates(cands: Sequence[Candidate], origin: Network, batch: Batch,
                     cfg: Optional[SearchConfig] = None) -> list[Candidate]:
    scorer = _Scorer(origin, batch, cfg or SearchConfig())
    return [scorer.score(c) for c in cands]


def statistics(scored: Sequence[Candidate]) -> dict:
    n = len(scored)
    sem = sum(c.rejected_by == "semantic" for c in scored)
    fis = sum(c.rejected_by == "fisher" for c in scored)
    neural = [c for c in scored if c.has_neural]
    neural_rej = sum(c.status == "rejected" for c in neural)
    return {
        "candidate_count": n,
        "survivors": n - sem - fis,
        "rejected_semantic": sem,
        "rejected_fisher": fis,
        "rejection_rate": (sem + fis) / n if n else 0.0,
        "neural_candidates": len(neural),
        "neural_rejection_rate": neural_rej / len(neural) if neural else 0.0,
    }


# --------------------------------------------------------------------------- #
# end to end

_WORKER: dict = {}


def _worker_init(origin: Network, batch: Batch, cfg: SearchConfig) -> None:
    _WORKER["scorer"] = _Scorer(origin, batch, cfg)


def _worker_eval(indices: Sequence[int]) -> list[Candidate]:
    scorer: _Scorer = _WORKER["scorer"]
    specs = scorer.origin.specs
    return [scorer.score(draw_candidate(specs, scorer.cfg, i, scorer.applier)) for i in indices]


def evaluate(origin: Network, batch: Batch, cfg: SearchConfig, jobs: int = 1) -> list[Candidate]:
    """Draw and score all candidates; ``jobs > 1`` uses worker processes with
    results identical to the sequential run."""
    indices = list(range(cfg.candidate_count))
    if jobs <= 1 or len(indices) < 2:
        _worker_init(origin, batch, cfg)
        try:
            return _worker_eval(indices)
        finally:
            _WORKER.clear()
    chunks = [indices[i::jobs * 4] for i in range(jobs * 4)]
    out: list[Optional[Candidate]] = [None] * len(indices)
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init,
                             initargs=(origin, batch, cfg)) as pool:
        for chunk, res in zip(chunks, pool.map(_worker_eval, chunks)):
            for i, c in zip(chunk, res):
                out[i] = c
    return out  # type: ignore[return-value]


@dataclass
class SearchReport:
    config: SearchConfig
    network: NetworkConfig
    origin_macs: int
    origin_fisher: FisherReport
    candidates: list[Candidate]
    ranked: list[Candidate]
    stats: dict
    timing: dict = field(default_factory=dict)

    @property
    def best(self) -> Optional[Candidate]:
        return self.ranked[0] if self.ranked else None

    def body(self) -> dict:
        """Everything except wall-clock timing."""
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "network": self.network.to_dict(),
            "seeds": {"search": self.config.seed, "network": self.network.seed},
            "origin": {"macs": self.origin_macs, "fisher_per_layer": self.origin_fisher.per_layer,
                       "fisher_total": self.origin_fisher.total},
            "statistics": self.stats,
            "best": None if self.best is None else self.best.row(),
            "ranked": [{"rank": r, "index": c.index, "dsl": c.dsl, "macs": c.macs,
                        "fisher_total": c.fisher.total if c.fisher else None}
                       for r, c in enumerate(self.ranked)],
            "candidates": [c.row() for c in self.candidates],
        }

    def to_dict(self) -> dict:
        return {**self.body(), "timing": self.timing}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        depth = len(self.network.layers)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "status", "rejected_by", "macs", "fisher_total"]
                   + [f"fisher_l{k}" for k in range(depth)] + [f"macs_l{k}" for k in range(depth)] + ["dsl"])
        for c in self.candidates:
            fl = c.fisher.per_layer if c.fisher else [""] * depth
            w.writerow([c.index, c.status, c.rejected_by or "", c.macs,
                        "" if c.fisher is None else repr(c.fisher.total)]
                       + [repr(v) if v != "" else "" for v in fl] + c.macs_per_layer + [c.dsl])
        return buf.getvalue()

    def summary(self) -> str:
        s = self.stats
        lines = [
            f"candidates {s['candidate_count']}  survivors {s['survivors']}  "
            f"rejected: semantic {s['rejected_semantic']}, fisher {s['rejected_fisher']}",
            f"rejection rate {s['rejection_rate']:.3f}  (neural candidates {s['neural_candidates']}, "
            f"rejected {s['neural_rejection_rate']:.3f})",
            f"origin macs {self.origin_macs}  fisher {self.origin_fisher.total:.6e}",
        ]
        if self.best is not None:
            b = self.best
            lines.append(f"best #{b.index}  macs {b.macs} ({b.macs / self.origin_macs:.3f}x)  "
                         f"fisher {b.fisher.total:.6e}")
            lines.append(f"  {b.dsl}")
        else:
            lines.append("no surviving candidate")
        return "\n".join(lines)


def run_search(cfg: SearchConfig, network: NetworkConfig, out: Optional[Union[str, Path]] = None,
               jobs: int = 1) -> SearchReport:
    """Run the whole pipeline. With ``out`` set, writes ``out`` (JSON) and
    ``out`` with a ``.csv`` suffix."""
    t0 = time.perf_counter()
    origin = network.build()
    batch = network.batch()
    scored = evaluate(origin, batch, cfg, jobs)
    t1 = time.perf_counter()
    ranked = rank(scored)
    t2 = time.perf_counter()
    report = SearchReport(cfg, network, origin.macs, fisher_potential(origin, batch), scored, ranked,
                          statistics(scored))
    report.timing = {"evaluate_s": round(t1 - t0, 3), "rank_s": round(t2 - t1, 3),
                     "total_s": round(time.perf_counter() - t0, 3), "jobs": jobs}
    if out is not None:
        write_report(report, out)
    return report


def write_report(report: SearchReport, out: Union[str, Path]) -> tuple[Path, Path]:
    path = Path(out)
    csv_path = path.with_suffix(".csv")
    try:
        path.write_text(report.to_json())
        csv_path.write_text(report.to_csv())
    except OSError as exc:
        raise OSError(f"cannot write search report to {path}: {exc.strerror or exc}") from exc
    return path, csv_path


def load_search_config(path: Union[str, Path]) -> SearchConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if isinstance(d, dict) and "search" in d:
        d = d["search"]
    return search_config_from_dict(d)
