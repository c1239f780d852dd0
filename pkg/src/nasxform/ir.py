"""Affine loop-nest representation of tensor convolutions.

A :class:`LoopNest` is an ordered list of bands (sub-nests produced by
fission). Each band is a chain of counted loops, outermost first, with
statements attached to a subset of those loops. A statement executes once
per point of its own iterators; loops of the band that sit above the
statement but are not among its iterators act as guards that pin it to their
first iteration. This is the polyhedral reading of a schedule and is what lets
a reduction loop be hoisted above its initialisation statement.

Timestamps are the usual ``2d+1`` vectors::

    (band, 1, i_0, 1, i_1, ..., 1, i_{d-1}, slot, statement index)

where ``slot`` is 0 for statements placed before the deeper loops of their
level and 2 for statements placed after them (loops use marker 1).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import CapExceeded, IndexOutOfRange, InvalidSpec, RankMismatch, Unbounded
from .expr import Expr

DEFAULT_INSTANCE_CAP = 10**6

MODES = ("read", "write", "rmw")
KINDS = ("init", "mac")
KERNEL_ROLES = ("kh", "kw")


# --------------------------------------------------------------------------- #
# Convolution descriptor

@dataclass(frozen=True)
class ConvSpec:
    """Semantic descriptor of one convolution variant.

    ``H`` and ``W`` are input spatial sizes. Bottleneck factors divide the
    corresponding extent: ``bottleneck_out`` the output channels,
    ``bottleneck_in`` the input channels read, ``bottleneck_spatial`` the
    output rows and columns (an int applies to both). ``channel_splits``
    partitions the effective output channels into ``((start, stop), G)``
    ranges, each convolved with its own group factor and weight tensor.
    """

    Ci: int
    Co: int
    H: int
    W: int
    Kh: int = 1
    Kw: int = 1
    stride: int = 1
    pad: int = 0
    groups: int = 1
    bottleneck_out: int = 1
    bottleneck_in: int = 1
    bottleneck_spatial: Union[int, tuple[int, int]] = (1, 1)
    channel_splits: tuple = ()

    def __post_init__(self):
        bs = self.bottleneck_spatial
        if isinstance(bs, (int, np.integer)):
            bs = (int(bs), int(bs))
        object.__setattr__(self, "bottleneck_spatial", tuple(int(b) for b in bs))
        splits = tuple(((int(a), int(b)), int(g)) for (a, b), g in self.channel_splits)
        object.__setattr__(self, "channel_splits", splits)
        self._validate()

    def _validate(self):
        for name in ("Ci", "Co", "H", "W", "Kh", "Kw", "stride", "groups",
                     "bottleneck_out", "bottleneck_in"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InvalidSpec(f"{name} must be a positive integer, got {v!r}")
        if self.pad < 0:
            raise InvalidSpec("pad must be non-negative")
        if len(self.bottleneck_spatial) != 2 or min(self.bottleneck_spatial) < 1:
            raise InvalidSpec("bottleneck_spatial must be positive")
        if self.Co % self.bottleneck_out:
            raise InvalidSpec(f"Co={self.Co} not divisible by bottleneck_out={self.bottleneck_out}")
        if self.Ci % self.bottleneck_in:
            raise InvalidSpec(f"Ci={self.Ci} not divisible by bottleneck_in={self.bottleneck_in}")
        if self.H + 2 * self.pad < self.Kh or self.W + 2 * self.pad < self.Kw:
            raise InvalidSpec("kernel larger than padded input")
        bh, bw = self.bottleneck_spatial
        if self.Ho % bh or self.Wo % bw:
            raise InvalidSpec(
                f"output extent {self.Ho}x{self.Wo} not divisible by bottleneck_spatial {bh}x{bw}")
        if not self.channel_splits:
            if self.Co_eff % self.groups or self.Ci_eff % self.groups:
                raise InvalidSpec(
                    f"groups={self.groups} must divide Co={self.Co_eff} and Ci={self.Ci_eff}")
            return
        if self.groups != 1:
            raise InvalidSpec("channel_splits carry their own group factors; groups must be 1")
        pos = 0
        for (a, b), g in self.channel_splits:
            if a != pos or b <= a:
                raise InvalidSpec("channel_splits must be contiguous, ordered and non-empty")
            if g < 1 or (b - a) % g or self.Ci_eff % g:
                raise InvalidSpec(f"split ({a}, {b}) with G={g} is not divisible")
            pos = b
        if pos != self.Co_eff:
            raise InvalidSpec(f"channel_splits cover [0, {pos}) but Co is {self.Co_eff}")

    # derived sizes ------------------------------------------------------

    @property
    def Ci_eff(self) -> int:
        return self.Ci // self.bottleneck_in

    @property
    def Co_eff(self) -> int:
        return self.Co // self.bottleneck_out

    @property
    def Ho(self) -> int:
        return (self.H + 2 * self.pad - self.Kh) // self.stride + 1

    @property
    def Wo(self) -> int:
        return (self.W + 2 * self.pad - self.Kw) // self.stride + 1

    @property
    def Ho_eff(self) -> int:
        return self.Ho // self.bottleneck_spatial[0]

    @property
    def Wo_eff(self) -> int:
        return self.Wo // self.bottleneck_spatial[1]

    @property
    def is_depthwise(self) -> bool:
        return not self.channel_splits and self.groups > 1 and self.groups == self.Ci_eff == self.Co_eff

    @property
    def parts(self) -> list[tuple[int, int, int]]:
        """``(start, stop, G)`` per independently weighted output-channel range."""
        if self.channel_splits:
            return [(a, b, g) for (a, b), g in self.channel_splits]
        return [(0, self.Co_eff, self.groups)]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.Ci_eff, self.H, self.W)

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return (self.Co_eff, self.Ho_eff, self.Wo_eff)

    @property
    def weight_shapes(self) -> list[tuple[int, int, int, int]]:
        return [(b - a, self.Ci_eff // g, self.Kh, self.Kw) for a, b, g in self.parts]

    @property
    def macs(self) -> int:
        spatial = self.Ho_eff * self.Wo_eff * self.Kh * self.Kw
        return sum((b - a) * (self.Ci_eff // g) * spatial for a, b, g in self.parts)

    def replace(self, **changes) -> "ConvSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bottleneck_spatial"] = list(self.bottleneck_spatial)
        d["channel_splits"] = [[[a, b], g] for (a, b), g in self.channel_splits]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConvSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidSpec(f"unknown ConvSpec fields: {sorted(unknown)}")
        d = dict(d)
        if "bottleneck_spatial" in d and isinstance(d["bottleneck_spatial"], list):
            d["bottleneck_spatial"] = tuple(d["bottleneck_spatial"])
        if "channel_splits" in d:
            d["channel_splits"] = tuple((tuple(r), g) for r, g in d["channel_splits"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc

    def describe(self) -> str:
        bh, bw = self.bottleneck_spatial
        s = (f"conv Ci={self.Ci} Co={self.Co} H={self.H} W={self.W} K={self.Kh}x{self.Kw} "
             f"stride={self.stride} pad={self.pad} G={self.groups} "
             f"B_out={self.bottleneck_out} B_in={self.bottleneck_in} B_hw={bh}x{bw}")
        if self.channel_splits:
            s += " splits=" + ",".join(f"[{a}:{b}]/{g}" for (a, b), g in self.channel_splits)
        return s


# --------------------------------------------------------------------------- #
# Loop-nest types

Bound = Union[int, str]


@dataclass(frozen=True)
class IterVar:
    name: str
    lower: Bound
    upper: Bound  # exclusive
    step: int = 1
    role: str = ""
    unroll: int = 1

    def __post_init__(self):
        if self.step < 1:
            raise ValueError(f"step of {self.name} must be positive")
        if self.is_concrete and self.upper < self.lower:
            raise ValueError(f"empty or inverted range for {self.name}")

    @property
    def is_concrete(self) -> bool:
        return isinstance(self.lower, (int, np.integer)) and isinstance(self.upper, (int, np.integer))

    @property
    def trip(self) -> int:
        if not self.is_concrete:
            raise Unbounded(f"iterator {self.name} has symbolic bounds")
        return -(-(self.upper - self.lower) // self.step)

    @property
    def last(self) -> int:
        return self.lower + (self.trip - 1) * self.step

    def values(self) -> np.ndarray:
        if not self.is_concrete:
            raise Unbounded(f"iterator {self.name} has symbolic bounds")
        return np.arange(self.lower, self.upper, self.step, dtype=np.int64)

    def replace(self, **changes) -> "IterVar":
        return dataclasses.replace(self, **changes)

    def __str__(self) -> str:
        s = f"{self.name} in [{self.lower}, {self.upper}) step {self.step}"
        if self.unroll > 1:
            s += f" unroll {self.unroll}"
        return s


@dataclass(frozen=True)
class AccessMap:
    tensor: str
    indices: tuple[Expr, ...]
    mode: str = "read"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"access mode must be one of {MODES}")
        object.__setattr__(self, "indices", tuple(Expr.lift(e) for e in self.indices))

    def vars(self) -> frozenset[str]:
        out: frozenset[str] = frozenset()
        for e in self.indices:
            out |= e.vars()
        return out

    def subs(self, mapping) -> "AccessMap":
        return dataclasses.replace(self, indices=tuple(e.subs(mapping) for e in self.indices))

    def __str__(self) -> str:
        return f"{self.tensor}[{', '.join(str(e) for e in self.indices)}]"


@dataclass(frozen=True)
class Statement:
    id: str
    kind: str
    accesses: tuple[AccessMap, ...]
    iters: tuple[str, ...]
    slot: int = 0
    origin: tuple[tuple[str, Expr], ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"statement kind must be one of {KINDS}")
        if self.slot not in (0, 2):
            raise ValueError("slot must be 0 (before inner loops) or 2 (after)")
        modes = [a.mode for a in self.accesses]
        if self.kind == "mac":
            if modes.count("rmw") != 1 or modes.count("read") < 2 or "write" in modes:
                raise ValueError(f"{self.id}: multiply-accumulate needs one rmw and >=2 reads")
        elif modes.count("write") != 1 or "rmw" in modes:
            raise ValueError(f"{self.id}: init needs exactly one write")

    @property
    def base(self) -> str:
        return self.id.split(".")[0]

    @property
    def target(self) -> AccessMap:
        return next(a for a in self.accesses if a.mode != "read")

    @property
    def reads(self) -> list[AccessMap]:
        return [a for a in self.accesses if a.mode == "read"]

    def subs(self, mapping) -> "Statement":
        return dataclasses.replace(
            self,
            accesses=tuple(a.subs(mapping) for a in self.accesses),
            origin=tuple((n, e.subs(mapping)) for n, e in self.origin),
        )

    def render(self) -> str:
        if self.kind == "init":
            return f"{self.target} = 0"
        return f"{self.target} += " + " * ".join(str(a) for a in self.reads)


@dataclass(frozen=True)
class TensorDecl:
    name: str
    shape: tuple[int, ...]
    padded: bool = False
    view_of: Optional[tuple[str, int, int]] = None  # (parent, axis, offset)

    def __str__(self) -> str:
        s = f"tensor {self.name}[{', '.join(map(str, self.shape))}]"
        if self.padded:
            s += " pad"
        if self.view_of:
            p, ax, off = self.view_of
            s += f" view {p} axis {ax} offset {off}"
        return s


@dataclass(frozen=True)
class Band:
    iterators: tuple[IterVar, ...]
    statements: tuple[Statement, ...]

    def __post_init__(self):
        names = [it.name for it in self.iterators]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate iterator names in band: {names}")
        pos = {n: i for i, n in enumerate(names)}
        normalized = []
        for s in self.statements:
            missing = [n for n in s.iters if n not in pos]
            if missing:
                raise ValueError(f"{s.id} references iterators {missing} not in the band")
            # keep each statement's iterator tuple in loop order
            ordered = tuple(sorted(s.iters, key=pos.__getitem__))
            normalized.append(s if ordered == tuple(s.iters) else dataclasses.replace(s, iters=ordered))
            for a in s.accesses:
                stray = a.vars() - set(s.iters)
                if stray:
                    raise ValueError(f"{s.id} access {a} uses {sorted(stray)} outside its domain")
        object.__setattr__(self, "statements", tuple(normalized))

    @property
    def names(self) -> list[str]:
        return [it.name for it in self.iterators]

    def has(self, name: str) -> bool:
        return any(it.name == name for it in self.iterators)

    def index(self, name: str) -> int:
        for i, it in enumerate(self.iterators):
            if it.name == name:
                return i
        raise KeyError(name)

    def iter(self, name: str) -> IterVar:
        return self.iterators[self.index(name)]

    def depth(self, stmt: Statement) -> int:
        if not stmt.iters:
            return 0
        return 1 + max(self.index(n) for n in stmt.iters)

    def ranges(self) -> dict[str, tuple[int, int]]:
        return {it.name: (it.lower, it.last) for it in self.iterators if it.is_concrete and it.trip > 0}


@dataclass(frozen=True)
class LoopNest:
    bands: tuple[Band, ...]
    tensors: tuple[TensorDecl, ...]
    provenance: Optional[ConvSpec] = None
    history: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            raise ValueError("duplicate tensor declarations")
        decls = {t.name: t for t in self.tensors}
        ids = [s.id for b in self.bands for s in b.statements]
        if len(set(ids)) != len(ids):
            raise ValueError(f"statement ids must be unique within a nest: {ids}")
        for b in self.bands:
            for s in b.statements:
                for a in s.accesses:
                    if a.tensor not in decls:
                        raise ValueError(f"{s.id} accesses undeclared tensor {a.tensor}")
                    if len(a.indices) != len(decls[a.tensor].shape):
                        raise RankMismatch(
                            f"{s.id}: {a} has {len(a.indices)} indices for rank "
                            f"{len(decls[a.tensor].shape)} tensor")

    # convenience views -------------------------------------------------

    @property
    def iterators(self) -> tuple[IterVar, ...]:
        if len(self.bands) != 1:
            raise ValueError("nest has several parts; use .bands")
        return self.bands[0].iterators

    @property
    def statements(self) -> tuple[Statement, ...]:
        return tuple(s for b in self.bands for s in b.statements)

    def tensor(self, name: str) -> TensorDecl:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def statement(self, sid: str) -> Statement:
        for s in self.statements:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def written_tensors(self) -> set[str]:
        return {a.tensor for s in self.statements for a in s.accesses if a.mode != "read"}

    def replace(self, **changes) -> "LoopNest":
        return dataclasses.replace(self, **changes)

    # text form ------------------------------------------------------------

    def serialize(self) -> str:
        lines: list[str] = []
        if self.provenance is not None:
            lines.append(self.provenance.describe())
        lines.extend(str(t) for t in self.tensors)
        multi = len(self.bands) > 1
        for k, band in enumerate(self.bands):
            indent = 0
            if multi:
                lines.append(f"part {k}:")
                indent = 1
            lines.extend(_render_band(band, indent))
        return "\n".join(lines) + "\n"

    __str__ = serialize


def _render_band(band: Band, indent: int) -> list[str]:
    by_level: dict[tuple[int, int], list[tuple[int, Statement]]] = {}
    for idx, s in enumerate(band.statements):
        by_level.setdefault((band.depth(s), s.slot), []).append((idx, s))
    lines: list[str] = []

    def stmt_line(s: Statement, level: int) -> str:
        guards = [it for it in band.iterators[:band.depth(s)] if it.name not in s.iters]
        g = ""
        if guards:
            g = " [" + ", ".join(f"{it.name}={it.lower}" for it in guards) + "]"
        after = " (after)" if s.slot == 2 else ""
        return "  " * (indent + level) + f"{s.id}{g}{after}: {s.render()}"

    def level(d: int):
        for _, s in by_level.get((d, 0), []):
            lines.append(stmt_line(s, d))
        if d < len(band.iterators):
            lines.append("  " * (indent + d) + str(band.iterators[d]))
            level(d + 1)
        for _, s in by_level.get((d, 2), []):
            lines.append(stmt_line(s, d))

    level(0)
    return lines


# --------------------------------------------------------------------------- #
# Construction

def conv_nest(spec: ConvSpec) -> LoopNest:
    """Loop nest computing ``spec`` with loop order ``[g], co, h, w, ci, kh, kw``.

    Kernel loops of extent 1 are omitted (a 1x1 convolution is the
    four-deep nest of the naive implementation). Depthwise specs collapse the
    unit channel-slice loops so a single ``g`` loop remains.
    """
    if not isinstance(spec, ConvSpec):
        raise InvalidSpec("conv_nest expects a ConvSpec")
    multi = bool(spec.channel_splits)
    tensors = [TensorDecl("I", spec.input_shape, padded=spec.pad > 0),
               TensorDecl("O", spec.output_shape)]
    bands = []
    for k, (a, b, g) in enumerate(spec.parts):
        wname = f"W{k}" if multi else "W"
        suffix = f".{k}" if multi and k else ""
        band, wshape = _conv_band(spec, a, b - a, g, wname, suffix, multi)
        tensors.append(TensorDecl(wname, wshape))
        bands.append(band)
    # weights declared after I and O, in part order
    return LoopNest(tuple(bands), tuple(tensors), provenance=spec)


def _conv_band(spec: ConvSpec, start: int, length: int, G: int, wname: str,
               suffix: str, multi: bool) -> tuple[Band, tuple[int, ...]]:
    ci_eff = spec.Ci_eff
    depthwise = spec.is_depthwise
    its: list[IterVar] = []
    if G > 1:
        its.append(IterVar("g", 0, G, role="g"))
    g = Expr.var("g")
    co, ci = Expr.var("co"), Expr.var("ci")
    if depthwise:
        co_abs, w_row, w_col, ci_abs = g, g, Expr.constant(0), g
    elif G > 1:
        its.append(IterVar("co", 0, length // G, role="co"))
        co_abs = g * (length // G) + co + start
        w_row = g * (length // G) + co
        w_col = ci
        ci_abs = g * (ci_eff // G) + ci
    else:
        its.append(IterVar("co", start, start + length, role="co"))
        co_abs, w_row, w_col, ci_abs = co, co - start, ci, ci
    its.append(IterVar("h", 0, spec.Ho_eff, role="h"))
    its.append(IterVar("w", 0, spec.Wo_eff, role="w"))
    if not depthwise:
        its.append(IterVar("ci", 0, ci_eff // G, role="ci"))
    kh = Expr.var("kh") if spec.Kh > 1 else Expr.constant(0)
    kw = Expr.var("kw") if spec.Kw > 1 else Expr.constant(0)
    if spec.Kh > 1:
        its.append(IterVar("kh", 0, spec.Kh, role="kh"))
    if spec.Kw > 1:
        its.append(IterVar("kw", 0, spec.Kw, role="kw"))
    h, w = Expr.var("h"), Expr.var("w")
    out = AccessMap("O", (co_abs, h, w))
    init_iters = tuple(n for n in ("g", "co", "h", "w") if any(it.name == n for it in its))
    s1 = Statement(
        "S1" + suffix, "init", (dataclasses.replace(out, mode="write"),), init_iters,
        origin=(("co", co_abs), ("h", h), ("w", w)),
    )
    s2 = Statement(
        "S2" + suffix, "mac",
        (dataclasses.replace(out, mode="rmw"),
         AccessMap(wname, (w_row, w_col, kh, kw)),
         AccessMap("I", (ci_abs, h * spec.stride + kh - spec.pad, w * spec.stride + kw - spec.pad))),
        tuple(it.name for it in its),
        origin=(("co", co_abs), ("h", h), ("w", w), ("ci", ci_abs), ("kh", kh), ("kw", kw)),
    )
    wshape = (length, ci_eff // G, spec.Kh, spec.Kw)
    return Band(tuple(its), (s1, s2)), wshape


# --------------------------------------------------------------------------- #
# Enumeration

class Instance(NamedTuple):
    stmt: str
    coord: tuple[int, ...]


@dataclass
class Block:
    """All instances of one statement, as flat coordinate arrays."""

    band: int
    index: int  # statement position within its band
    stmt: Statement
    coords: dict[str, np.ndarray]
    count: int


def instance_count(nest: LoopNest) -> int:
    total = 0
    for band in nest.bands:
        for s in band.statements:
            n = 1
            for name in s.iters:
                n *= band.iter(name).trip
            total += n
    return total


def expand(nest: LoopNest, cap: Optional[int] = DEFAULT_INSTANCE_CAP) -> list[Block]:
    n = instance_count(nest)
    if cap is not None and n > cap:
        raise CapExceeded(f"{n} statement instances exceed the brute-force cap of {cap}")
    blocks = []
    for bi, band in enumerate(nest.bands):
        for si, s in enumerate(band.statements):
            axes = [band.iter(name).values() for name in s.iters]
            if axes:
                grids = np.meshgrid(*axes, indexing="ij")
                coords = {name: g.ravel() for name, g in zip(s.iters, grids)}
                count = grids[0].size
            else:
                coords, count = {}, 1
            blocks.append(Block(bi, si, s, coords, count))
    return blocks


def timestamps(nest: LoopNest, blocks: Sequence[Block]) -> np.ndarray:
    """Timestamp matrix, one row per instance in block order (column-major)."""
    width = 1 + 2 * (max((len(b.iterators) for b in nest.bands), default=0) + 1)
    ts = np.zeros((sum(b.count for b in blocks), width), dtype=np.int64, order="F")
    off = 0
    for blk in blocks:
        band = nest.bands[blk.band]
        d = band.depth(blk.stmt)
        sl = slice(off, off + blk.count)
        ts[sl, 0] = blk.band
        for k in range(d):
            it = band.iterators[k]
            ts[sl, 1 + 2 * k] = 1
            ts[sl, 2 + 2 * k] = blk.coords[it.name] if it.name in blk.coords else it.lower
        ts[sl, 1 + 2 * d] = blk.stmt.slot
        ts[sl, 2 + 2 * d] = blk.index
        off += blk.count
    return ts


def row_keys(rows: np.ndarray) -> Optional[np.ndarray]:
    """One int64 per row that sorts like the rows do lexicographically, or
    None when the mixed-radix key would overflow."""
    if rows.ndim != 2 or len(rows) == 0:
        return np.zeros(len(rows), dtype=np.int64)
    lo = rows.min(axis=0)
    span = rows.max(axis=0) - lo + 1
    key = np.zeros(len(rows), dtype=np.int64)
    total = 1
    for c in range(rows.shape[1]):
        if span[c] == 1:
            continue
        total *= int(span[c])
        if total >= 2 ** 62:
            return None
        key = key * int(span[c]) + (rows[:, c] - lo[c])
    return key


def lex_order(rows: np.ndarray) -> np.ndarray:
    """Indices that sort ``rows`` lexicographically (stable)."""
    key = row_keys(rows)
    if key is None:
        return np.lexsort(rows.T[::-1])
    return np.argsort(key, kind="stable")


def schedule_rank(ts: np.ndarray) -> np.ndarray:
    """Position of every row of ``ts`` in lexicographic timestamp order."""
    order = lex_order(ts) if len(ts) else np.zeros(0, dtype=np.int64)
    rank = np.empty(len(ts), dtype=np.int64)
    rank[order] = np.arange(len(ts))
    return rank


def enumerate_instances(nest: LoopNest, cap: Optional[int] = DEFAULT_INSTANCE_CAP) -> list[Instance]:
    """Every statement instance, in schedule order."""
    blocks = expand(nest, cap)
    ts = timestamps(nest, blocks)
    order = lex_order(ts)
    flat: list[Instance] = []
    for blk in blocks:
        cols = [blk.coords[n] for n in blk.stmt.iters]
        for i in range(blk.count):
            flat.append(Instance(blk.stmt.id, tuple(int(c[i]) for c in cols)))
    return [flat[i] for i in order]


def resolve_access(nest: LoopNest, blk: Block, access: AccessMap,
                   on_overrun: str = "raise") -> tuple[str, np.ndarray, np.ndarray]:
    """Flat cell index of ``access`` for every instance of ``blk``.

    Views are resolved to their parent tensor. Returns ``(tensor, cells,
    valid)``; ``valid`` is False where a padded tensor is read out of range.
    """
    decl = nest.tensor(access.tensor)
    idx = [np.broadcast_to(np.asarray(e.evaluate(blk.coords), dtype=np.int64), (blk.count,))
           for e in access.indices]
    valid = np.ones(blk.count, dtype=bool)
    for ax, (v, size) in enumerate(zip(idx, decl.shape)):
        inside = (v >= 0) & (v < size)
        if not inside.all():
            if decl.padded and access.mode == "read":
                valid &= inside
            elif on_overrun == "raise":
                bad = int(v[~inside][0])
                raise IndexOutOfRange(
                    f"{blk.stmt.id}: {access} axis {ax} reaches {bad} outside [0, {size})")
            else:
                valid &= inside
    while decl.view_of is not None:
        parent, axis, offset = decl.view_of
        idx = list(idx)
        idx[axis] = idx[axis] + offset
        decl = nest.tensor(parent)
    shape = decl.shape
    cells = np.zeros(blk.count, dtype=np.int64)
    for v, size in zip(idx, shape):
        cells = cells * size + np.clip(v, 0, size - 1)
    return decl.name, cells, valid


def root_tensor(nest: LoopNest, name: str) -> str:
    decl = nest.tensor(name)
    while decl.view_of is not None:
        decl = nest.tensor(decl.view_of[0])
    return decl.name


# --------------------------------------------------------------------------- #
# Dependences

class Dependence(NamedTuple):
    src_coord: tuple[int, ...]
    dst_coord: tuple[int, ...]
    src_stmt: str
    dst_stmt: str


@dataclass(frozen=True)
class DependenceSet:
    pairs: frozenset

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __contains__(self, item) -> bool:
        return item in self.pairs


def compute_dependences(nest: LoopNest, cap: Optional[int] = DEFAULT_INSTANCE_CAP) -> DependenceSet:
    """All ordered pairs of instances touching one cell where at least one writes.

    Brute force over every access; quadratic in the number of accesses per
    cell, so intended for small nests and as a reference for the legality
    checker.
    """
    blocks = expand(nest, cap)
    ts = timestamps(nest, blocks)
    rank = schedule_rank(ts)
    per_cell: dict[tuple[str, int], list[tuple[int, bool, Instance]]] = {}
    offset = 0
    for blk in blocks:
        cols = [blk.coords[n] for n in blk.stmt.iters]
        insts = [Instance(blk.stmt.id, tuple(int(c[i]) for c in cols)) for i in range(blk.count)]
        for a in blk.stmt.accesses:
            tensor, cells, valid = resolve_access(nest, blk, a, on_overrun="mask")
            writes = a.mode != "read"
            for i in np.flatnonzero(valid):
                per_cell.setdefault((tensor, int(cells[i])), []).append(
                    (int(rank[offset + i]), writes, insts[i]))
        offset += blk.count
    pairs = set()
    budget = 10 * (cap or DEFAULT_INSTANCE_CAP)
    for accesses in per_cell.values():
        if not any(w for _, w, _ in accesses):
            continue
        accesses.sort(key=lambda t: t[0])
        budget -= len(accesses) ** 2 // 2
        if budget < 0:
            raise CapExceeded("dependence pair enumeration exceeds the brute-force cap")
        for x in range(len(accesses)):
            rx, wx, ix = accesses[x]
            for y in range(x + 1, len(accesses)):
                ry, wy, iy = accesses[y]
                if (wx or wy) and ix != iy:
                    pairs.add(Dependence(ix.coord, iy.coord, ix.stmt, iy.stmt))
    return DependenceSet(frozenset(pairs))


def origin_coords(blk: Block, names: Iterable[str]) -> list[np.ndarray]:
    """Original (pre-transformation) coordinates of every instance of ``blk``."""
    origin = dict(blk.stmt.origin)
    out = []
    for n in names:
        e = origin.get(n, Expr.constant(0))
        out.append(np.broadcast_to(np.asarray(e.evaluate(blk.coords), dtype=np.int64), (blk.count,)))
    return out
