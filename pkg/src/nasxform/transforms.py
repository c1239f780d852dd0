"""Loop-nest rewrites: program transformations and neural-architecture ones.

Every transformation is a pure function ``f(nest, *params, part=None)``.
``part`` restricts the rewrite to one band of a split nest; by default it
applies to every band containing the named iterators. Semantic-class
rewrites keep the computed function and the provenance; neural-class
rewrites change the function and derive a new provenance, which is kept only
after checking that the rewritten nest really computes that convolution.
"""
from __future__ import annotations

import dataclasses
import functools
import re
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .errors import (
    BadPartition,
    ChannelMismatch,
    InvalidSpec,
    KernelAxis,
    NasXformError,
    NonDivisible,
    NotAdjacent,
    NotDense,
    NotPermutable,
    ParseError,
    SequenceError,
    SharedTensorConflict,
    TransformError,
    UnknownIterator,
)
from .expr import Expr
from .interp import realizes
from .ir import KERNEL_ROLES, Band, ConvSpec, IterVar, LoopNest, Statement, TensorDecl, root_tensor

SEMANTIC = "semantic"
NEURAL = "neural"


# --------------------------------------------------------------------------- #
# helpers

def _targets(nest: LoopNest, names: Sequence[str], part: Optional[int]) -> list[int]:
    if part is not None:
        if not 0 <= part < len(nest.bands):
            raise BadPartition(f"nest has {len(nest.bands)} parts, no part {part}")
        missing = [n for n in names if not nest.bands[part].has(n)]
        if missing:
            raise UnknownIterator(f"part {part} has no iterator {', '.join(missing)}")
        return [part]
    found = [k for k, b in enumerate(nest.bands) if all(b.has(n) for n in names)]
    if not found:
        raise UnknownIterator(f"no part of the nest has iterators {', '.join(names)}")
    return found


def _fresh(band: Band, base: str) -> str:
    if not band.has(base):
        return base
    k = 2
    while band.has(f"{base}{k}"):
        k += 1
    return f"{base}{k}"


def _check_factor(f, what: str) -> int:
    if isinstance(f, bool) or not isinstance(f, int) or f < 1:
        raise NonDivisible(f"{what} must be a positive integer, got {f!r}")
    return f


def _carry_unroll(u: int, trip: int) -> int:
    return u if u > 1 and trip % u == 0 else 1


def _tidy(band: Band) -> Band:
    """Fold ``//`` and ``%`` terms that iterator ranges decide."""
    ranges = band.ranges()
    stmts = []
    for s in band.statements:
        stmts.append(dataclasses.replace(
            s,
            accesses=tuple(dataclasses.replace(a, indices=tuple(e.simplify(ranges) for e in a.indices))
                           for a in s.accesses),
            origin=tuple((n, e.simplify(ranges)) for n, e in s.origin),
        ))
    return Band(band.iterators, tuple(stmts))


def _renumber(bands: Sequence[Band]) -> tuple[Band, ...]:
    out = []
    for k, band in enumerate(bands):
        suffix = f".{k}" if k else ""
        out.append(Band(band.iterators, tuple(
            dataclasses.replace(s, id=s.base + suffix) for s in band.statements)))
    return tuple(out)


def _prune(tensors: Sequence[TensorDecl], bands: Sequence[Band]) -> tuple[TensorDecl, ...]:
    decls = {t.name: t for t in tensors}
    keep: set[str] = set()
    for b in bands:
        for s in b.statements:
            for a in s.accesses:
                name = a.tensor
                while name is not None and name not in keep:
                    keep.add(name)
                    v = decls[name].view_of
                    name = v[0] if v else None
    return tuple(t for t in tensors if t.name in keep)


def _band_tensors(band: Band) -> set[str]:
    return {a.tensor for s in band.statements for a in s.accesses}


def _dense_layout(expr: Expr, band: Band) -> Optional[list[tuple[str, int, int]]]:
    """``[(iterator, coefficient, trip)]`` innermost first when ``expr`` is a
    dense mixed-radix index (zero-based unit-step iterators, no gaps)."""
    if not expr.is_linear or expr.const != 0:
        return None
    items = []
    for name, c in expr.terms:
        if not band.has(name):
            return None
        it = band.iter(name)
        if it.lower != 0 or it.step != 1 or c <= 0:
            return None
        items.append((name, c, it.trip))
    items.sort(key=lambda t: t[1])
    expected = 1
    for _, c, trip in items:
        if c != expected:
            return None
        expected *= trip
    return items


def _shrink_dim(expr: Expr, band: Band, i: str, factor: int, size: int) -> Optional[tuple[Expr, int]]:
    """Relinearise a dense index after iterator ``i`` loses ``factor`` of its range."""
    layout = _dense_layout(expr, band)
    if layout is None or layout[-1][1] * layout[-1][2] != size:
        return None
    ci = next(c for n, c, _ in layout if n == i)
    ti = band.iter(i).trip
    terms = []
    for n, c, _ in layout:
        terms.append((n, c // factor if c >= ci * ti else c))
    new = Expr.constant(0)
    for n, c in terms:
        new = new + Expr.var(n) * c
    return new, size // factor


def _reshape_tensors(nest: LoopNest, targets: Sequence[int], i: str, factor: int,
                     written_only_dense: bool, only: Optional[set[str]] = None,
                     ) -> tuple[dict[str, TensorDecl], dict[tuple[int, str, int], Expr]]:
    """New declarations and per-access index rewrites when ``i`` shrinks by ``factor``.

    Returns ``(decls, rewrites)`` where ``rewrites`` maps ``(band, tensor,
    axis)`` to the replacement index expression. Written tensors must be dense
    along every axis that ``i`` touches; read tensors are reshaped only where
    they are dense.
    """
    written = {root_tensor(nest, t) for t in nest.written_tensors()}
    new_shapes: dict[str, list[int]] = {}
    rewrites: dict[tuple[int, str, int], Expr] = {}
    for k in targets:
        band = nest.bands[k]
        for s in band.statements:
            for a in s.accesses:
                if only is not None and a.tensor not in only:
                    continue
                decl = nest.tensor(a.tensor)
                shape = new_shapes.setdefault(a.tensor, list(decl.shape))
                for ax, e in enumerate(a.indices):
                    if i not in e.vars():
                        continue
                    res = _shrink_dim(e, band, i, factor, decl.shape[ax])
                    if res is None:
                        if root_tensor(nest, a.tensor) in written and written_only_dense:
                            raise NotDense(f"{a} is not a dense index along {i}")
                        continue
                    new_e, new_size = res
                    key = (k, str(a), ax)
                    if rewrites.get(key, new_e) != new_e or shape[ax] not in (decl.shape[ax], new_size):
                        raise NotDense(f"inconsistent accesses to {a.tensor} along {i}")
                    rewrites[key] = new_e
                    shape[ax] = new_size
    decls = {}
    for name, shape in new_shapes.items():
        decl = nest.tensor(name)
        if tuple(shape) == tuple(decl.shape):
            continue
        for k, band in enumerate(nest.bands):
            if k not in targets and name in _band_tensors(band):
                raise SharedTensorConflict(f"tensor {name} is also used by part {k}")
        decls[name] = dataclasses.replace(decl, shape=tuple(shape), view_of=None)
    return decls, rewrites


def _apply_rewrites(band: Band, k: int, rewrites: dict) -> Band:
    stmts = []
    for s in band.statements:
        accs = []
        for a in s.accesses:
            idx = tuple(rewrites.get((k, str(a), ax), e) for ax, e in enumerate(a.indices))
            accs.append(dataclasses.replace(a, indices=idx))
        stmts.append(dataclasses.replace(s, accesses=tuple(accs)))
    return Band(band.iterators, tuple(stmts))


def _replace_decls(tensors: Sequence[TensorDecl], decls: dict[str, TensorDecl]) -> tuple[TensorDecl, ...]:
    return tuple(decls.get(t.name, t) for t in tensors)


def _try_spec(p: Optional[ConvSpec], **changes) -> Optional[ConvSpec]:
    if p is None:
        return None
    try:
        return p.replace(**changes)
    except InvalidSpec:
        return None


def _verified(nest: LoopNest, candidates: Sequence[Optional[ConvSpec]]) -> Optional[ConvSpec]:
    seen = set()
    for spec in candidates:
        if spec is None or spec in seen:
            continue
        seen.add(spec)
        if realizes(nest, spec):
            return spec
    return None


def _co_range(band: Band) -> Optional[tuple[int, int]]:
    ranges = band.ranges()
    for s in band.statements:
        origin = dict(s.origin)
        if "co" in origin:
            lo, hi = origin["co"].bounds(ranges)
            return int(lo), int(hi) + 1
    return None


# --------------------------------------------------------------------------- #
# history recording

def format_step(kind: str, args: Sequence, part: Optional[int] = None) -> str:
    def fmt(v):
        if isinstance(v, (list, tuple)):
            return "[" + ",".join(str(x) for x in v) + "]"
        return str(v)
    s = f"{kind}({','.join(fmt(a) for a in args)})"
    return s if part is None else f"{s}@{part}"


def _recorded(kind: str):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(nest: LoopNest, *args, part: Optional[int] = None) -> LoopNest:
            out = fn(nest, *args, part=part)
            return out.replace(history=nest.history + (format_step(kind, args, part),))
        return wrapper
    return deco


# --------------------------------------------------------------------------- #
# semantic-class transformations

def _reorder_band(band: Band, order: Sequence[str]) -> Band:
    old = band.names
    moved = [k for k in range(len(old)) if old[k] != order[k]]
    if not moved:
        return band
    lo, hi = moved[0], moved[-1]
    for s in band.statements:
        d = band.depth(s)
        # init statements between the loops become guarded; anything else is
        # imperfect nesting we refuse to permute
        if lo < d <= hi and (s.kind != "init" or s.slot != 0):
            raise NotPermutable(f"{s.id} sits between loops {old[lo]} and {old[hi]}")
    return Band(tuple(band.iter(n) for n in order), band.statements)


def _interchange(nest: LoopNest, *names: str, part: Optional[int] = None) -> LoopNest:
    if len(names) < 2:
        raise TransformError("interchange needs at least two iterators")
    if len(set(names)) == 1:
        _targets(nest, names[:1], part)
        return nest
    if len(set(names)) != len(names):
        raise TransformError(f"interchange lists an iterator twice: {names}")
    bands = list(nest.bands)
    for k in _targets(nest, names, part):
        band = bands[k]
        order = band.names
        if len(names) == 2:
            i, j = band.index(names[0]), band.index(names[1])
            order[i], order[j] = order[j], order[i]
        else:
            slots = sorted(band.index(n) for n in names)
            for pos, n in zip(slots, names):
                order[pos] = n
        bands[k] = _reorder_band(band, order)
    return nest.replace(bands=tuple(bands))


interchange = _recorded("interchange")(_interchange)
interchange.__doc__ = """Swap two loops, or put three or more loops into the listed order.

With more than two names the listed loops are permuted among the positions
they already occupy, so ``interchange(h, w, co)`` on ``[co, h, w, ...]``
yields ``[h, w, co, ...]``.
"""


def _strip_band(band: Band, i: str, f: int) -> tuple[Band, str, str]:
    it = band.iter(i)
    if it.trip % f:
        raise NonDivisible(f"trip count {it.trip} of {i} is not divisible by {f}")
    outer_name, inner_name = _fresh(band, f"{i}_o"), _fresh(band, f"{i}_i")
    outer = IterVar(outer_name, 0, it.trip // f, role=it.role)
    inner = IterVar(inner_name, 0, f, role=it.role, unroll=_carry_unroll(it.unroll, f))
    repl = Expr.var(outer_name) * (f * it.step) + Expr.var(inner_name) * it.step + it.lower
    p = band.index(i)
    its = band.iterators[:p] + (outer, inner) + band.iterators[p + 1:]
    stmts = []
    for s in band.statements:
        if i in s.iters:
            iters = tuple(x for n in s.iters for x in ((outer_name, inner_name) if n == i else (n,)))
            s = dataclasses.replace(s.subs({i: repl}), iters=iters)
        stmts.append(s)
    return _tidy(Band(its, tuple(stmts))), outer_name, inner_name


@_recorded("strip_mine")
def strip_mine(nest: LoopNest, i: str, f: int, part: Optional[int] = None) -> LoopNest:
    """Replace ``i`` by ``i_o`` and ``i_i`` with ``i = i_o*f + i_i``."""
    f = _check_factor(f, "strip-mine factor")
    bands = list(nest.bands)
    for k in _targets(nest, [i], part):
        bands[k] = _strip_band(bands[k], i, f)[0]
    return nest.replace(bands=tuple(bands))


@_recorded("tile")
def tile(nest: LoopNest, i: str, f: int, part: Optional[int] = None) -> LoopNest:
    """Strip-mine ``i`` and move the outer loop as far out as it may go."""
    f = _check_factor(f, "tile factor")
    bands = list(nest.bands)
    for k in _targets(nest, [i], part):
        band, outer, _ = _strip_band(bands[k], i, f)
        p = band.index(outer)
        for target in range(p + 1):
            order = band.names
            order.insert(target, order.pop(p))
            try:
                band = _reorder_band(band, order)
                break
            except NotPermutable:
                continue
        bands[k] = band
    return nest.replace(bands=tuple(bands))


@_recorded("unroll")
def unroll(nest: LoopNest, i: str, f: int, part: Optional[int] = None) -> LoopNest:
    """Annotate ``i`` with unroll factor ``f``; the computation is unchanged."""
    f = _check_factor(f, "unroll factor")
    bands = list(nest.bands)
    for k in _targets(nest, [i], part):
        band = bands[k]
        it = band.iter(i)
        if it.trip % f:
            raise NonDivisible(f"trip count {it.trip} of {i} is not divisible by {f}")
        its = tuple(x.replace(unroll=f) if x.name == i else x for x in band.iterators)
        bands[k] = Band(its, band.statements)
    return nest.replace(bands=tuple(bands))


@_recorded("fuse")
def fuse(nest: LoopNest, a: str, b: str, part: Optional[int] = None) -> LoopNest:
    """Merge adjacent loops ``a`` (outer) and ``b`` (inner) into ``a_b``."""
    bands = list(nest.bands)
    for k in _targets(nest, [a, b], part):
        band = bands[k]
        pa, pb = band.index(a), band.index(b)
        if pb != pa + 1:
            raise NotAdjacent(f"{b} is not immediately inside {a}")
        for s in band.statements:
            if (a in s.iters) != (b in s.iters):
                raise NotAdjacent(f"{s.id} sits between loops {a} and {b}")
        ia, ib = band.iter(a), band.iter(b)
        name = _fresh(band, f"{a}_{b}")
        v = Expr.var(name)
        repl = {a: v.floordiv(ib.trip) * ia.step + ia.lower,
                b: v.mod(ib.trip) * ib.step + ib.lower}
        fused = IterVar(name, 0, ia.trip * ib.trip)
        its = band.iterators[:pa] + (fused,) + band.iterators[pb + 1:]
        stmts = []
        for s in band.statements:
            if a in s.iters:
                iters = tuple(name if n == a else n for n in s.iters if n != b)
                s = dataclasses.replace(s.subs(repl), iters=iters)
            stmts.append(s)
        bands[k] = _tidy(Band(its, tuple(stmts)))
    return nest.replace(bands=tuple(bands))


def _fissionable(nest: LoopNest, band: Band, i: str) -> dict[str, tuple[int, int]]:
    """Read-only tensors indexed on exactly one axis by ``i + c``: name -> (axis, c)."""
    written = {root_tensor(nest, t) for t in nest.written_tensors()}
    found: dict[str, Optional[tuple[int, int]]] = {}
    for s in band.statements:
        for a in s.accesses:
            if root_tensor(nest, a.tensor) in written:
                continue
            axes = [ax for ax, e in enumerate(a.indices) if i in e.vars()]
            if not axes:
                continue
            e = a.indices[axes[0]]
            pure = len(axes) == 1 and e.is_linear and e.terms == ((i, 1),)
            key = (axes[0], e.const) if pure else None
            if a.tensor in found and found[a.tensor] != key:
                key = None
            found[a.tensor] = key
    return {t: v for t, v in found.items() if v is not None}


@_recorded("split")
def split(nest: LoopNest, i: str, parts: Sequence[int], part: Optional[int] = None) -> LoopNest:
    """Fission the nest along ``i`` into consecutive ranges of the given lengths.

    Statements that do not iterate over ``i`` stay in the first piece. Read
    tensors indexed purely by ``i`` are split into views so later per-part
    rewrites can reshape one piece without touching the others.
    """
    parts = [int(p) for p in parts]
    targets = _targets(nest, [i], part)
    bands: list[Band] = []
    tensors = list(nest.tensors)
    taken = {t.name for t in tensors}
    for k, band in enumerate(nest.bands):
        if k not in targets:
            bands.append(band)
            continue
        it = band.iter(i)
        if not parts or any(p <= 0 for p in parts) or sum(parts) != it.trip:
            raise BadPartition(f"parts {parts} do not partition the {it.trip} iterations of {i}")
        if len(parts) == 1:
            bands.append(band)
            continue
        fission = _fissionable(nest, band, i) if it.step == 1 else {}
        off = 0
        for q, length in enumerate(parts):
            lo = it.lower + it.step * off
            piece = it.replace(lower=lo, upper=lo + it.step * length,
                              unroll=_carry_unroll(it.unroll, length))
            renames: dict[str, tuple[str, int, int]] = {}
            for tname, (axis, c) in fission.items():
                decl = nest.tensor(tname)
                start = lo + c
                if start < 0 or start + length > decl.shape[axis]:
                    continue
                vname = f"{tname}{q}"
                n = 2
                while vname in taken:
                    vname = f"{tname}{q}_{n}"
                    n += 1
                taken.add(vname)
                shape = list(decl.shape)
                shape[axis] = length
                tensors.append(TensorDecl(vname, tuple(shape), decl.padded, (tname, axis, start)))
                renames[tname] = (vname, axis, start)
            stmts = []
            for s in band.statements:
                if i not in s.iters and q:
                    continue
                accs = []
                for a in s.accesses:
                    if a.tensor in renames:
                        vname, axis, start = renames[a.tensor]
                        idx = list(a.indices)
                        idx[axis] = idx[axis] - start
                        a = dataclasses.replace(a, tensor=vname, indices=tuple(idx))
                    accs.append(a)
                stmts.append(dataclasses.replace(s, accesses=tuple(accs)))
            its = tuple(piece if x.name == i else x for x in band.iterators)
            bands.append(Band(its, tuple(stmts)))
            off += length
    bands_t = _renumber(bands)
    return nest.replace(bands=bands_t, tensors=_prune(tensors, bands_t))


def _simplify(nest: LoopNest, names: Optional[Sequence[str]] = None,
              part: Optional[int] = None) -> LoopNest:
    if names:
        targets = _targets(nest, list(names), part)
    else:
        targets = list(range(len(nest.bands))) if part is None else _targets(nest, [], part)
    bands = list(nest.bands)
    for k in targets:
        band = bands[k]
        drop = [it for it in band.iterators if (it.name in names if names else it.trip == 1)]
        for it in drop:
            if it.trip != 1:
                raise TransformError(f"{it.name} has trip count {it.trip}; only unit loops can be removed")
        if not drop:
            continue
        repl = {it.name: Expr.constant(it.lower) for it in drop}
        gone = set(repl)
        stmts = tuple(dataclasses.replace(s.subs(repl), iters=tuple(n for n in s.iters if n not in gone))
                      for s in band.statements)
        bands[k] = _tidy(Band(tuple(it for it in band.iterators if it.name not in gone), stmts))
    return nest.replace(bands=tuple(bands))


simplify = _recorded("simplify")(_simplify)
simplify.__doc__ = "Remove unit-trip loops (all of them, or the named ones)."


# --------------------------------------------------------------------------- #
# neural-class transformations

TENSOR_ROLES = ("co", "ci", "h", "w")
_BOTTLENECK_FIELD = {"co": "bottleneck_out", "ci": "bottleneck_in"}


def _bottleneck(nest: LoopNest, i: str, B: int, part: Optional[int] = None) -> LoopNest:
    B = _check_factor(B, "bottleneck factor")
    targets = _targets(nest, [i], part)
    roles = {nest.bands[k].iter(i).role for k in targets}
    if roles & set(KERNEL_ROLES):
        raise KernelAxis(f"{i} is a kernel axis; bottlenecking it changes the operator family")
    if not roles <= set(TENSOR_ROLES):
        raise TransformError(f"bottleneck applies to channel or spatial iterators, not {i}")
    for k in targets:
        trip = nest.bands[k].iter(i).trip
        if trip % B:
            raise NonDivisible(f"trip count {trip} of {i} is not divisible by {B}")
    if B == 1:
        return nest
    decls, rewrites = _reshape_tensors(nest, targets, i, B, written_only_dense=True)
    bands = list(nest.bands)
    for k in targets:
        band = _apply_rewrites(bands[k], k, rewrites)
        it = band.iter(i)
        new_it = it.replace(upper=it.lower + it.step * (it.trip // B),
                            unroll=_carry_unroll(it.unroll, it.trip // B))
        bands[k] = _tidy(Band(tuple(new_it if x.name == i else x for x in band.iterators),
                              band.statements))
    out = nest.replace(bands=tuple(bands), tensors=_prune(_replace_decls(nest.tensors, decls), bands))
    p = nest.provenance
    (role,) = roles if len(roles) == 1 else (None,)
    cand = None
    if p is not None and role is not None:
        if role in _BOTTLENECK_FIELD:
            f = _BOTTLENECK_FIELD[role]
            cand = _try_spec(p, **{f: getattr(p, f) * B})
        else:
            bh, bw = p.bottleneck_spatial
            cand = _try_spec(p, bottleneck_spatial=(bh * B, bw) if role == "h" else (bh, bw * B))
    return out.replace(provenance=_verified(out, [cand]))


bottleneck = _recorded("bottleneck")(_bottleneck)
bottleneck.__doc__ = "Shrink the range of a channel or spatial iterator by ``B``."


def _group(nest: LoopNest, a: str, b: str, G: int, part: Optional[int] = None) -> LoopNest:
    G = _check_factor(G, "group factor")
    if a == b:
        raise TransformError("group needs two distinct iterators")
    targets = _targets(nest, [a, b], part)
    for k in targets:
        band = nest.bands[k]
        for n in (a, b):
            if band.iter(n).trip % G:
                raise NonDivisible(f"trip count {band.iter(n).trip} of {n} is not divisible by {G}")
        macs = [s for s in band.statements if s.kind == "mac"]
        if not any(a in s.target.vars() for s in band.statements):
            raise TransformError(f"{a} does not index the output, so it cannot be grouped")
        if not macs or any(b in s.target.vars() for s in macs) or not any(b in s.iters for s in macs):
            raise TransformError(f"{b} is not a reduction iterator, so it cannot be grouped")
    if G == 1:
        return nest
    # kernel tensors: read by an access touching both a and b; their b axis is
    # localised to the group and shrinks by G
    kernels: set[str] = set()
    for k in targets:
        for s in nest.bands[k].statements:
            for a_ in s.reads:
                if {a, b} <= a_.vars():
                    kernels.add(a_.tensor)
    decls, rewrites = _reshape_tensors(nest, targets, b, G, written_only_dense=False, only=kernels)
    for k in targets:
        for s in nest.bands[k].statements:
            for acc in s.reads:
                if acc.tensor in kernels:
                    for ax, e in enumerate(acc.indices):
                        if b in e.vars() and (k, str(acc), ax) not in rewrites:
                            raise NotDense(f"{acc} is not dense along {b}")
    bands = list(nest.bands)
    for k in targets:
        band = nest.bands[k]
        gname = _fresh(band, "g")
        gv = Expr.var(gname)
        ia, ib = band.iter(a), band.iter(b)
        sa, sb = ia.trip // G, ib.trip // G
        repl = {a: (gv * sa + Expr.var(a)) * ia.step + ia.lower,
                b: (gv * sb + Expr.var(b)) * ib.step + ib.lower}
        stmts = []
        for s in band.statements:
            accs = []
            for acc in s.accesses:
                idx = []
                for ax, e in enumerate(acc.indices):
                    key = (k, str(acc), ax)
                    if key in rewrites:
                        # local b index, a substituted as usual
                        idx.append(rewrites[key].subs({a: repl[a]}))
                    else:
                        idx.append(e.subs(repl))
                accs.append(dataclasses.replace(acc, indices=tuple(idx)))
            origin = tuple((n, e.subs(repl)) for n, e in s.origin)
            iters = s.iters
            if a in iters or b in iters:
                iters = (gname,) + iters
            stmts.append(dataclasses.replace(s, accesses=tuple(accs), origin=origin, iters=iters))
        new_its = [IterVar(gname, 0, G, role="g")]
        for it in band.iterators:
            if it.name in (a, b):
                trip = sa if it.name == a else sb
                it = IterVar(it.name, 0, trip, role=it.role, unroll=_carry_unroll(it.unroll, trip))
            new_its.append(it)
        bands[k] = _tidy(Band(tuple(new_its), tuple(stmts)))
    out = nest.replace(bands=tuple(bands), tensors=_prune(_replace_decls(nest.tensors, decls), bands))
    return out.replace(provenance=_verified(out, _group_candidates(nest, out, targets, G)))


def _group_candidates(old: LoopNest, new: LoopNest, targets: Sequence[int], G: int) -> list:
    p = old.provenance
    if p is None:
        return []
    cands = []
    if len(targets) == len(old.bands) and not p.channel_splits:
        cands.append(_try_spec(p, groups=p.groups * G))
    ranges = [_co_range(b) for b in new.bands]
    if None in ranges or len(ranges) < 2:
        return cands
    if ranges[0][0] != 0 or ranges[-1][1] != p.Co_eff or any(
            ranges[j][1] != ranges[j + 1][0] for j in range(len(ranges) - 1)):
        return cands
    existing = {r: g for (r, g) in p.channel_splits}
    splits = []
    for j, r in enumerate(ranges):
        if p.channel_splits:
            if r not in existing:
                return cands
            g = existing[r]
        elif p.groups == 1:
            g = 1
        else:
            return cands
        splits.append((r, g * G if j in targets else g))
    cands.append(_try_spec(p, groups=1, channel_splits=tuple(splits)))
    return cands


group = _recorded("group")(_group)
group.__doc__ = """Group iterators ``a`` (output side) and ``b`` (reduction side) by ``G``.

A new outermost loop ``g`` enumerates the groups; ``a`` and ``b`` become
slices of ``|a|/G`` and ``|b|/G`` iterations, and the kernel tensor keeps only
the weights of its own group along ``b``.
"""


@_recorded("depthwise")
def depthwise(nest: LoopNest, part: Optional[int] = None) -> LoopNest:
    """Group output and input channels by their common count, then drop the
    unit slice loops."""
    targets = _targets(nest, ["co", "ci"], part)
    for k in targets:
        band = nest.bands[k]
        tco, tci = band.iter("co").trip, band.iter("ci").trip
        if tco != tci:
            raise ChannelMismatch(f"depthwise needs as many output as input channels ({tco} vs {tci})")
    for k in targets:
        trip = nest.bands[k].iter("co").trip
        if trip == 1:
            continue
        nest = _group(nest, "co", "ci", trip, part=k)
        nest = _simplify(nest, ["co", "ci"], part=k)
    return nest


# --------------------------------------------------------------------------- #
# named compositions

def spatial_bottleneck(nest: LoopNest, b: int, part: Optional[int] = None) -> LoopNest:
    """Bottleneck both spatial axes by ``b`` through interchanges, as a sequence."""
    nest = interchange(nest, "h", "w", "co", part=part)
    nest = bottleneck(nest, "h", b, part=part)
    nest = interchange(nest, "h", "w", part=part)
    nest = bottleneck(nest, "w", b, part=part)
    return interchange(nest, "co", "h", "w", part=part)


def sequence1(nest: LoopNest, axis: str = "h", parts: int = 2, G: int = 2,
              part: Optional[int] = None) -> LoopNest:
    """split -> interchange -> group -> interchange -> fuse.

    The spatial domain is split along ``axis`` into ``parts`` equal pieces,
    each piece groups its channels by ``G`` with the group loop outermost, and
    the spatial loops are fused back into one.
    """
    trip = _first_trip(nest, axis, part)
    if trip % parts:
        raise BadPartition(f"{axis} has {trip} iterations, not divisible into {parts} parts")
    nest = split(nest, axis, [trip // parts] * parts, part=part)
    nest = interchange(nest, "co", "h")
    nest = group(nest, "co", "ci", G)
    nest = interchange(nest, "h", "co")
    return fuse(nest, "h", "w")


def sequence2(nest: LoopNest, u: int = 16, G: int = 2, part: Optional[int] = None) -> LoopNest:
    """unroll -> group -> interchange: unroll ``co`` by ``u``, group by ``G``,
    then move the group loop inside the channel slice loop."""
    nest = unroll(nest, "co", u, part=part)
    nest = group(nest, "co", "ci", G, part=part)
    return interchange(nest, "g", "co", part=part)


def sequence3(nest: LoopNest, G1: int = 2, G2: int = 4, part: Optional[int] = None) -> LoopNest:
    """split -> group -> interchange -> group: halve the output channels and
    group each half with its own factor."""
    trip = _first_trip(nest, "co", part)
    if trip % 2:
        raise BadPartition(f"co has {trip} iterations, which cannot be halved")
    k = 0 if part is None else part
    nest = split(nest, "co", [trip // 2, trip // 2], part=part)
    nest = group(nest, "co", "ci", G1, part=k)
    nest = interchange(nest, "g", "co", part=k)
    return group(nest, "co", "ci", G2, part=k + 1)


def _first_trip(nest: LoopNest, name: str, part: Optional[int]) -> int:
    k = _targets(nest, [name], part)[0]
    return nest.bands[k].iter(name).trip


# --------------------------------------------------------------------------- #
# registry and sequence DSL

@dataclass(frozen=True)
class TransformDef:
    name: str
    fn: Callable[..., LoopNest]
    cls: str
    arity: tuple[int, int]  # accepted positional argument counts (min, max)


REGISTRY: dict[str, TransformDef] = {}
ALIASES = {"reorder": "interchange", "strip": "strip_mine", "stripmine": "strip_mine",
           "strip-mine": "strip_mine"}


def register(name: str, fn: Callable[..., LoopNest], cls: str, arity: tuple[int, int]) -> None:
    if cls not in (SEMANTIC, NEURAL):
        raise ValueError("transform class must be semantic or neural")
    REGISTRY[name] = TransformDef(name, fn, cls, arity)


def unregister(name: str) -> None:
    REGISTRY.pop(name, None)


for _name, _fn, _cls, _arity in [
    ("interchange", interchange, SEMANTIC, (2, 16)),
    ("strip_mine", strip_mine, SEMANTIC, (2, 2)),
    ("tile", tile, SEMANTIC, (2, 2)),
    ("unroll", unroll, SEMANTIC, (2, 2)),
    ("fuse", fuse, SEMANTIC, (2, 2)),
    ("split", split, SEMANTIC, (2, 2)),
    ("simplify", simplify, SEMANTIC, (0, 16)),
    ("bottleneck", bottleneck, NEURAL, (2, 2)),
    ("group", group, NEURAL, (3, 3)),
    ("depthwise", depthwise, NEURAL, (0, 0)),
    ("spatial_bottleneck", spatial_bottleneck, NEURAL, (1, 1)),
    ("sequence1", sequence1, NEURAL, (0, 3)),
    ("sequence2", sequence2, NEURAL, (0, 2)),
    ("sequence3", sequence3, NEURAL, (0, 2)),
]:
    register(_name, _fn, _cls, _arity)


def transform_class(kind: str) -> str:
    kind = ALIASES.get(kind, kind)
    if kind not in REGISTRY:
        raise ParseError(f"unknown transformation {kind!r}")
    return REGISTRY[kind].cls


@dataclass(frozen=True)
class Transform:
    kind: str
    args: tuple = ()
    part: Optional[int] = None

    @property
    def cls(self) -> str:
        return transform_class(self.kind)

    def apply(self, nest: LoopNest) -> LoopNest:
        d = REGISTRY[ALIASES.get(self.kind, self.kind)]
        return d.fn(nest, *self.args, part=self.part)

    def __str__(self) -> str:
        return format_step(self.kind, self.args, self.part)


@dataclass(frozen=True)
class TransformSequence:
    steps: tuple[Transform, ...] = ()
    label: str = ""

    @staticmethod
    def parse(text: str, label: str = "") -> "TransformSequence":
        return parse_sequence(text, label)

    @property
    def classes(self) -> set[str]:
        return {t.cls for t in self.steps}

    def apply(self, nest: LoopNest) -> LoopNest:
        for idx, step in enumerate(self.steps):
            try:
                nest = step.apply(nest)
            except (TransformError, InvalidSpec) as exc:
                if isinstance(exc, SequenceError):
                    raise
                raise SequenceError(idx, str(step), exc) from exc
        return nest

    def validate(self, nest: LoopNest) -> "TransformSequence":
        self.apply(nest)
        return self

    def __str__(self) -> str:
        return " | ".join(str(t) for t in self.steps)

    def __len__(self) -> int:
        return len(self.steps)


_STEP = re.compile(r"^([a-z_][a-z0-9_\-]*)\s*(?:\((.*)\))?\s*(?:@\s*(\d+))?$")


def _split_args(body: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in body:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur)
            cur = ""
        else:
            cur += ch
    if depth:
        raise ParseError(f"unbalanced brackets in {body!r}")
    if cur.strip() or out:
        out.append(cur)
    return [a.strip() for a in out]


def _parse_arg(tok: str):
    if not tok:
        raise ParseError("empty argument")
    if tok.startswith("["):
        if not tok.endswith("]"):
            raise ParseError(f"bad list argument {tok!r}")
        return [_parse_arg(t) for t in _split_args(tok[1:-1])]
    if re.fullmatch(r"-?\d+", tok):
        return int(tok)
    if re.fullmatch(r"[a-z_][a-z0-9_]*", tok):
        return tok
    raise ParseError(f"bad argument {tok!r}")


def parse_step(text: str) -> Transform:
    m = _STEP.match(text.strip().lower())
    if not m:
        raise ParseError(f"cannot parse transformation step {text!r}")
    kind, body, part = m.group(1), m.group(2), m.group(3)
    kind = ALIASES.get(kind, kind)
    if kind not in REGISTRY:
        raise ParseError(f"unknown transformation {kind!r}")
    args = [_parse_arg(t) for t in _split_args(body)] if body is not None else []
    if kind == "split" and len(args) > 2:
        args = [args[0], args[1:]]
    if kind == "split" and len(args) == 2 and isinstance(args[1], int):
        args[1] = [args[1]]
    if kind == "split" and len(args) == 2:
        args[1] = tuple(args[1])
    lo, hi = REGISTRY[kind].arity
    if not lo <= len(args) <= hi:
        raise ParseError(f"{kind} takes {lo}..{hi} arguments, got {len(args)}")
    return Transform(kind, tuple(args), None if part is None else int(part))


def parse_sequence(text: str, label: str = "") -> TransformSequence:
    text = text.strip()
    if not text or text.lower() == "identity":
        return TransformSequence((), label)
    return TransformSequence(tuple(parse_step(s) for s in text.split("|")), label)


def apply_sequence(nest: LoopNest, seq) -> LoopNest:
    if isinstance(seq, str):
        seq = parse_sequence(seq)
    return seq.apply(nest)


NAMED_SEQUENCES = {
    "sequence1": sequence1,
    "sequence2": sequence2,
    "sequence3": sequence3,
    "spatial_bottleneck": spatial_bottleneck,
}


def history_classes(history: Sequence[str]) -> set[str]:
    out = set()
    for h in history:
        try:
            out.add(parse_step(h).cls)
        except NasXformError:
            out.add(NEURAL)
    return out


from .legality import (  # noqa: E402  (re-exported for convenience)
    LegalityResult,
    Verdict,
    check_semantic_legality,
    check_semantic_legality_bruteforce,
)
