"""Dependence-preservation check for semantic rewrites.

Instances of the two nests are matched by their base statement id and their
coordinates in the original iteration space (each statement carries an
``origin`` map for this). The fast check never materialises dependence pairs:
for every written cell it orders the accesses of the original schedule into
segments (a write is a segment of its own, consecutive read-modify-writes
share one, consecutive reads share one) and requires the transformed schedule
to visit those segments in the same order. That is exactly "every dependence
is preserved, accumulation chains may be reordered".
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ir import (
    DEFAULT_INSTANCE_CAP,
    Block,
    LoopNest,
    compute_dependences,
    expand,
    lex_order,
    origin_coords,
    resolve_access,
    root_tensor,
    schedule_rank,
    timestamps,
)


class Verdict(str, enum.Enum):
    LEGAL = "legal"
    ILLEGAL = "illegal"
    NOT_APPLICABLE = "not-applicable"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class LegalityResult:
    verdict: Verdict
    reason: str = ""
    instances: int = 0

    @property
    def legal(self) -> bool:
        return self.verdict is Verdict.LEGAL

    def __bool__(self) -> bool:
        return self.legal


_MODE_CODE = {"read": 0, "write": 1, "rmw": 2}


@dataclass
class _Table:
    ident: np.ndarray    # (n, 1 + len(origin names)) identity rows
    rank: np.ndarray     # (n,) schedule position
    tensor: np.ndarray   # (n, max_acc) root tensor code, -1 for none
    cell: np.ndarray     # (n, max_acc) flat cell, -1 where a padded read misses
    mode: np.ndarray     # (n, max_acc)


def _table(nest: LoopNest, blocks: list[Block], bases: dict[str, int], names: list[str],
           tensors: dict[str, int], max_acc: int) -> _Table:
    rank = schedule_rank(timestamps(nest, blocks))
    n = int(sum(b.count for b in blocks))
    ident = np.zeros((n, 1 + len(names)), dtype=np.int64, order="F")
    tensor = np.full((n, max_acc), -1, dtype=np.int64)
    cell = np.full((n, max_acc), -1, dtype=np.int64)
    mode = np.full((n, max_acc), -1, dtype=np.int64)
    off = 0
    for blk in blocks:
        sl = slice(off, off + blk.count)
        ident[sl, 0] = bases[blk.stmt.base]
        for j, col in enumerate(origin_coords(blk, names)):
            ident[sl, 1 + j] = col
        for j, a in enumerate(blk.stmt.accesses):
            tname, cells, valid = resolve_access(nest, blk, a, on_overrun="mask")
            tensor[sl, j] = tensors.setdefault(tname, len(tensors))
            cell[sl, j] = np.where(valid, cells, -1)
            mode[sl, j] = _MODE_CODE[a.mode]
        off += blk.count
    return _Table(ident, rank, tensor, cell, mode)


def _by_cell_then_rank(key: np.ndarray, rank: np.ndarray) -> np.ndarray:
    n = int(rank.max()) + 1
    if int(key.max()) < 2 ** 62 // n:
        return np.argsort(key * n + rank, kind="stable")
    return np.lexsort((rank, key))


def _neural_steps(original: LoopNest, transformed: LoopNest) -> list[str]:
    from .transforms import history_classes, NEURAL

    h0, h1 = original.history, transformed.history
    steps = h1[len(h0):] if h1[:len(h0)] == h0 else h1
    return [s for s in steps if NEURAL in history_classes([s])]


def _codes(nest: LoopNest) -> tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]:
    bases = tuple(sorted({st.base for st in nest.statements}))
    names = tuple(sorted({n for st in nest.statements for n, _ in st.origin}))
    roots = tuple(sorted({root_tensor(nest, a.tensor) for st in nest.statements for a in st.accesses}))
    return bases, names, roots


@functools.lru_cache(maxsize=256)
def _own_table(nest: LoopNest, cap: Optional[int]) -> tuple[tuple, _Table]:
    """Table of one nest under codes derived from that nest alone; rewrites
    that keep statements, origins and tensors reuse it across checks."""
    bases, names, roots = codes = _codes(nest)
    max_acc = max(len(st.accesses) for st in nest.statements)
    tensors = {r: k for k, r in enumerate(roots)}
    return codes, _table(nest, expand(nest, cap), {b: k for k, b in enumerate(bases)}, list(names),
                         tensors, max_acc)


def _joint_tables(original: LoopNest, transformed: LoopNest, cap: Optional[int]) -> tuple[_Table, _Table]:
    ob, tb = expand(original, cap), expand(transformed, cap)
    bases: dict[str, int] = {}
    for st in list(original.statements) + list(transformed.statements):
        bases.setdefault(st.base, len(bases))
    names = sorted({n for nest in (original, transformed) for st in nest.statements for n, _ in st.origin})
    max_acc = max(len(st.accesses) for nest in (original, transformed) for st in nest.statements)
    tensors: dict[str, int] = {}
    return (_table(original, ob, bases, names, tensors, max_acc),
            _table(transformed, tb, bases, names, tensors, max_acc))


def _match(original: LoopNest, transformed: LoopNest, cap: Optional[int]):
    """Instance tables of both nests plus the transformed index of each original instance."""
    codes_o, to = _own_table(original, cap)
    codes_t, tt = _own_table(transformed, cap)
    if codes_o != codes_t or to.cell.shape[1] != tt.cell.shape[1]:
        to, tt = _joint_tables(original, transformed, cap)
    if len(to.rank) != len(tt.rank):
        return to, tt, None, f"instance count changed from {len(to.rank)} to {len(tt.rank)}"
    oo = lex_order(to.ident)
    ot = lex_order(tt.ident)
    so, st = to.ident[oo], tt.ident[ot]
    if not np.array_equal(so, st):
        return to, tt, None, "the rewritten nest executes a different set of statement instances"
    if len(so) > 1 and not np.any(so[1:] != so[:-1], axis=1).all():
        return to, tt, None, "statement instances are not uniquely identified by their origin"
    t_of_o = np.empty(len(oo), dtype=np.int64)
    t_of_o[oo] = ot
    return to, tt, t_of_o, ""


def check_semantic_legality(original: LoopNest, transformed: LoopNest,
                            cap: Optional[int] = DEFAULT_INSTANCE_CAP) -> LegalityResult:
    """LEGAL iff ``transformed`` runs the same instances with every dependence
    of ``original`` still ordered source before sink (accumulations into one
    cell may be reordered). NOT_APPLICABLE when neural rewrites were applied."""
    if _neural_steps(original, transformed):
        return LegalityResult(Verdict.NOT_APPLICABLE, "neural transformations change the computed function")
    to, tt, t_of_o, why = _match(original, transformed, cap)
    n = len(to.rank)
    if t_of_o is None:
        return LegalityResult(Verdict.ILLEGAL, why, n)
    same = (np.array_equal(to.tensor, tt.tensor[t_of_o]) and np.array_equal(to.cell, tt.cell[t_of_o])
            and np.array_equal(to.mode, tt.mode[t_of_o]))
    if not same:
        return LegalityResult(Verdict.ILLEGAL, "access functions changed for some instances", n)

    written = to.mode > 0
    wcodes = np.unique(to.tensor[written])
    sel = np.isin(to.tensor, wcodes) & (to.cell >= 0)
    inst, acc = np.nonzero(sel)
    if len(inst) == 0:
        return LegalityResult(Verdict.LEGAL, "", n)
    ncell = int(to.cell.max()) + 1
    key = to.tensor[inst, acc] * ncell + to.cell[inst, acc]
    mode = to.mode[inst, acc]
    r_orig = to.rank[inst]
    r_new = tt.rank[t_of_o[inst]]

    order = _by_cell_then_rank(key, r_orig)
    k_o, m_o = key[order], mode[order]
    start = np.ones(len(order), dtype=bool)
    start[1:] = (k_o[1:] != k_o[:-1]) | (m_o[1:] != m_o[:-1]) | (m_o[1:] == 1) | (m_o[:-1] == 1)
    segment = np.empty(len(order), dtype=np.int64)
    segment[order] = np.cumsum(start)

    order2 = _by_cell_then_rank(key, r_new)
    k_t, seg_t = key[order2], segment[order2]
    bad = (k_t[1:] == k_t[:-1]) & (seg_t[1:] < seg_t[:-1])
    if bad.any():
        j = int(np.flatnonzero(bad)[0])
        a, b = inst[order2[j]], inst[order2[j + 1]]
        return LegalityResult(
            Verdict.ILLEGAL,
            f"dependence reversed between original instances #{int(to.rank[b])} and #{int(to.rank[a])}",
            n)
    return LegalityResult(Verdict.LEGAL, "", n)


def check_semantic_legality_bruteforce(original: LoopNest, transformed: LoopNest,
                                       cap: Optional[int] = 20000) -> LegalityResult:
    """Reference check from the explicit dependence set; small nests only."""
    if _neural_steps(original, transformed):
        return LegalityResult(Verdict.NOT_APPLICABLE, "neural transformations change the computed function")
    to, tt, t_of_o, why = _match(original, transformed, cap)
    if t_of_o is None:
        return LegalityResult(Verdict.ILLEGAL, why, len(to.rank))
    blocks = expand(original, cap)
    index: dict[tuple[str, tuple[int, ...]], int] = {}
    kinds = {s.id: s.kind for s in original.statements}
    off = 0
    for blk in blocks:
        cols = [blk.coords[n] for n in blk.stmt.iters]
        for i in range(blk.count):
            index[(blk.stmt.id, tuple(int(c[i]) for c in cols))] = off + i
        off += blk.count
    if not (np.array_equal(to.tensor, tt.tensor[t_of_o]) and np.array_equal(to.cell, tt.cell[t_of_o])):
        return LegalityResult(Verdict.ILLEGAL, "access functions changed for some instances", len(to.rank))
    new_rank = tt.rank[t_of_o]
    for dep in compute_dependences(original, cap):
        if kinds[dep.src_stmt] == "mac" and kinds[dep.dst_stmt] == "mac":
            continue
        src = index[(dep.src_stmt, dep.src_coord)]
        dst = index[(dep.dst_stmt, dep.dst_coord)]
        if new_rank[src] > new_rank[dst]:
            return LegalityResult(Verdict.ILLEGAL, f"dependence {dep} reversed", len(to.rank))
    return LegalityResult(Verdict.LEGAL, "", len(to.rank))

