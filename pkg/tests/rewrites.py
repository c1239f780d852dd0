"""Hand-built schedules that break the original ordering of a conv nest.

Each helper takes the plain nest of a dense, ungrouped convolution and
returns a nest with the same instances and access maps but a schedule that
reverses at least one dependence.
"""
from __future__ import annotations

import dataclasses

from nasxform.ir import Band, LoopNest


def _stmts(nest: LoopNest):
    s1, s2 = nest.bands[0].statements
    return s1, s2


def init_after_use(nest: LoopNest) -> LoopNest:
    """The initialisation runs after the reduction loops of its point."""
    s1, s2 = _stmts(nest)
    band = Band(nest.bands[0].iterators, (dataclasses.replace(s1, slot=2), s2))
    return nest.replace(bands=(band,))


def init_in_later_band(nest: LoopNest) -> LoopNest:
    """Fission with all reductions first and every initialisation afterwards."""
    s1, s2 = _stmts(nest)
    its = nest.bands[0].iterators
    return nest.replace(bands=(Band(its, (s2,)), Band(its, (s1,))))


def reversed_split(nest: LoopNest, name: str = "ci") -> LoopNest:
    """Split ``name`` in halves and run the upper half before the lower one.

    The lower band keeps the initialisation, so the upper half's
    accumulations run before the cell has been cleared.
    """
    s1, s2 = _stmts(nest)
    band = nest.bands[0]
    it = band.iter(name)
    mid = it.lower + it.trip // 2
    lo = tuple(x.replace(upper=mid) if x.name == name else x for x in band.iterators)
    hi = tuple(x.replace(lower=mid) if x.name == name else x for x in band.iterators)
    upper = Band(hi, (dataclasses.replace(s2, id="S2.1"),))
    return nest.replace(bands=(upper, Band(lo, (s1, s2))))


def interleaved_split(nest: LoopNest) -> LoopNest:
    """Reductions for the lower output channels before all initialisations."""
    s1, s2 = _stmts(nest)
    band = nest.bands[0]
    it = band.iter("co")
    mid = it.lower + it.trip // 2
    lo = tuple(x.replace(upper=mid) if x.name == "co" else x for x in band.iterators)
    hi = tuple(x.replace(lower=mid) if x.name == "co" else x for x in band.iterators)
    return nest.replace(bands=(
        Band(lo, (s2,)),
        Band(band.iterators, (dataclasses.replace(s1, id="S1.1"),)),
        Band(hi, (dataclasses.replace(s2, id="S2.2"),)),
    ))


def sink_before_source(nest: LoopNest) -> LoopNest:
    """Rows ``h >= mid`` accumulate in a band placed before the band that
    initialises every row."""
    s1, s2 = _stmts(nest)
    band = nest.bands[0]
    it = band.iter("h")
    mid = it.lower + it.trip // 2
    lo = tuple(x.replace(upper=mid) if x.name == "h" else x for x in band.iterators)
    hi = tuple(x.replace(lower=mid) if x.name == "h" else x for x in band.iterators)
    return nest.replace(bands=(
        Band(hi, (dataclasses.replace(s2, id="S2.1"),)),
        Band(band.iterators, (s1,)),
        Band(lo, (s2,)),
    ))


INJECTED = {
    "init-after-use": init_after_use,
    "init-in-later-band": init_in_later_band,
    "reversed-ci-split": reversed_split,
    "reversed-kh-split": lambda n: reversed_split(n, "kh"),
    "interleaved-co-split": interleaved_split,
    "sink-before-source": sink_before_source,
}
