"""Hypothesis strategies for small convolution descriptors."""
from __future__ import annotations

from hypothesis import strategies as st

from nasxform.errors import InvalidSpec
from nasxform.ir import ConvSpec


@st.composite
def conv_specs(draw, max_dim: int = 6, neural: bool = True) -> ConvSpec:
    g = draw(st.sampled_from([1, 2])) if neural else 1
    ci = g * draw(st.integers(1, max(1, max_dim // g)))
    co = g * draw(st.integers(1, max(1, max_dim // g)))
    k = draw(st.sampled_from([1, 2, 3]))
    h = draw(st.integers(k, max_dim))
    w = draw(st.integers(k, max_dim))
    stride = draw(st.sampled_from([1, 1, 2]))
    pad = draw(st.integers(0, k // 2))
    kw = dict(Ci=ci, Co=co, H=h, W=w, Kh=k, Kw=k, stride=stride, pad=pad, groups=g)
    if neural and draw(st.booleans()):
        b = draw(st.sampled_from([1, 2]))
        if co % (b * g) == 0:
            kw["bottleneck_out"] = b
    try:
        return ConvSpec(**kw)
    except InvalidSpec:
        return ConvSpec(Ci=ci, Co=co, H=h, W=w, Kh=k, Kw=k, groups=g)


SEMANTIC = ("interchange", "strip_mine", "tile", "unroll", "fuse", "split")


def random_semantic_steps(nest, rng, length: int, kinds=SEMANTIC):
    """Draw up to ``length`` applicable semantic steps; returns (steps, nest)."""
    from nasxform.errors import NasXformError
    from nasxform.transforms import parse_step

    steps = []
    for _ in range(length):
        for _attempt in range(20):
            k = int(rng.integers(len(nest.bands)))
            band = nest.bands[k]
            names = band.names
            at = f"@{k}" if len(nest.bands) > 1 else ""
            kind = kinds[int(rng.integers(len(kinds)))]
            a = names[int(rng.integers(len(names)))]
            trip = band.iter(a).trip
            divisors = [d for d in range(1, trip + 1) if trip % d == 0]
            f = divisors[int(rng.integers(len(divisors)))]
            if kind == "interchange":
                b = names[int(rng.integers(len(names)))]
                step = f"interchange({a},{b})"
            elif kind in ("strip_mine", "tile", "unroll"):
                step = f"{kind}({a},{f})"
            elif kind == "fuse":
                p = band.index(a)
                if p + 1 >= len(names):
                    continue
                step = f"fuse({a},{names[p + 1]})"
            else:
                if trip < 2:
                    continue
                cut = int(rng.integers(1, trip))
                step = f"split({a},[{cut},{trip - cut}])"
            try:
                nest = parse_step(step + at).apply(nest)
            except NasXformError:
                continue
            steps.append(step + at)
            break
    return steps, nest
