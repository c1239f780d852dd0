"""Reference interpreter for loop nests plus convolution oracles.

``execute`` is the vectorised interpreter: it sorts every statement instance
by timestamp and replays the effect of init and multiply-accumulate
statements per output cell. ``execute_sequential`` walks instances one by one
in plain Python and exists as an independent oracle for small nests.
``reference_conv`` transcribes the convolution sums directly with Python
loops; ``conv_numpy`` is a fast vectorised equivalent.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import (
    IndexOutOfRange,
    NasXformError,
    ParseError,
    RankMismatch,
    ShapeMismatch,
    UnboundTensor,
)
from .ir import ConvSpec, LoopNest, expand, resolve_access, root_tensor, schedule_rank, timestamps

EXEC_CAP = 5 * 10**6
MODES = {"int": np.int64, "float": np.float64}

Tensor = np.ndarray
WeightsLike = Union[np.ndarray, Sequence[np.ndarray]]


@dataclass
class ExecEnv:
    bindings: dict[str, np.ndarray] = field(default_factory=dict)
    mode: str = "int"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}")

    @property
    def dtype(self):
        return MODES[self.mode]


def _check_bindings(nest: LoopNest, env: ExecEnv) -> dict[str, np.ndarray]:
    written = {root_tensor(nest, t) for t in nest.written_tensors()}
    read = {root_tensor(nest, a.tensor) for s in nest.statements for a in s.reads}
    arrays: dict[str, np.ndarray] = {}
    for decl in nest.tensors:
        if decl.view_of is not None or (decl.name not in written and decl.name not in read):
            continue
        arr = env.bindings.get(decl.name)
        if arr is None:
            if decl.name in read:
                raise UnboundTensor(f"tensor {decl.name} is read but not bound")
            arr = np.zeros(decl.shape, dtype=env.dtype)
        arr = np.asarray(arr)
        if arr.ndim != len(decl.shape):
            raise RankMismatch(f"{decl.name}: bound rank {arr.ndim}, declared {len(decl.shape)}")
        if tuple(arr.shape) != tuple(decl.shape):
            raise ShapeMismatch(f"{decl.name}: bound shape {arr.shape}, declared {decl.shape}")
        arrays[decl.name] = arr.astype(env.dtype, copy=True)
    return arrays


def execute_all(nest: LoopNest, env: ExecEnv) -> dict[str, np.ndarray]:
    """Run ``nest`` and return the final value of every written tensor."""
    arrays = _check_bindings(nest, env)
    written = sorted({root_tensor(nest, t) for t in nest.written_tensors()})
    if any(root_tensor(nest, a.tensor) in written for s in nest.statements for a in s.reads):
        # a statement reads a tensor that is also written: order matters
        # beyond per-cell accumulation, so replay instance by instance
        return execute_sequential_all(nest, env)
    blocks = expand(nest, EXEC_CAP)
    rank = schedule_rank(timestamps(nest, blocks))
    events: dict[str, list] = {t: [] for t in written}
    offset = 0
    for blk in blocks:
        r = rank[offset:offset + blk.count]
        offset += blk.count
        target = blk.stmt.target
        tname, cells, _ = resolve_access(nest, blk, target)
        if blk.stmt.kind == "init":
            events[tname].append((r, cells, None))
            continue
        value = np.ones(blk.count, dtype=env.dtype)
        for a in blk.stmt.reads:
            rname, rcells, valid = resolve_access(nest, blk, a)
            v = arrays[rname].reshape(-1)[rcells]
            value = value * np.where(valid, v, 0)
        events[tname].append((r, cells, value))
    for tname in written:
        out = arrays[tname].reshape(-1)
        inits = [(r, c) for r, c, v in events[tname] if v is None]
        macs = [(r, c, v) for r, c, v in events[tname] if v is not None]
        last_init = np.full(out.size, -1, dtype=np.int64)
        for r, c in inits:
            np.maximum.at(last_init, c, r)
        out[last_init >= 0] = 0
        for r, c, v in macs:
            live = r > last_init[c]
            np.add.at(out, c[live], v[live])
        arrays[tname] = out.reshape(arrays[tname].shape)
    return {t: arrays[t] for t in written}


def execute(nest: LoopNest, env: ExecEnv) -> np.ndarray:
    """Run ``nest`` and return its (single) output tensor."""
    results = execute_all(nest, env)
    if len(results) != 1:
        raise NasXformError(f"nest writes {len(results)} tensors; use execute_all")
    return next(iter(results.values()))


def execute_sequential_all(nest: LoopNest, env: ExecEnv) -> dict[str, np.ndarray]:
    """Instance-by-instance interpreter in plain Python. Slow; an oracle."""
    arrays = _check_bindings(nest, env)
    blocks = expand(nest, 10**6)
    rank = schedule_rank(timestamps(nest, blocks))
    schedule = []
    offset = 0
    for blk in blocks:
        for i in range(blk.count):
            coord = {n: int(v[i]) for n, v in blk.coords.items()}
            schedule.append((int(rank[offset + i]), blk.stmt, coord))
        offset += blk.count
    schedule.sort(key=lambda t: t[0])

    def locate(name: str, idx: list[int], mode: str):
        decl = nest.tensor(name)
        for ax, (v, size) in enumerate(zip(idx, decl.shape)):
            if not 0 <= v < size:
                if decl.padded and mode == "read":
                    return None, None
                raise IndexOutOfRange(f"{name}[{idx}] axis {ax} outside [0, {size})")
        while decl.view_of is not None:
            parent, axis, off = decl.view_of
            idx = list(idx)
            idx[axis] += off
            decl = nest.tensor(parent)
        return decl.name, tuple(idx)

    for _, stmt, coord in schedule:
        tname, tidx = locate(stmt.target.tensor,
                             [int(e.evaluate(coord)) for e in stmt.target.indices], "write")
        if stmt.kind == "init":
            arrays[tname][tidx] = 0
            continue
        prod = 1
        for a in stmt.reads:
            rname, ridx = locate(a.tensor, [int(e.evaluate(coord)) for e in a.indices], "read")
            prod = prod * (0 if rname is None else arrays[rname][ridx])
        arrays[tname][tidx] += prod
    written = sorted({root_tensor(nest, t) for t in nest.written_tensors()})
    return {t: arrays[t] for t in written}


def execute_sequential(nest: LoopNest, env: ExecEnv) -> np.ndarray:
    results = execute_sequential_all(nest, env)
    if len(results) != 1:
        raise NasXformError(f"nest writes {len(results)} tensors")
    return next(iter(results.values()))


def count_macs(nest: LoopNest) -> int:
    total = 0
    for band in nest.bands:
        for s in band.statements:
            if s.kind != "mac":
                continue
            n = 1
            for name in s.iters:
                n *= band.iter(name).trip
            total += n
    return total


# --------------------------------------------------------------------------- #
# Convolution oracles

def _weights_list(spec: ConvSpec, weights: WeightsLike) -> list[np.ndarray]:
    if isinstance(weights, np.ndarray):
        weights = [weights]
    weights = [np.asarray(w) for w in weights]
    expected = spec.weight_shapes
    if len(weights) != len(expected):
        raise ShapeMismatch(f"expected {len(expected)} weight tensors, got {len(weights)}")
    for w, shape in zip(weights, expected):
        if tuple(w.shape) != shape:
            raise ShapeMismatch(f"weight shape {w.shape}, expected {shape}")
    return weights


def reference_conv(spec: ConvSpec, input: np.ndarray, weights: WeightsLike) -> np.ndarray:
    """Direct nested-sum convolution, grouped and bottlenecked per ``spec``.

    ``weights`` is one array of shape ``(Co_eff, Ci_eff/G, Kh, Kw)``, or one
    array per channel split. Written with scalar Python loops on purpose.
    """
    x = np.asarray(input)
    if tuple(x.shape) != spec.input_shape:
        raise ShapeMismatch(f"input shape {x.shape}, expected {spec.input_shape}")
    ws = _weights_list(spec, weights)
    dtype = np.result_type(x.dtype, *[w.dtype for w in ws])
    out = np.zeros(spec.output_shape, dtype=dtype)
    ci_eff, H, W = spec.input_shape
    for (a, b, G), w in zip(spec.parts, ws):
        per_out = (b - a) // G
        per_in = ci_eff // G
        for co in range(a, b):
            grp = (co - a) // per_out
            for y in range(spec.Ho_eff):
                for x_ in range(spec.Wo_eff):
                    acc = 0
                    for cl in range(per_in):
                        c = grp * per_in + cl
                        for kh in range(spec.Kh):
                            iy = spec.stride * y + kh - spec.pad
                            if not 0 <= iy < H:
                                continue
                            for kw in range(spec.Kw):
                                ix = spec.stride * x_ + kw - spec.pad
                                if 0 <= ix < W:
                                    acc += w[co - a, cl, kh, kw] * x[c, iy, ix]
                    out[co, y, x_] = acc
    return out


def conv_numpy(spec: ConvSpec, input: np.ndarray, weights: WeightsLike) -> np.ndarray:
    """Vectorised equivalent of :func:`reference_conv`; also accepts a batch axis."""
    x = np.asarray(input)
    batched = x.ndim == 4
    xb = x if batched else x[None]
    if tuple(xb.shape[1:]) != spec.input_shape:
        raise ShapeMismatch(f"input shape {x.shape}, expected {spec.input_shape}")
    ws = _weights_list(spec, weights)
    p = spec.pad
    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (spec.Kh, spec.Kw), axis=(2, 3))
    win = win[:, :, ::spec.stride, ::spec.stride][:, :, :spec.Ho_eff, :spec.Wo_eff]
    n = xb.shape[0]
    pieces = []
    for (a, b, G), w in zip(spec.parts, ws):
        per_out, per_in = (b - a) // G, spec.Ci_eff // G
        wg = w.reshape(G, per_out, per_in, spec.Kh, spec.Kw)
        xg = win.reshape(n, G, per_in, spec.Ho_eff, spec.Wo_eff, spec.Kh, spec.Kw)
        y = np.einsum("ngcyxij,gocij->ngoyx", xg, wg)
        pieces.append(y.reshape(n, b - a, spec.Ho_eff, spec.Wo_eff))
    out = np.concatenate(pieces, axis=1)
    return out if batched else out[0]


def weight_tensors(nest: LoopNest) -> list[str]:
    """Weight tensor read by each band's multiply-accumulate statement."""
    names = []
    for band in nest.bands:
        for s in band.statements:
            if s.kind == "mac":
                reads = [a.tensor for a in s.reads if root_tensor(nest, a.tensor) != "I"]
                if len(reads) != 1:
                    raise UnboundTensor("cannot identify the weight tensor of a part")
                names.append(reads[0])
    return names


def bind(nest: LoopNest, spec: ConvSpec, input: np.ndarray, weights: WeightsLike,
         mode: str = "int") -> ExecEnv:
    """Bindings that make ``nest`` compute ``spec`` on ``input`` and ``weights``.

    The nest's input root must be called ``I``. With one weight part every
    weight root receives it; with channel splits part ``k`` goes to band ``k``,
    written into the view's parent at the view offset when needed.
    """
    ws = _weights_list(spec, weights)
    env = ExecEnv({"I": np.asarray(input)}, mode)
    per_band = weight_tensors(nest)
    if len(ws) == 1:
        for name in per_band:
            env.bindings[root_tensor(nest, name)] = ws[0]
        return env
    if len(per_band) != len(ws):
        raise ShapeMismatch(f"{len(ws)} weight parts for {len(per_band)} nest parts")
    for name, w in zip(per_band, ws):
        decl = nest.tensor(name)
        if tuple(decl.shape) != tuple(w.shape):
            raise ShapeMismatch(f"{name}: declared {decl.shape}, part weights {w.shape}")
        if decl.view_of is None:
            env.bindings[name] = w
            continue
        slices = [slice(None)] * len(decl.shape)
        while decl.view_of is not None:
            parent, axis, off = decl.view_of
            s = slices[axis]
            start = (s.start or 0) + off
            slices[axis] = slice(start, start + (decl.shape[axis] if s.stop is None else s.stop - (s.start or 0)))
            decl = nest.tensor(parent)
        root = env.bindings.setdefault(decl.name, np.zeros(decl.shape, dtype=w.dtype))
        root[tuple(slices)] = w
    return env


def random_problem(spec: ConvSpec, rng: np.random.Generator, low: int = -8, high: int = 9):
    x = rng.integers(low, high, size=spec.input_shape, dtype=np.int64)
    ws = [rng.integers(low, high, size=s, dtype=np.int64) for s in spec.weight_shapes]
    return x, ws


def realizes(nest: LoopNest, spec: ConvSpec, seed: int = 0) -> bool:
    """True when executing ``nest`` computes exactly the convolution ``spec``.

    Checked on random integer tensors, so a false positive needs an exact
    coincidence of polynomial values.
    """
    try:
        if tuple(nest.tensor("O").shape) != spec.output_shape:
            return False
        if tuple(nest.tensor(root_tensor(nest, "I")).shape) != spec.input_shape:
            return False
        x, ws = random_problem(spec, np.random.default_rng(seed))
        env = bind(nest, spec, x, ws)
        got = execute(nest, env)
    except (NasXformError, KeyError):
        return False
    return bool(np.array_equal(got, conv_numpy(spec, x, ws)))


# --------------------------------------------------------------------------- #
# Tensor files

_MODE_TAGS = {0: np.dtype("<i8"), 1: np.dtype("<f8")}


def save_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    """Binary form: rank, dims (LE int64), mode tag (0 int64, 1 float64), data."""
    a = np.asarray(array)
    tag = 1 if np.issubdtype(a.dtype, np.floating) else 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<q", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}q", *a.shape))
        fh.write(struct.pack("<q", tag))
        fh.write(np.ascontiguousarray(a, dtype=_MODE_TAGS[tag]).tobytes())


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        (rank,) = struct.unpack_from("<q", raw, 0)
        if rank < 0 or rank > 16:
            raise ParseError(f"implausible tensor rank {rank}")
        dims = struct.unpack_from(f"<{rank}q", raw, 8)
        (tag,) = struct.unpack_from("<q", raw, 8 + 8 * rank)
    except struct.error as exc:
        raise ParseError(f"truncated tensor header: {exc}") from exc
    if tag not in _MODE_TAGS or any(d < 0 for d in dims):
        raise ParseError("bad tensor header")
    start = 16 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - start != 8 * count:
        raise ParseError(f"payload holds {(len(raw) - start) / 8} elements, header says {count}")
    return np.frombuffer(raw, dtype=_MODE_TAGS[tag], offset=start).reshape(dims).copy()


def format_tensor_text(array: np.ndarray) -> str:
    a = np.asarray(array)
    mode = "float64" if np.issubdtype(a.dtype, np.floating) else "int64"
    values = " ".join(repr(float(v)) if mode == "float64" else str(int(v)) for v in a.reshape(-1))
    return f"shape {' '.join(map(str, a.shape))}\nmode {mode}\n{values}\n"


def parse_tensor_text(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.strip().splitlines()]
    if len(lines) < 2 or not lines[0].startswith("shape") or not lines[1].startswith("mode"):
        raise ParseError("tensor text needs 'shape' and 'mode' lines")
    shape = tuple(int(t) for t in lines[0].split()[1:])
    mode = lines[1].split()[1]
    if mode not in ("int64", "float64"):
        raise ParseError(f"unknown element mode {mode}")
    tokens = " ".join(lines[2:]).split()
    conv = int if mode == "int64" else float
    data = np.array([conv(t) for t in tokens], dtype=mode)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ParseError(f"{data.size} values for shape {shape}")
    return data.reshape(shape)


def load_tensor_any(path: Union[str, Path]) -> np.ndarray:
    p = Path(path)
    if p.suffix in (".txt", ".tensor"):
        return parse_tensor_text(p.read_text())
    return load_tensor(p)
