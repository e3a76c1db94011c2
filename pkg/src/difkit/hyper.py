"""Batched execution of per-sample derivative networks from flat parameter vectors.

A derivative network is an MLP ``d -> w -> ... -> w -> d`` with a LayerNorm
before every hidden ReLU. Its parameters live in one flat vector of length
``m``; :class:`Layout` fixes where every tensor sits inside it.

Three execution modes compute identical values:

``non_vectorized``
    one network at a time, parameters sliced out of each row.
``copy_based``
    vectorized over the batch, but every segment is sliced, copied and
    reshaped on every call (a stateful-module style re-layout).
``reference_based``
    one persistent ``(B, m)`` buffer with fixed segment views built once; a
    call refreshes the buffer in place and the views see the new values.
    Segment gradients are written straight into a persistent gradient buffer.
"""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import grad as G
from .grad import Array

MODES = ("non_vectorized", "copy_based", "reference_based")


class LayoutMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DerivNetSpec:
    d: int = 2
    depth: int = 4
    width: int = 16

    def __post_init__(self):
        if self.depth < 2 or self.width < 1 or self.d < 1:
            raise ValueError(f"invalid derivative-network spec {self}")

    @property
    def dims(self) -> list[int]:
        return [self.d] + [self.width] * (self.depth - 1) + [self.d]


class Segment(NamedTuple):
    name: str
    shape: tuple
    offset: int
    length: int


@dataclass(frozen=True)
class Layout:
    segments: tuple[Segment, ...]
    spec: DerivNetSpec

    @property
    def m(self) -> int:
        last = self.segments[-1]
        return last.offset + last.length

    def __getitem__(self, name) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)


def build_layout(spec: DerivNetSpec) -> Layout:
    """Per layer: weight (in, out), bias, then norm scale and shift on hidden layers."""
    segs = []
    off = 0
    dims = spec.dims
    n_layers = len(dims) - 1
    for i in range(n_layers):
        shapes = [(f"l{i}.weight", (dims[i], dims[i + 1])), (f"l{i}.bias", (dims[i + 1],))]
        if i < n_layers - 1:
            shapes += [(f"l{i}.norm_scale", (dims[i + 1],)), (f"l{i}.norm_shift", (dims[i + 1],))]
        for name, shape in shapes:
            n = int(np.prod(shape))
            segs.append(Segment(name, shape, off, n))
            off += n
    return Layout(tuple(segs), spec)


def init_function_vector(layout: Layout, rng: np.random.Generator) -> np.ndarray:
    """A conventionally initialized parameter vector (uniform fan-in weights, unit norm scale)."""
    v = np.zeros(layout.m)
    for seg in layout.segments:
        sl = slice(seg.offset, seg.offset + seg.length)
        if seg.name.endswith("weight"):
            bound = 1.0 / np.sqrt(seg.shape[0])
            v[sl] = rng.uniform(-bound, bound, seg.length)
        elif seg.name.endswith("norm_scale"):
            v[sl] = 1.0
    return v


def _forward(params: list, x: Array, n_layers: int) -> Array:
    """``params``: per layer (w, b[, gamma, beta]) with a leading batch axis."""
    h = x
    for i, p in enumerate(params):
        h = G.affine(h, p[0], p[1])
        if i < n_layers - 1:
            h = G.relu(G.layer_norm(h, p[2], p[3]))
    return h


def _group(layout: Layout, tensors: list) -> list:
    out, cur = [], []
    for seg, t in zip(layout.segments, tensors):
        if seg.name.endswith("weight") and cur:
            out.append(cur)
            cur = []
        cur.append(t)
    out.append(cur)
    return out


def _segment_view(buf: Array, gbuf: np.ndarray, view: np.ndarray, seg: Segment) -> Array:
    lo, hi = seg.offset, seg.offset + seg.length
    B = view.shape[0]

    def bw(g):
        if buf.grad is None:
            buf.grad = gbuf
        buf.grad[:, lo:hi] += g.reshape(B, -1)
    return G.tensor._make(view, (buf,), "segment_view", bw)


class HyperExecutor:
    """Runs batches of derivative networks in one of the three modes.

    In ``reference_based`` mode a call overwrites the shared buffer, so the
    graph of the previous call must already have been back-propagated.
    """

    def __init__(self, layout: Layout, mode: str = "reference_based"):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.layout = layout
        self.mode = mode
        self.n_layers = len(layout.spec.dims) - 1
        self._buffers: dict[int, tuple] = {}
        self.calls = 0

    def buffer(self, B: int) -> np.ndarray:
        return self._reference_state(B)[0]

    def _reference_state(self, B: int):
        state = self._buffers.get(B)
        if state is None:
            buf = np.zeros((B, self.layout.m))
            gbuf = np.zeros((B, self.layout.m))
            views = [buf[:, s.offset:s.offset + s.length].reshape((B,) + s.shape)
                     for s in self.layout.segments]
            state = (buf, gbuf, views)
            self._buffers[B] = state
        return state

    def __call__(self, F, X) -> Array:
        F = G.as_array(F)
        X = G.as_array(X)
        if F.ndim != 2 or F.shape[1] != self.layout.m:
            raise LayoutMismatch(f"function vectors have shape {F.shape}, layout needs (B, {self.layout.m})")
        if X.shape[0] != F.shape[0] or X.shape[-1] != self.layout.spec.d:
            raise G.ShapeError("apply_batched", F.shape, X.shape)
        self.calls += 1
        return getattr(self, "_" + self.mode)(F, X)

    def _non_vectorized(self, F, X):
        outs = []
        for i in range(F.shape[0]):
            tensors = [G.reshape(G.slice_(F, (slice(i, i + 1), slice(s.offset, s.offset + s.length))),
                                 (1,) + s.shape)
                       for s in self.layout.segments]
            xi = G.slice_(X, slice(i, i + 1))
            outs.append(_forward(_group(self.layout, tensors), xi, self.n_layers))
        return G.concat(outs, axis=0)

    def _copy_based(self, F, X):
        B = F.shape[0]
        tensors = []
        for s in self.layout.segments:
            piece = G.slice_(F, (slice(None), slice(s.offset, s.offset + s.length)))
            fresh = _copy(piece)
            tensors.append(G.reshape(fresh, (B,) + s.shape))
        return _forward(_group(self.layout, tensors), X, self.n_layers)

    def _reference_based(self, F, X):
        buf, gbuf, views = self._reference_state(F.shape[0])
        np.copyto(buf, F.data)
        gbuf.fill(0.0)
        # Fresh graph node per call over the persistent storage.
        # gbuf is reused by the next call, so F receives a copy.
        node = G.tensor._make(buf, (F,), "param_buffer", lambda g: G.tensor._accum(F, g.copy()))
        if node.requires_grad:
            tensors = [_segment_view(node, gbuf, v, s) for v, s in zip(views, self.layout.segments)]
        else:
            tensors = [Array(v) for v in views]
        return _forward(_group(self.layout, tensors), X, self.n_layers)


def _copy(a: Array) -> Array:
    return G.tensor._make(np.array(a.data, copy=True), (a,), "copy", lambda g: G.tensor._accum(a, g))


def apply_batched(F, X, layout: Layout, mode: str = "reference_based",
                  executor: HyperExecutor | None = None) -> Array:
    """Row i of the result is network ``F[i]`` evaluated at ``X[i]``.

    ``X`` is (B, d) or (B, N, d) for N states per network.
    """
    if executor is None:
        executor = HyperExecutor(layout, mode)
    elif executor.mode != mode:
        raise ValueError(f"executor runs {executor.mode}, asked for {mode}")
    return executor(F, X)


def evaluate_numpy(F: np.ndarray, X: np.ndarray, layout: Layout) -> np.ndarray:
    """Gradient-free evaluation (same arithmetic as the graph modes)."""
    n_layers = len(layout.spec.dims) - 1
    B = F.shape[0]
    tensors = [Array(F[:, s.offset:s.offset + s.length].reshape((B,) + s.shape)) for s in layout.segments]
    return _forward(_group(layout, tensors), Array(X), n_layers).data


# benchmark -------------------------------------------------------------------

@dataclass
class BenchRow:
    mode: str
    first_step: float
    mean: float
    std: float
    speedup: float


def environment_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "omp_threads": os.environ.get("OMP_NUM_THREADS", "unset"),
        "openblas_threads": os.environ.get("OPENBLAS_NUM_THREADS", "unset"),
    }


def bench(modes=MODES, iterations: int = 200, batch: int = 32, spec: DerivNetSpec | None = None,
          n_points: int = 1, seed: int = 0) -> list[BenchRow]:
    """Per-iteration wall time of forward + backward through ``apply_batched``.

    The first iteration is reported separately and excluded from mean/std.
    Speedups are relative to ``non_vectorized`` when it was run, else to the
    first mode.
    """
    if iterations < 10:
        raise ValueError("bench needs at least 10 iterations")
    spec = spec or DerivNetSpec()
    layout = build_layout(spec)
    rng = np.random.default_rng(seed)
    Fs = [rng.normal(scale=0.3, size=(batch, layout.m)) for _ in range(4)]
    Xs = [rng.normal(size=(batch, n_points, spec.d)) for _ in range(4)]
    rows = []
    for mode in modes:
        ex = HyperExecutor(layout, mode)
        times = []
        for it in range(iterations):
            F = Array(Fs[it % 4], requires_grad=True)
            X = Array(Xs[it % 4])
            t0 = time.perf_counter()
            out = ex(F, X)
            loss = G.mean(G.mul(out, out))
            G.backward(loss)
            times.append(time.perf_counter() - t0)
        rest = times[1:]
        rows.append(BenchRow(mode, times[0], statistics.fmean(rest), statistics.pstdev(rest), 0.0))
    base = next((r for r in rows if r.mode == "non_vectorized"), rows[0])
    for r in rows:
        r.speedup = base.mean / r.mean
    return rows


BENCH_COLUMNS = ("implementation", "first_step_time_s", "avg_time_s", "std_time_s", "speedup")


def format_bench_table(rows: list[BenchRow]) -> str:
    lines = [f"{'Implementation':<18} {'First Step Time (s)':>20} {'Avg Time ± Std (s)':>24} {'Speedup':>8}"]
    for r in rows:
        avg = f"{r.mean:.4f} ± {r.std:.4f}"
        lines.append(f"{r.mode:<18} {r.first_step:>20.4f} {avg:>24} {r.speedup:>7.1f}x")
    return "\n".join(lines)


def format_bench_records(rows: list[BenchRow], fingerprint: dict | None = None) -> str:
    out = []
    for k, v in (fingerprint or {}).items():
        out.append(f"# {k}={v}")
    out.append("\t".join(BENCH_COLUMNS))
    for r in rows:
        out.append("\t".join([r.mode, repr(r.first_step), repr(r.mean), repr(r.std), repr(r.speedup)]))
    return "\n".join(out) + "\n"
