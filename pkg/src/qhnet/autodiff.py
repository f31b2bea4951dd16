"""Tape-based reverse-mode differentiation over dense float64 arrays.

The op catalog is exactly what the model needs: affine maps, per-order
channel mixing, elementwise arithmetic, SiLU, concat/split/reshape,
segment norms, channel-wise inner products, path-wise tensor product /
tensor expansion against constant CG blocks, gather/scatter over atom and
pair indices, and reductions.  Each primitive records a pullback closure
on the tape; `backward` replays the tape once in reverse.

Tapes are per-evaluation and never shared between threads; parameter
gradient accumulation into a ParamStore happens at the end of `backward`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericalError


class ParamStore:
    """Named learnable arrays with matching gradient accumulators."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.values:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def names(self) -> list[str]:
        return list(self.values)

    def n_params(self) -> int:
        return sum(v.size for v in self.values.values())


class Node:
    """A value on the tape.  `value` is always a float64 ndarray."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)


class Tape:
    """Append-only record of one forward evaluation.

    Each entry is (output node, input nodes, pullback) where
    pullback(grad_out) yields one gradient (or None) per input node.
    """

    def __init__(self):
        self.entries: list[tuple[Node, tuple[Node, ...], Callable]] = []
        self.param_nodes: list[tuple[Node, ParamStore, str]] = []

    def record(self, out: Node, inputs: tuple[Node, ...], pullback: Callable) -> Node:
        self.entries.append((out, inputs, pullback))
        return out

    # -- leaves ------------------------------------------------------------

    def constant(self, value) -> Node:
        return Node(value)

    def param(self, store: ParamStore, name: str) -> Node:
        node = Node(store.values[name])
        self.param_nodes.append((node, store, name))
        return node

    # -- elementwise -------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        self._same_shape(a, b)
        return self.record(Node(a.value + b.value), (a, b), lambda g: (g, g))

    def add_n(self, nodes: Sequence[Node]) -> Node:
        nodes = tuple(nodes)
        if len(nodes) == 1:
            return nodes[0]
        for n in nodes[1:]:
            self._same_shape(nodes[0], n)
        total = nodes[0].value.copy()
        for n in nodes[1:]:
            total += n.value
        return self.record(Node(total), nodes, lambda g: (g,) * len(nodes))

    def sub(self, a: Node, b: Node) -> Node:
        self._same_shape(a, b)
        return self.record(Node(a.value - b.value), (a, b), lambda g: (g, -g))

    def mul(self, a: Node, b: Node) -> Node:
        self._same_shape(a, b)
        av, bv = a.value, b.value
        return self.record(Node(av * bv), (a, b), lambda g: (g * bv, g * av))

    def scale(self, a: Node, c: float) -> Node:
        return self.record(Node(a.value * c), (a,), lambda g: (g * c,))

    def silu(self, a: Node) -> Node:
        s = 1.0 / (1.0 + np.exp(-np.clip(a.value, -60.0, 60.0)))
        out = a.value * s
        dsilu = s * (1.0 + a.value * (1.0 - s))
        return self.record(Node(out), (a,), lambda g: (g * dsilu,))

    def sigmoid(self, a: Node) -> Node:
        s = 1.0 / (1.0 + np.exp(-np.clip(a.value, -60.0, 60.0)))
        return self.record(Node(s), (a,), lambda g: (g * s * (1.0 - s),))

    def absval(self, a: Node) -> Node:
        sign = np.sign(a.value)
        return self.record(Node(np.abs(a.value)), (a,), lambda g: (g * sign,))

    def sqrt(self, a: Node) -> Node:
        root = np.sqrt(a.value)
        return self.record(Node(root), (a,), lambda g: (g * 0.5 / root,))

    # -- shape plumbing ------------------------------------------------------

    def reshape(self, a: Node, shape: tuple[int, ...]) -> Node:
        old = a.value.shape
        return self.record(Node(a.value.reshape(shape)), (a,), lambda g: (g.reshape(old),))

    def concat(self, nodes: Sequence[Node], axis: int = -1) -> Node:
        nodes = tuple(nodes)
        sizes = [n.value.shape[axis] for n in nodes]
        splits = np.cumsum(sizes)[:-1]

        def pullback(g):
            return tuple(np.split(g, splits, axis=axis))

        return self.record(Node(np.concatenate([n.value for n in nodes], axis=axis)), nodes, pullback)

    def split(self, a: Node, sizes: Sequence[int], axis: int = -1) -> list[Node]:
        if sum(sizes) != a.value.shape[axis]:
            raise ContractViolation("split sizes do not cover the axis")
        pieces = np.split(a.value, np.cumsum(sizes)[:-1], axis=axis)
        outs = []
        offset = 0
        for size, piece in zip(sizes, pieces):
            lo = offset

            def pullback(g, lo=lo, size=size):
                full = np.zeros_like(a.value)
                idx = [slice(None)] * a.value.ndim
                idx[axis] = slice(lo, lo + size)
                full[tuple(idx)] = g
                return (full,)

            outs.append(self.record(Node(piece), (a,), pullback))
            offset += size
        return outs

    def take(self, a: Node, idx: np.ndarray, axis: int = 0) -> Node:
        idx = np.asarray(idx)

        def pullback(g):
            full = np.zeros_like(a.value)
            if axis == 0:
                np.add.at(full, idx, g)
            else:
                moved = np.moveaxis(full, axis, 0)
                np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            return (full,)

        return self.record(Node(np.take(a.value, idx, axis=axis)), (a,), pullback)

    def embed2d(self, a: Node, out_shape: tuple[int, ...], row: slice | np.ndarray, col: slice | np.ndarray) -> Node:
        """Place a (..., r, c) block into a zero (..., R, C) matrix at the given
        row/column index sets (used for Hamiltonian block placement)."""
        rows = np.arange(*row.indices(out_shape[-2])) if isinstance(row, slice) else np.asarray(row)
        cols = np.arange(*col.indices(out_shape[-1])) if isinstance(col, slice) else np.asarray(col)
        out = np.zeros(a.value.shape[:-2] + out_shape[-2:])
        out[..., rows[:, None], cols[None, :]] = a.value

        def pullback(g):
            return (g[..., rows[:, None], cols[None, :]],)

        return self.record(Node(out), (a,), pullback)

    def take2d(self, a: Node, rows: np.ndarray, cols: np.ndarray) -> Node:
        rows = np.asarray(rows)
        cols = np.asarray(cols)

        def pullback(g):
            full = np.zeros_like(a.value)
            full[..., rows[:, None], cols[None, :]] = g
            return (full,)

        return self.record(Node(a.value[..., rows[:, None], cols[None, :]]), (a,), pullback)

    # -- linear algebra -----------------------------------------------------

    def affine(self, x: Node, w: Node, b: Node | None = None) -> Node:
        """y = x @ w.T (+ b) over the trailing feature axis."""
        y = x.value @ w.value.T
        if b is not None:
            y = y + b.value

        def pullback(g):
            gx = g @ w.value
            gw = np.tensordot(g, x.value, axes=(range(g.ndim - 1), range(g.ndim - 1)))
            if b is None:
                return (gx, gw)
            gb = g.sum(axis=tuple(range(g.ndim - 1)))
            return (gx, gw, gb)

        inputs = (x, w) if b is None else (x, w, b)
        return self.record(Node(y), inputs, pullback)

    def channel_mix(self, w: Node, x: Node) -> Node:
        """Per-order self-interaction: (Cout, Cin) x (..., Cin, M) -> (..., Cout, M)."""
        y = np.einsum("dc,...cm->...dm", w.value, x.value)

        def pullback(g):
            gx = np.einsum("dc,...dm->...cm", w.value, g)
            gw = np.tensordot(g, x.value, axes=(
                tuple(range(g.ndim - 2)) + (g.ndim - 1,),
                tuple(range(x.value.ndim - 2)) + (x.value.ndim - 1,),
            ))
            return (gw, gx)

        return self.record(Node(y), (w, x), pullback)

    def seg_norm(self, x: Node, eps: float = 1e-12) -> Node:
        """Euclidean norm over the trailing m axis: (..., C, M) -> (..., C),
        with an epsilon guard keeping the gradient finite at zero."""
        n = np.sqrt(np.sum(x.value * x.value, axis=-1) + eps)

        def pullback(g):
            return ((g / n)[..., None] * x.value,)

        return self.record(Node(n), (x,), pullback)

    def cosine_sim(self, a: Node, b: Node, eps: float = 1e-12) -> Node:
        """Cosine similarity over the trailing axis: (..., C, M) x 2 -> (..., C).
        The epsilon keeps value and gradient finite when a segment is zero."""
        u = np.sum(a.value * b.value, axis=-1)
        na = np.sqrt(np.sum(a.value * a.value, axis=-1) + eps)
        nb = np.sqrt(np.sum(b.value * b.value, axis=-1) + eps)
        c = u / (na * nb)

        def pullback(g):
            ga = (g / (na * nb))[..., None] * b.value - (g * c / (na * na))[..., None] * a.value
            gb = (g / (na * nb))[..., None] * a.value - (g * c / (nb * nb))[..., None] * b.value
            return (ga, gb)

        return self.record(Node(c), (a, b), pullback)

    def inner(self, a: Node, b: Node, axes: int = 1) -> Node:
        """Sum-product over the trailing `axes` axes."""
        red = tuple(range(-axes, 0))
        out = np.sum(a.value * b.value, axis=red)

        def pullback(g):
            gexp = g.reshape(g.shape + (1,) * axes)
            return (gexp * b.value, gexp * a.value)

        return self.record(Node(out), (a, b), pullback)

    def scale_channels(self, s: Node, x: Node) -> Node:
        """(..., C) scale factors applied over (..., C, M)."""
        out = s.value[..., None] * x.value

        def pullback(g):
            return (np.sum(g * x.value, axis=-1), s.value[..., None] * g)

        return self.record(Node(out), (s, x), pullback)

    def channel_weight(self, w: Node, x: Node) -> Node:
        """Learned per-channel weight (C,) applied over (..., C, M)."""
        out = w.value[:, None] * x.value

        def pullback(g):
            prod = g * x.value
            gw = prod.sum(axis=tuple(range(prod.ndim - 2)) + (prod.ndim - 1,))
            return (gw, w.value[:, None] * g)

        return self.record(Node(out), (w, x), pullback)

    def bias_add(self, x: Node, b: Node) -> Node:
        """Add a trailing-shaped bias, broadcast over the leading axes."""
        nlead = x.value.ndim - b.value.ndim
        out = x.value + b.value

        def pullback(g):
            return (g, g.sum(axis=tuple(range(nlead))))

        return self.record(Node(out), (x, b), pullback)

    def broadcast_lead(self, x: Node, n: int) -> Node:
        """Repeat a leading axis of size 1 to size n."""
        if x.value.shape[0] != 1:
            raise ContractViolation("broadcast_lead expects a leading axis of size 1")
        out = np.broadcast_to(x.value, (n,) + x.value.shape[1:]).copy()
        return self.record(Node(out), (x,), lambda g: (g.sum(axis=0, keepdims=True),))

    def tp_path(self, cg_block: np.ndarray, u: Node, v: Node) -> Node:
        """Path-wise tensor product with a constant CG block:
        (..., 2l1+1) x (..., 2l2+1) -> (..., 2l3+1)."""
        na, nb, nc = cg_block.shape
        flat = cg_block.reshape(na * nb, nc)
        outer = u.value[..., :, None] * v.value[..., None, :]
        out = outer.reshape(outer.shape[:-2] + (na * nb,)) @ flat

        def pullback(g):
            gab = (g @ flat.T).reshape(g.shape[:-1] + (na, nb))
            gu = np.sum(gab * v.value[..., None, :], axis=-1)
            gv = np.sum(gab * u.value[..., :, None], axis=-2)
            return (gu, gv)

        return self.record(Node(out), (u, v), pullback)

    def pairwise_linear(self, t: np.ndarray, x: Node) -> Node:
        """Constant per-pair linear map (p, A, B) applied to (p, C, A) -> (p, C, B);
        this is the filter (CG block pre-contracted with spherical harmonics)."""
        out = x.value @ t
        tt = np.swapaxes(t, -1, -2)

        def pullback(g):
            return (g @ tt,)

        return self.record(Node(out), (x,), pullback)

    def expand_path(self, cg_block: np.ndarray, w: Node) -> Node:
        """Path-wise tensor expansion with a constant CG block:
        (..., 2l3+1) -> (..., 2l1+1, 2l2+1)."""
        na, nb, nc = cg_block.shape
        flat = cg_block.reshape(na * nb, nc)
        out = (w.value @ flat.T).reshape(w.value.shape[:-1] + (na, nb))

        def pullback(g):
            return (g.reshape(g.shape[:-2] + (na * nb,)) @ flat,)

        return self.record(Node(out), (w,), pullback)

    def path_blend(self, w: Node, f: Node) -> Node:
        """Expansion-filter contraction: (p, D, C) weights x (p, C, M) -> (p, D, M)."""
        out = w.value @ f.value

        def pullback(g):
            gw = g @ np.swapaxes(f.value, -1, -2)
            gf = np.swapaxes(w.value, -1, -2) @ g
            return (gw, gf)

        return self.record(Node(out), (w, f), pullback)

    def place_blocks(self, e: np.ndarray, x: Node) -> Node:
        """Scatter per-channel (a, b) blocks into a (R, C) matrix using a
        constant one-hot placement tensor e of shape (D, R, C, a, b)."""
        d, r, c, a, b = e.shape
        flat = e.transpose(0, 3, 4, 1, 2).reshape(d * a * b, r * c)
        out = (x.value.reshape(x.value.shape[:-3] + (d * a * b,)) @ flat).reshape(
            x.value.shape[:-3] + (r, c)
        )

        def pullback(g):
            gx = g.reshape(g.shape[:-2] + (r * c,)) @ flat.T
            return (gx.reshape(g.shape[:-2] + (d, a, b)),)

        return self.record(Node(out), (x,), pullback)

    def aggregate(self, a: np.ndarray, x: Node, axis: int) -> Node:
        """Sum pair-axis features into target bins: constant a (n_out, n_in)
        contracted with axis `axis` of x."""
        out = np.moveaxis(np.tensordot(a, x.value, axes=(1, axis)), 0, axis)

        def pullback(g):
            return (np.moveaxis(np.tensordot(a.T, np.moveaxis(g, axis, 0), axes=(1, 0)), 0, axis),)

        return self.record(Node(out), (x,), pullback)

    # -- reductions -----------------------------------------------------------

    def mean_axes(self, x: Node, axes: tuple[int, ...]) -> Node:
        axes = tuple(a % x.value.ndim for a in axes)
        count = int(np.prod([x.value.shape[a] for a in axes]))
        out = np.mean(x.value, axis=axes)

        def pullback(g):
            gexp = np.expand_dims(np.asarray(g), axes)
            return (np.broadcast_to(gexp / count, x.value.shape).copy(),)

        return self.record(Node(out), (x,), pullback)

    def mean_all(self, x: Node) -> Node:
        return self.mean_axes(x, tuple(range(x.value.ndim)))

    def sum_axis(self, x: Node, axis: int) -> Node:
        out = np.sum(x.value, axis=axis)

        def pullback(g):
            return (np.broadcast_to(np.expand_dims(g, axis), x.value.shape).copy(),)

        return self.record(Node(out), (x,), pullback)

    @staticmethod
    def _same_shape(a: Node, b: Node) -> None:
        if a.value.shape != b.value.shape:
            raise ContractViolation(f"shape mismatch {a.value.shape} vs {b.value.shape}")


def backward(tape: Tape, root: Node, seed: float = 1.0) -> None:
    """Accumulate d(root)/d(theta) into the ParamStore gradients of every
    parameter touched by the tape.  `root` must be scalar-valued."""
    if root.value.shape != ():
        raise ContractViolation("backward root must be a scalar")
    grads: dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=np.float64)}
    for out, inputs, pullback in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for node, gin in zip(inputs, pullback(g)):
            if gin is None:
                continue
            key = id(node)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
    for node, store, name in tape.param_nodes:
        g = grads.get(id(node))
        if g is not None:
            store.grads[name] += g


def gradcheck(
    f: Callable[[ParamStore, Tape], Node],
    store: ParamStore,
    eps: float = 1e-6,
    samples: int = 50,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare reverse-mode gradients of the scalar function `f` against
    central finite differences on randomly sampled parameter coordinates.

    Returns the worst relative error, with denominator
    max(|analytic|, |numeric|, 1e-12).
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ContractViolation(f"eps={eps} outside [1e-8, 1e-4]")
    rng = rng if rng is not None else np.random.default_rng(0)

    store.zero_grad()
    tape = Tape()
    root = f(store, tape)
    if not np.isfinite(root.value):
        raise NumericalError("gradcheck: non-finite function value")
    backward(tape, root)

    coords = []
    names = store.names()
    for _ in range(samples):
        name = names[rng.integers(len(names))]
        coords.append((name, int(rng.integers(store.values[name].size))))

    worst = 0.0
    for name, flat_idx in coords:
        vals = store.values[name]
        idx = np.unravel_index(flat_idx, vals.shape)
        keep = vals[idx]
        vals[idx] = keep + eps
        f_plus = float(f(store, Tape()).value)
        vals[idx] = keep - eps
        f_minus = float(f(store, Tape()).value)
        vals[idx] = keep
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericalError(f"gradcheck: non-finite value perturbing {name!r}")
        numeric = (f_plus - f_minus) / (2 * eps)
        analytic = store.grads[name][idx]
        denom = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
