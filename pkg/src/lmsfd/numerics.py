"""Dense 2-D reverse-mode differentiation on top of numpy.

Every value is a float64 matrix. A :class:`Node` records its parents and a
closure that pushes its gradient back into them; :meth:`Node.backward` walks
the graph in reverse topological order. Graphs are rebuilt for every step.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateBatchError(ValueError):
    """Raised when a reduction has no positions to average over."""


class NumericError(ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a 2-D float64 array (scalars become 1x1)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


class Node:
    """A differentiable value in a computation graph.

    Leaf nodes created with ``requires_grad=True`` are parameters and keep
    their accumulated gradient between calls until :meth:`zero_grad`.
    """

    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "detached", "name")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = as_matrix(value)
        self._grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.detached = False
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a 1x1 node, got {self.shape}")
        return float(self.value[0, 0])

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(node) into every ancestor's ``grad``."""
        if seed is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed needs a 1x1 node")
            seed = np.ones_like(self.value)
        order = _topological(self)
        self.accumulate(seed)
        for node in reversed(order):
            if node._backward is None or node._grad is None:
                continue
            node._backward(node._grad)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape})"

    # operator sugar for tests and small scripts
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _push(node: Node, g: np.ndarray) -> None:
    if node.requires_grad:
        node.accumulate(g)


def detach(a: Node) -> Node:
    """Same value as ``a``; no gradient ever flows back through it."""
    out = Node(a.value)
    out.detached = True
    return out


# ---------------------------------------------------------------------------
# linear algebra and elementwise ops


def matmul(a: Node, b: Node) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ bv.T)
        if b.requires_grad:
            b.accumulate(av.T @ g)

    return Node(av @ bv, (a, b), backward)


def transpose(a: Node) -> Node:
    return Node(a.value.T, (a,), lambda g: _push(a, g.T))


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may also be a 1xn row added to every row of ``a``."""
    a, b = _lift(a), _lift(b)
    if a.shape == b.shape:

        def backward(g):
            _push(a, g)
            _push(b, g)

    elif b.shape == (1, a.shape[1]):

        def backward(g):
            _push(a, g)
            _push(b, g.sum(axis=0, keepdims=True))

    else:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")
    return Node(a.value + b.value, (a, b), backward)


def sub(a: Node, b: Node) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def backward(g):
        _push(a, g)
        _push(b, -g)

    return Node(a.value - b.value, (a, b), backward)


def mul(a: Node, b: Node) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        _push(a, g * bv)
        _push(b, g * av)

    return Node(av * bv, (a, b), backward)


def scale(a: Node, s: float) -> Node:
    s = float(s)
    return Node(a.value * s, (a,), lambda g: _push(a, g * s))


def scale_rows(a: Node, s: Node) -> Node:
    """Multiply row ``i`` of ``a`` by the scalar ``s[i, 0]``."""
    s = _lift(s)
    if s.shape != (a.shape[0], 1):
        raise ShapeError(f"scale_rows needs an {a.shape[0]}x1 factor, got {s.shape}")
    av, sv = a.value, s.value

    def backward(g):
        _push(a, g * sv)
        _push(s, (g * av).sum(axis=1, keepdims=True))

    return Node(av * sv, (a, s), backward)


def relu(a: Node) -> Node:
    on = a.value > 0
    return Node(np.where(on, a.value, 0.0), (a,), lambda g: _push(a, g * on))


def total(a: Node) -> Node:
    """Sum of all entries, as a 1x1 node."""
    shape = a.shape
    return Node(a.value.sum(), (a,), lambda g: _push(a, np.full(shape, g[0, 0])))


def add_all(nodes: Iterable[Node]) -> Node:
    nodes = list(nodes)
    out = nodes[0]
    for n in nodes[1:]:
        out = add(out, n)
    return out


# ---------------------------------------------------------------------------
# indexing


def take_rows(a: Node, idx) -> Node:
    """Gather rows ``a[idx]``; repeated indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def backward(g):
        if a.requires_grad:
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            a.accumulate(full)

    return Node(a.value[idx], (a,), backward)


def scatter_rows(a: Node, idx, n_rows: int) -> Node:
    """Place the rows of ``a`` at positions ``idx`` of an ``n_rows`` zero matrix."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(idx) != a.shape[0]:
        raise ShapeError(f"scatter_rows: {len(idx)} indices for {a.shape[0]} rows")
    out = np.zeros((n_rows, a.shape[1]))
    out[idx] = a.value
    return Node(out, (a,), lambda g: _push(a, g[idx]))


def cols(a: Node, start: int, stop: int) -> Node:
    shape = a.shape

    def backward(g):
        if a.requires_grad:
            full = np.zeros(shape)
            full[:, start:stop] = g
            a.accumulate(full)

    return Node(a.value[:, start:stop], (a,), backward)


def hcat(nodes: Sequence[Node]) -> Node:
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ShapeError(f"hcat needs equal row counts, got {[n.shape for n in nodes]}")
    edges = np.cumsum([0] + [n.shape[1] for n in nodes])

    def backward(g):
        for n, lo, hi in zip(nodes, edges[:-1], edges[1:]):
            _push(n, g[:, lo:hi])

    return Node(np.hstack([n.value for n in nodes]), nodes, backward)


# ---------------------------------------------------------------------------
# row-wise normalizations


def layer_norm(a: Node, gain: Node, bias: Node) -> Node:
    """Normalize each row to zero mean / unit variance, then ``gain * x + bias``.

    ``gain`` and ``bias`` are 1xn rows. A constant row normalizes to zeros.
    """
    n = a.shape[1]
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise ShapeError(f"layer_norm params must be 1x{n}, got {gain.shape}, {bias.shape}")
    x = a.value
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    gv = gain.value

    def backward(g):
        _push(gain, (g * xhat).sum(axis=0, keepdims=True))
        _push(bias, g.sum(axis=0, keepdims=True))
        if a.requires_grad:
            gx = g * gv
            a.accumulate(
                inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
            )

    return Node(xhat * gv + bias.value, (a, gain, bias), backward)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_rows(a: Node, mask: np.ndarray | None = None) -> Node:
    """Row-wise softmax. ``mask`` is an additive constant (``-inf`` hides an entry)."""
    x = a.value if mask is None else a.value + mask
    s = _softmax(x)

    def backward(g):
        _push(a, s * (g - (g * s).sum(axis=1, keepdims=True)))

    return Node(s, (a,), backward)


def segment_attention(
    q: Node,
    k: Node,
    v: Node,
    seg_q,
    pos_q,
    seg_k,
    pos_k,
    n_heads: int = 1,
    causal: bool = False,
) -> Node:
    """Multi-head scaled dot-product attention over packed token rows.

    Row ``i`` of ``q`` attends only to rows of ``k``/``v`` with the same
    segment id (and, when ``causal``, position ``<= pos_q[i]``). Equivalent to
    per-head ``softmax_rows(q k^T / sqrt(h), block mask) @ v`` followed by
    ``hcat``, but computed on padded ``segments x heads x len x h`` blocks so
    the cost does not grow with the square of the packed length.
    """
    q, k, v = _lift(q), _lift(k), _lift(v)
    if k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise ShapeError(f"attention shapes q {q.shape}, k {k.shape}, v {v.shape}")
    dim = q.shape[1]
    if dim % n_heads:
        raise ShapeError(f"width {dim} not divisible into {n_heads} heads")
    seg_q, pos_q, seg_k, pos_k = (np.asarray(a, dtype=np.int64) for a in (seg_q, pos_q, seg_k, pos_k))
    if len(seg_q) != q.shape[0] or len(seg_k) != k.shape[0]:
        raise ShapeError("segment ids must cover every row")
    hd = dim // n_heads
    n_seg = int(max(seg_q.max(initial=-1), seg_k.max(initial=-1))) + 1
    lq, lk = int(pos_q.max(initial=-1)) + 1, int(pos_k.max(initial=-1)) + 1

    def blocks(x, seg, pos, length):
        out = np.zeros((n_seg, length, n_heads, hd))
        out[seg, pos] = x.reshape(-1, n_heads, hd)
        return out.transpose(0, 2, 1, 3)  # seg, head, pos, h

    Q, K, V = blocks(q.value, seg_q, pos_q, lq), blocks(k.value, seg_k, pos_k, lk), blocks(v.value, seg_k, pos_k, lk)
    present = np.zeros((n_seg, lk), dtype=bool)
    present[seg_k, pos_k] = True
    hidden = ~present[:, None, None, :]
    if causal:
        hidden = hidden | (np.arange(lk)[None, :] > np.arange(lq)[:, None])[None, None]
    scale_ = 1.0 / np.sqrt(hd)
    scores = np.where(hidden, -np.inf, Q @ K.transpose(0, 1, 3, 2) * scale_)
    # padded query rows may see no key at all; keep them finite, they are never read
    top = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - np.where(np.isfinite(top), top, 0.0))
    z = e.sum(axis=-1, keepdims=True)
    P = e / np.where(z > 0, z, 1.0)
    O = P @ V

    def rows(x, seg, pos):
        return x.transpose(0, 2, 1, 3)[seg, pos].reshape(len(seg), dim)

    def backward(g):
        G = blocks(g, seg_q, pos_q, lq)
        dP = G @ V.transpose(0, 1, 3, 2)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * scale_
        _push(q, rows(dS @ K, seg_q, pos_q))
        _push(k, rows(dS.transpose(0, 1, 3, 2) @ Q, seg_k, pos_k))
        _push(v, rows(P.transpose(0, 1, 3, 2) @ G, seg_k, pos_k))

    return Node(rows(O, seg_q, pos_q), (q, k, v), backward)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Node, targets, ignore_index: int | None = None) -> Node:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.intp)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: {targets.shape[0]} targets for {n} rows")
    keep = np.ones(n, bool) if ignore_index is None else targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise DegenerateBatchError("cross_entropy: every position is ignored")
    rows = np.flatnonzero(keep)
    tk = targets[rows]
    if tk.min() < 0 or tk.max() >= v:
        raise ValueError(f"cross_entropy: target outside [0, {v})")
    logp = _log_softmax(logits.value[rows])
    loss = -logp[np.arange(count), tk].sum() / count

    def backward(g):
        if logits.requires_grad:
            d = np.exp(logp)
            d[np.arange(count), tk] -= 1.0
            full = np.zeros((n, v))
            full[rows] = d * (g[0, 0] / count)
            logits.accumulate(full)

    return Node(loss, (logits,), backward)


def kl_rows(p_logits: Node, q_logits: Node, detach_p: bool = False, mask=None) -> Node:
    """Mean over selected rows of KL(softmax(p) || softmax(q)).

    ``mask`` is a boolean vector of rows to include (default: all rows).
    With ``detach_p`` the first argument receives no gradient.
    """
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl_rows shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    if detach_p:
        p_logits = detach(p_logits)
    n, v = p_logits.shape
    rows = np.arange(n) if mask is None else np.flatnonzero(np.asarray(mask, bool))
    count = len(rows)
    if count == 0:
        raise DegenerateBatchError("kl_rows: every row is masked")
    logp = _log_softmax(p_logits.value[rows])
    logq = _log_softmax(q_logits.value[rows])
    p = np.exp(logp)
    diff = logp - logq
    loss = (p * diff).sum() / count

    def backward(g):
        c = g[0, 0] / count
        if p_logits.requires_grad:
            full = np.zeros((n, v))
            full[rows] = p * (diff - (p * diff).sum(axis=1, keepdims=True)) * c
            p_logits.accumulate(full)
        if q_logits.requires_grad:
            full = np.zeros((n, v))
            full[rows] = (np.exp(logq) - p) * c
            q_logits.accumulate(full)

    return Node(loss, (p_logits, q_logits), backward)


# ---------------------------------------------------------------------------
# verification


def grad_check(
    build_loss: Callable[[], Node],
    params: Sequence[Node],
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative gap between backward-pass and central-difference gradients.

    ``build_loss`` must rebuild the graph from the current parameter values on
    every call. ``max_entries`` limits the number of probed entries per
    parameter (chosen with ``seed``) for large parameter sets.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    for p in params:
        p.zero_grad()
    loss = build_loss()
    if not np.isfinite(loss.value).all():
        raise NumericError("grad_check: loss is not finite")
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        probe = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            probe = rng.choice(flat.size, size=max_entries, replace=False)
        for k in probe:
            orig = flat[k]
            flat[k] = orig + eps
            up = build_loss().item()
            flat[k] = orig - eps
            down = build_loss().item()
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("grad_check: perturbed loss is not finite")
            num = (up - down) / (2 * eps)
            ana = ga.reshape(-1)[k]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
