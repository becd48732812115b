"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Everything is double precision and deterministic: the same inputs always
produce bit-identical outputs. Operations record themselves on the active
``GradientTape`` whenever an input requires gradients; execution order is
already a topological order, so backward is a single reverse sweep.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

_ACTIVE_TAPE = None


class Tensor:
    """A dense array plus optional participation in the active gradient tape.

    ``grad`` is populated on leaves by ``GradientTape.backward``. ``tape_id``
    is the index of the node that produced this tensor on its tape (None for
    leaves and constants).
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.tape = None
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, requires_grad={self.requires_grad})"


def parameter(data, rng=None, scale: float | None = None) -> Tensor:
    """Create a requires-grad leaf. With ``rng``, ``data`` is a shape tuple."""
    if rng is not None:
        data = rng.standard_normal(data) * (scale if scale is not None else 1.0)
    return Tensor(data, requires_grad=True)


class GradientTape:
    """Ordered record of operations for one reverse-mode sweep.

    Nodes are appended in execution order, so every node's parents precede
    it. A tape is confined to one logical thread; nesting tapes is an error.
    """

    def __init__(self):
        self.nodes = []       # (out, parents, backward_fn)
        self._leaves = []     # requires-grad tensors not produced on this tape
        self._leaf_ids = set()

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a gradient tape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, root: Tensor) -> dict[Tensor, Tensor]:
        """Accumulate d(root)/d(leaf) for every requires-grad leaf.

        ``root`` must be a scalar recorded on this tape. Returns a map from
        leaf tensor to its gradient; leaves that do not reach the root get a
        zero gradient. Each leaf's ``grad`` attribute is set as well.
        """
        if root.data.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
        if root.tape is not self:
            raise ContractError("backward root was not recorded on this tape")
        grads = {id(root): np.ones_like(root.data)}
        for out, parents, fn in reversed(self.nodes[: root.tape_id + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
        result = {}
        for leaf in self._leaves:
            g = grads.get(id(leaf))
            leaf.grad = g if g is not None else np.zeros_like(leaf.data)
            result[leaf] = Tensor(leaf.grad)
        return result


def backward(root: Tensor) -> dict[Tensor, Tensor]:
    """Run the reverse sweep on the tape that recorded ``root``."""
    if root.tape is None:
        raise ContractError("backward root is not connected to any tape")
    return root.tape.backward(root)


def _tracing(*tensors) -> bool:
    return _ACTIVE_TAPE is not None and any(t.requires_grad for t in tensors)


def _record(out: Tensor, parents, fn):
    tape = _ACTIVE_TAPE
    out.requires_grad = True
    out.tape = tape
    out.tape_id = len(tape.nodes)
    tape.nodes.append((out, parents, fn))
    for p in parents:
        if p.requires_grad and p.tape is not tape and id(p) not in tape._leaf_ids:
            tape._leaf_ids.add(id(p))
            tape._leaves.append(p)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# Core operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product [m,k] @ [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if _tracing(a, b):
        na, nb = a.requires_grad, b.requires_grad
        ad, bd = a.data, b.data

        def fn(g):
            return (g @ bd.T if na else None, ad.T @ g if nb else None)

        _record(out, (a, b), fn)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over rows."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: shapes {x.data.shape} and {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias shape {b.data.shape} vs {w.data.shape[1]}")
    out = Tensor(x.data @ w.data + b.data)
    if _tracing(x, w, b):
        nx, nw, nb = x.requires_grad, w.requires_grad, b.requires_grad
        xd, wd = x.data, w.data

        def fn(g):
            return (
                g @ wd.T if nx else None,
                xd.T @ g if nw else None,
                g.sum(axis=0) if nb else None,
            )

        _record(out, (x, w, b), fn)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    if _tracing(x):
        def fn(g, s=s):
            return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

        _record(out, (x,), fn)
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    """Row-wise log-softmax via a stable log-sum-exp."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(z - lse)
    if _tracing(x):
        s = np.exp(out.data)

        def fn(g, s=s):
            return (g - g.sum(axis=-1, keepdims=True) * s,)

        _record(out, (x,), fn)
    return out


def _binary(a, b, data, fa, fb, op):
    _check_same_shape(a, b, op)
    out = Tensor(data)
    if _tracing(a, b):
        na, nb = a.requires_grad, b.requires_grad

        def fn(g):
            return (fa(g) if na else None, fb(g) if nb else None)

        _record(out, (a, b), fn)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _binary(a, b, ad * bd, lambda g: g * bd, lambda g: g * ad, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out_data = ad / bd
    return _binary(a, b, out_data, lambda g: g / bd, lambda g: -g * out_data / bd, "div")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first operand."""
    mask = a.data >= b.data
    return _binary(a, b, np.where(mask, a.data, b.data),
                   lambda g: g * mask, lambda g: g * ~mask, "maximum")


def minimum(a: Tensor, b: Tensor) -> Tensor:
    mask = a.data <= b.data
    return _binary(a, b, np.where(mask, a.data, b.data),
                   lambda g: g * mask, lambda g: g * ~mask, "minimum")


def _unary(a, data, fa):
    out = Tensor(data)
    if _tracing(a):
        def fn(g):
            return (fa(g),)

        _record(out, (a,), fn)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(a, a.data * c, lambda g: g * c)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _unary(a, t, lambda g: g * (1.0 - t * t))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _unary(a, a.data * mask, lambda g: g * mask)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # piecewise form avoids overflow in exp for large |x|
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _unary(a, s, lambda g: g * s * (1.0 - s))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _unary(a, e, lambda g: g * e)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed as logaddexp(0, x) for stability."""
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _unary(a, np.logaddexp(0.0, x), lambda g: g * s)


def absval(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _unary(a, np.abs(a.data), lambda g: g * sign)


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatcher over the elementwise kinds; ``b`` is the second operand
    for binary kinds and the scalar factor for ``scale``."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"tanh": tanh, "relu": relu, "sigmoid": sigmoid}
    if kind in binary:
        if not isinstance(b, Tensor):
            raise ContractError(f"elementwise {kind} needs a tensor operand")
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    if kind == "scale":
        return scale(a, b)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _unary(a, a.data.sum(), lambda g: np.full(shape, float(g)))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape
    return _unary(a, a.data.sum() / n, lambda g: np.full(shape, float(g) / n))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _unary(a, a.data.T.copy(), lambda g: g.T)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    out = Tensor(a.data[idx])
    if _tracing(a):
        shape = a.data.shape

        def fn(g):
            buf = np.zeros(shape)
            np.add.at(buf, idx, g)
            return (buf,)

        _record(out, (a,), fn)
    return out


def gather_cols(a: Tensor, idx) -> Tensor:
    """Select columns of a 2-D tensor; backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError("gather_cols expects a 2-D tensor")
    out = Tensor(a.data[:, idx])
    if _tracing(a):
        shape = a.data.shape

        def fn(g):
            buf = np.zeros(shape)
            np.add.at(buf.T, idx, g.T)
            return (buf,)

        _record(out, (a,), fn)
    return out


def concat_cols(parts) -> Tensor:
    """Concatenate 2-D tensors along columns (multi-head reassembly)."""
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    if _tracing(*parts):
        widths = [p.data.shape[1] for p in parts]
        needs = [p.requires_grad for p in parts]
        edges = np.cumsum([0] + widths)

        def fn(g):
            return tuple(g[:, edges[i]:edges[i + 1]] if needs[i] else None
                         for i in range(len(widths)))

        _record(out, tuple(parts), fn)
    return out


def concat_rows(parts) -> Tensor:
    """Stack 2-D tensors along rows."""
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != cols:
            raise ShapeError("concat_rows: column counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    if _tracing(*parts):
        heights = [p.data.shape[0] for p in parts]
        needs = [p.requires_grad for p in parts]
        edges = np.cumsum([0] + heights)

        def fn(g):
            return tuple(g[edges[i]:edges[i + 1]] if needs[i] else None
                         for i in range(len(heights)))

        _record(out, tuple(parts), fn)
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification oracle
# ---------------------------------------------------------------------------

def finite_diff_report(f, params: dict, eps: float = 1e-6) -> dict[str, float]:
    """Max relative error between tape gradients and central differences,
    reported per named parameter.

    ``f`` must be a deterministic scalar-valued function of ``params``
    (a name -> requires-grad Tensor map). Relative error for one entry is
    |analytic - central| / max(1e-8, |central|).
    """
    with GradientTape() as tape:
        loss = f()
    grads = tape.backward(loss)
    report = {}
    for name, p in params.items():
        analytic = grads.get(p)
        analytic = analytic.data if analytic is not None else np.zeros_like(p.data)
        worst = 0.0
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - central) / max(1e-8, abs(central))
            if err > worst:
                worst = err
        report[name] = worst
    return report


def finite_diff_check(f, params: dict, eps: float = 1e-6) -> float:
    """Max over all parameters of the finite-difference relative error."""
    report = finite_diff_report(f, params, eps=eps)
    return max(report.values()) if report else 0.0
