"""Dense float64 tensors and a minimal reverse-mode differentiation tape.

Everything downstream (channel attention, contrastive aggregation, the
training loop) is expressed through the primitives in this module.  Values
are immutable once constructed; recording happens only while a ``Tape`` is
active, so forward-only evaluation pays no autodiff cost.

Summation policy: reductions over a *collection* of tensors (``temporal``
mean, row means) sort their summands into ascending value order per output
coordinate before accumulating.  This makes those reductions bit-identical
under any permutation of their inputs, which the permutation-equivariance
tests rely on.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class DegenerateInputError(ValueError):
    """An input is numerically degenerate, e.g. a feature with ~zero norm."""


class ContractError(ValueError):
    """A call violates an operation's contract or precondition."""


_COSINE_EPS = 1e-12

# sigmoid outputs are clipped into the open interval (0, 1)
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)

_ids = itertools.count()


class Tensor:
    """A shaped, row-major array of float64 scalars.

    The public constructor validates finiteness; operation outputs are
    wrapped without re-validation because every primitive preserves
    finiteness on finite inputs.  Data is never mutated by operations; the
    optimizer may overwrite parameter buffers in place *between* tapes.
    """

    __slots__ = ("data", "_id")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        self.data = arr
        self._id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out._id = next(_ids)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def scalar(value: float) -> Tensor:
    """A 0-d constant tensor."""
    return Tensor(np.asarray(value, dtype=np.float64))


@dataclass
class _Node:
    op: str
    out_id: int
    in_ids: tuple[int, ...]
    # maps d(root)/d(out) to the tuple of d(root)/d(input) contributions
    backward: Callable[[np.ndarray], tuple]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Single-writer: exactly one tape may be active at a time (one tape per
    training step).  Nodes are appended in execution order, so every node's
    inputs precede it and the reverse walk is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._watched: dict[int, Tensor] = {}

    def watch(self, *tensors: Tensor) -> None:
        """Register leaf tensors whose gradients should be returned."""
        for t in tensors:
            self._watched[t._id] = t

    def __enter__(self) -> "Tape":
        if _ACTIVE:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.pop()
        return False


def _record(op: str, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
    if _ACTIVE:
        _ACTIVE[-1].nodes.append(
            _Node(op, out._id, tuple(t._id for t in inputs), backward)
        )


def tape_backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) for every watched leaf of the tape.

    The root must be scalar-valued.  Watched leaves the root does not
    depend on receive zero gradients.
    """
    if root.ndim != 0:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {root._id: np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for in_id, gi in zip(node.in_ids, node.backward(g)):
            if gi is None:
                continue
            acc = grads.get(in_id)
            grads[in_id] = gi if acc is None else acc + gi
    return {
        t: grads.get(i, np.zeros_like(t.data)) for i, t in tape._watched.items()
    }


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matvec(w: Tensor, x: Tensor) -> Tensor:
    """y = W @ x for a matrix W (m, n) and vector x (n,)."""
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: W {w.shape} incompatible with x {x.shape}")
    wd, xd = w.data, x.data
    out = Tensor._wrap(wd @ xd)
    _record("matvec", out, (w, x), lambda g: (np.outer(g, xd), wd.T @ g))
    return out


def sigmoid_map(x: Tensor) -> Tensor:
    """Elementwise 1 / (1 + exp(-x)), clipped into the open interval (0, 1)."""
    y = np.clip(expit(x.data), _SIG_LO, _SIG_HI)
    out = Tensor._wrap(y)
    _record("sigmoid_map", out, (x,), lambda g: (g * y * (1.0 - y),))
    return out


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: (C, H, W) -> (C,)."""
    if x.ndim != 3:
        raise ShapeError(f"spatial_mean expects a rank-3 map, got shape {x.shape}")
    c, h, w = x.shape
    out = Tensor._wrap(x.data.mean(axis=(1, 2)))
    n = h * w

    def backward(g):
        return (np.broadcast_to(g[:, None, None] / n, (c, h, w)).copy(),)

    _record("spatial_mean", out, (x,), backward)
    return out


def temporal_mean(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of a nonempty list of same-shape tensors.

    Summands are sorted per coordinate before accumulation, so the result
    is bit-identical under any permutation of the list.
    """
    if len(xs) == 0:
        raise ContractError("temporal_mean: empty list")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"temporal_mean: mixed shapes {shape} and {x.shape}")
    n = len(xs)
    stacked = np.stack([x.data for x in xs])
    out = Tensor._wrap(np.add.reduce(np.sort(stacked, axis=0), axis=0) / n)
    _record("temporal_mean", out, xs, lambda g: tuple(g / n for _ in range(n)))
    return out


def reduce_mean(xs, axis: str):
    """Arithmetic mean along a named axis.

    ``axis="spatial"`` maps one (C, H, W) tensor to its per-channel means;
    a list of maps yields a list of vectors.  ``axis="temporal"`` maps a
    nonempty list of same-shape tensors to their elementwise mean.
    """
    if axis == "spatial":
        if isinstance(xs, Tensor):
            return spatial_mean(xs)
        return [spatial_mean(x) for x in xs]
    if axis == "temporal":
        if isinstance(xs, Tensor):
            raise ContractError("temporal reduce_mean expects a list of tensors")
        return temporal_mean(list(xs))
    raise ContractError(f"unknown reduce_mean axis {axis!r}")


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Raises DegenerateInputError when either norm falls below 1e-12; a zero
    feature this deep in the pipeline indicates an upstream bug.
    """
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} must be equal vectors")
    ad, bd = a.data, b.data
    na = float(np.linalg.norm(ad))
    nb = float(np.linalg.norm(bd))
    if na < _COSINE_EPS or nb < _COSINE_EPS:
        raise DegenerateInputError(
            f"cosine: input norm below {_COSINE_EPS} (|a|={na:.3e}, |b|={nb:.3e})"
        )
    val = float(np.clip(ad @ bd / (na * nb), -1.0, 1.0))
    out = Tensor._wrap(np.asarray(val))

    def backward(g):
        ga = (bd / (na * nb) - val * ad / (na * na)) * g
        gb = (ad / (na * nb) - val * bd / (nb * nb)) * g
        return ga, gb

    _record("cosine", out, (a, b), backward)
    return out


def channel_scale(f: Tensor, c: Tensor) -> Tensor:
    """Scale each channel plane of a (C, H, W) map by the matching entry of c."""
    if f.ndim != 3 or c.ndim != 1 or f.shape[0] != c.shape[0]:
        raise ShapeError(f"channel_scale: map {f.shape} incompatible with weights {c.shape}")
    fd, cd = f.data, c.data
    out = Tensor._wrap(fd * cd[:, None, None])

    def backward(g):
        return g * cd[:, None, None], np.einsum("chw,chw->c", g, fd)

    _record("channel_scale", out, (f, c), backward)
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    # only scalar-to-tensor broadcasting is supported, by design
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return g.sum() if shape == () and g.shape != () else g


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, ash), _reduce_to(g, bsh)

    _record("add", out, (a, b), backward)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, ash), _reduce_to(-g, bsh)

    _record("sub", out, (a, b), backward)
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; either side may be a 0-d scalar."""
    _binary_shapes(a, b, "hadamard")
    ad, bd = a.data, b.data
    out = Tensor._wrap(ad * bd)
    ash, bsh = a.shape, b.shape

    def backward(g):
        return _reduce_to(g * bd, ash), _reduce_to(g * ad, bsh)

    _record("hadamard", out, (a, b), backward)
    return out


def smul(s: Tensor, x: Tensor) -> Tensor:
    """Scale a tensor by a 0-d tensor."""
    if s.ndim != 0:
        raise ShapeError(f"smul: scale must be scalar, got shape {s.shape}")
    sd, xd = s.data, x.data
    out = Tensor._wrap(sd * xd)
    _record("smul", out, (s, x), lambda g: ((g * xd).sum(), g * sd))
    return out


def cmul(x: Tensor, alpha: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    out = Tensor._wrap(x.data * alpha)
    _record("cmul", out, (x,), lambda g: (g * alpha,))
    return out


def cadd(x: Tensor, alpha: float) -> Tensor:
    """Add a python constant."""
    out = Tensor._wrap(x.data + alpha)
    _record("cadd", out, (x,), lambda g: (g,))
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} must be equal vectors")
    ad, bd = a.data, b.data
    out = Tensor._wrap(np.asarray(ad @ bd))
    _record("dot", out, (a, b), lambda g: (g * bd, g * ad))
    return out


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    out = Tensor._wrap(np.asarray(x.data.sum()))
    shape = x.shape
    _record("tsum", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return out


def tmean(x: Tensor) -> Tensor:
    """Mean of all entries as a 0-d tensor."""
    n = x.size
    out = Tensor._wrap(np.asarray(x.data.mean()))
    shape = x.shape
    _record("tmean", out, (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))
    return out


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if len(xs) == 0:
        raise ContractError("stack: empty list")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"stack: mixed shapes {shape} and {x.shape}")
    out = Tensor._wrap(np.stack([x.data for x in xs]))
    n = len(xs)
    _record("stack", out, xs, lambda g: tuple(g[i] for i in range(n)))
    return out


def index(x: Tensor, i: int) -> Tensor:
    """Pick entry i of a vector as a 0-d tensor."""
    if x.ndim != 1:
        raise ShapeError(f"index expects a vector, got shape {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise ContractError(f"index {i} out of range for length {x.shape[0]}")
    out = Tensor._wrap(np.asarray(x.data[i]))
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[i] = g
        return (gx,)

    _record("index", out, (x,), backward)
    return out


def row_mean(x: Tensor) -> Tensor:
    """Per-row mean of a matrix, with value-sorted accumulation per row."""
    if x.ndim != 2:
        raise ShapeError(f"row_mean expects a matrix, got shape {x.shape}")
    n = x.shape[1]
    out = Tensor._wrap(np.add.reduce(np.sort(x.data, axis=1), axis=1) / n)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, None] / n, shape).copy(),)

    _record("row_mean", out, (x,), backward)
    return out


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = Tensor._wrap(np.maximum(xd, 0.0))
    _record("relu", out, (x,), lambda g: (g * (xd > 0.0),))
    return out


def vmax(x: Tensor) -> Tensor:
    """Maximum entry of a vector; subgradient goes to the first argmax."""
    if x.ndim != 1 or x.size == 0:
        raise ShapeError(f"vmax expects a nonempty vector, got shape {x.shape}")
    i = int(np.argmax(x.data))
    out = Tensor._wrap(np.asarray(x.data[i]))
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[i] = g
        return (gx,)

    _record("vmax", out, (x,), backward)
    return out


def vmin(x: Tensor) -> Tensor:
    """Minimum entry of a vector; subgradient goes to the first argmin."""
    if x.ndim != 1 or x.size == 0:
        raise ShapeError(f"vmin expects a nonempty vector, got shape {x.shape}")
    i = int(np.argmin(x.data))
    out = Tensor._wrap(np.asarray(x.data[i]))
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[i] = g
        return (gx,)

    _record("vmin", out, (x,), backward)
    return out


def cross_entropy_logits(z: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of a logit vector against an integer label."""
    if z.ndim != 1:
        raise ShapeError(f"cross_entropy_logits expects a logit vector, got {z.shape}")
    if not 0 <= label < z.shape[0]:
        raise ContractError(f"label {label} out of range for {z.shape[0]} classes")
    zd = z.data
    m = zd.max()
    e = np.exp(zd - m)
    s = e.sum()
    out = Tensor._wrap(np.asarray(np.log(s) + m - zd[label]))

    def backward(g):
        p = e / s
        p = p.copy()
        p[label] -= 1.0
        return (g * p,)

    _record("cross_entropy_logits", out, (z,), backward)
    return out


# ---------------------------------------------------------------------------
# parameters and gradient checking
# ---------------------------------------------------------------------------


class ParamStore:
    """Named, ordered collection of learnable tensors with gradient slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def watch(self, tape: Tape) -> None:
        tape.watch(*self._params.values())

    def set_grads(self, grad_map: dict[Tensor, np.ndarray]) -> None:
        """Fill gradient slots from a tape_backward result."""
        self.grads = {name: grad_map[t] for name, t in self._params.items()}


def linear_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape))


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    ok: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    step: float
    tol: float

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries)

    def __str__(self) -> str:
        lines = [
            f"{'PASS' if e.ok else 'FAIL'}  {e.name:<24} max_rel_err={e.max_rel_err:.3e}"
            for e in self.entries
        ]
        lines.append(f"gradient check: {'PASS' if self.ok else 'FAIL'} (tol={self.tol:g})")
        return "\n".join(lines)


def grad_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of f(params) against central finite differences.

    Reports the maximum relative error per parameter.  ``max_entries`` caps
    how many coordinates of each parameter are perturbed (a seeded sample);
    by default every coordinate is checked.  The relative error uses a
    guarded denominator max(|g|, |fd|, 1e-6) so near-zero gradients compare
    absolutely.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    with Tape() as tape:
        params.watch(tape)
        out = f(params)
    grad_map = tape_backward(tape, out)
    if rng is None:
        rng = np.random.default_rng(0)

    entries = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        analytic = grad_map[p].reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = rng.choice(n, size=max_entries, replace=False)
        else:
            idxs = range(n)
        worst = 0.0
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + step
            f_plus = f(params).item()
            flat[j] = orig - step
            f_minus = f(params).item()
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            g = analytic[j]
            rel = abs(g - fd) / max(abs(g), abs(fd), 1e-6)
            worst = max(worst, rel)
        entries.append(GradCheckEntry(name, worst, worst < tol))
    return GradCheckReport(entries, step, tol)
