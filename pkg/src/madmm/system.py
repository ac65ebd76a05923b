"""Multiaffine constraint systems: blocks, terms, evaluation, and freezing.

A system is a stack of equations, each a signed sum of terms that must equal
zero.  Every term is affine in each variable block with the other blocks held
fixed; products of two or more distinct blocks are allowed (matrix chains,
Hadamard products, 2-D circular convolutions), repeated occurrences of the
same block inside one term are not.

The central operation is :func:`freeze`: fixing all blocks except a chosen
focus turns the system into an affine map of the focus, returned as a
:class:`FrozenLinearForm` with matrix-free ``apply``/``adjoint`` and a dense
``offset`` such that the stacked residual equals ``apply(Y) - offset``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BuildError, ShapeMismatchError
from .operators import LinearOp

ROLE_X = "x"
ROLE_Z0 = "z0"
ROLE_Z1 = "z1"
ROLE_Z2 = "z2"
_ROLES = (ROLE_X, ROLE_Z0, ROLE_Z1, ROLE_Z2)
Z_ROLES = (ROLE_Z0, ROLE_Z1, ROLE_Z2)


@dataclass(frozen=True)
class BlockId:
    """Identity of one variable block.

    ``role`` is "x" for sequentially updated blocks (``index`` gives the
    update position) or one of "z0"/"z1"/"z2" for the jointly updated final
    group; "z1"/"z2" blocks may only appear in plain linear terms.
    """

    name: str
    role: str
    shape: tuple
    index: int = 0

    def __post_init__(self):
        if self.role not in _ROLES:
            raise BuildError(f"unknown role {self.role!r} for block {self.name!r}")
        if len(self.shape) != 2 or any(int(s) < 1 for s in self.shape):
            raise BuildError(f"block {self.name!r} needs a positive (rows, cols) shape")
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))

    @property
    def dim(self) -> int:
        return self.shape[0] * self.shape[1]


@dataclass
class MatChain:
    """sign * F1 @ F2 @ ... @ Fk where each factor is a BlockId or a constant."""

    factors: list
    sign: int = 1


@dataclass
class HadamardPair:
    """sign * post(left * right) with * elementwise; post defaults to identity."""

    left: BlockId
    right: BlockId
    post: LinearOp | None = None
    sign: int = 1


@dataclass
class Conv2D:
    """sign * (kernel conv signal), circular 2-D convolution.

    The kernel block may be smaller than the signal block; it is zero-padded
    to the signal shape with its origin at index (0, 0) before the FFT.
    """

    kernel: BlockId
    signal: BlockId
    sign: int = 1


@dataclass
class LinearTerm:
    """sign * op(block)."""

    op: LinearOp
    block: BlockId
    sign: int = 1


@dataclass
class Constant:
    """A fixed array added into the equation."""

    value: np.ndarray
    sign: int = 1

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        if self.value.ndim != 2:
            self.value = np.atleast_2d(self.value)


def circ_conv2(kernel: np.ndarray, signal: np.ndarray) -> np.ndarray:
    """Circular 2-D convolution of a (possibly smaller) kernel with a signal."""
    kernel = np.asarray(kernel, dtype=float)
    signal = np.asarray(signal, dtype=float)
    padded = np.zeros(signal.shape)
    padded[: kernel.shape[0], : kernel.shape[1]] = kernel
    return np.fft.irfft2(np.fft.rfft2(padded) * np.fft.rfft2(signal),
                         s=signal.shape)


def _conv_adjoint_signal(kernel: np.ndarray, w: np.ndarray) -> np.ndarray:
    padded = np.zeros(w.shape)
    padded[: kernel.shape[0], : kernel.shape[1]] = kernel
    return np.fft.irfft2(np.conj(np.fft.rfft2(padded)) * np.fft.rfft2(w),
                         s=w.shape)


def _conv_adjoint_kernel(signal: np.ndarray, w: np.ndarray, kernel_shape) -> np.ndarray:
    full = np.fft.irfft2(np.conj(np.fft.rfft2(signal)) * np.fft.rfft2(w),
                         s=w.shape)
    return full[: kernel_shape[0], : kernel_shape[1]].copy()


def blocks_in(term) -> tuple:
    """Variable blocks referenced by a term, in occurrence order."""
    if isinstance(term, MatChain):
        return tuple(f for f in term.factors if isinstance(f, BlockId))
    if isinstance(term, HadamardPair):
        return (term.left, term.right)
    if isinstance(term, Conv2D):
        return (term.kernel, term.signal)
    if isinstance(term, LinearTerm):
        return (term.block,)
    if isinstance(term, Constant):
        return ()
    raise BuildError(f"unknown term type {type(term).__name__}")


def _term_out_shape(term, eq_id: int) -> tuple:
    if isinstance(term, MatChain):
        if not term.factors:
            raise BuildError(f"equation {eq_id}: empty matrix chain")
        shapes = [f.shape if isinstance(f, BlockId) else np.asarray(f).shape
                  for f in term.factors]
        for a, b in zip(shapes, shapes[1:]):
            if a[1] != b[0]:
                raise ShapeMismatchError(
                    f"equation {eq_id}: matrix chain mismatch {a} @ {b}", eq_id=eq_id)
        return (shapes[0][0], shapes[-1][1])
    if isinstance(term, HadamardPair):
        if term.left.shape != term.right.shape:
            raise ShapeMismatchError(
                f"equation {eq_id}: Hadamard blocks {term.left.name!r} and "
                f"{term.right.name!r} have different shapes",
                block=term.left.name, eq_id=eq_id)
        if term.post is None:
            return term.left.shape
        if term.post.in_shape != term.left.shape:
            raise ShapeMismatchError(
                f"equation {eq_id}: post-map expects {term.post.in_shape}, "
                f"blocks have {term.left.shape}",
                block=term.left.name, eq_id=eq_id)
        return term.post.out_shape
    if isinstance(term, Conv2D):
        ks, ss = term.kernel.shape, term.signal.shape
        if ks[0] > ss[0] or ks[1] > ss[1]:
            raise ShapeMismatchError(
                f"equation {eq_id}: kernel {ks} larger than signal {ss}",
                block=term.kernel.name, eq_id=eq_id)
        return ss
    if isinstance(term, LinearTerm):
        if term.op.in_shape != term.block.shape:
            raise ShapeMismatchError(
                f"equation {eq_id}: operator expects {term.op.in_shape}, "
                f"block {term.block.name!r} has {term.block.shape}",
                block=term.block.name, eq_id=eq_id)
        return term.op.out_shape
    if isinstance(term, Constant):
        return term.value.shape
    raise BuildError(f"unknown term type {type(term).__name__}")


class MultiaffineSystem:
    """A stack of multiaffine equations ``sum_t sign_t T_t(blocks) = 0``."""

    def __init__(self):
        self.equations = []  # list of (eq_id, [terms])
        self.blocks = {}     # name -> BlockId
        self._eq_shapes = {}

    def add_equation(self, terms, eq_id: int | None = None) -> int:
        if eq_id is None:
            eq_id = len(self.equations)
        if any(e == eq_id for e, _ in self.equations):
            raise BuildError(f"equation id {eq_id} already used")
        terms = list(terms)
        if not terms:
            raise BuildError(f"equation {eq_id}: no terms")
        shape = None
        for term in terms:
            tshape = _term_out_shape(term, eq_id)
            if shape is None:
                shape = tshape
            elif tshape != shape:
                names = ", ".join(b.name for b in blocks_in(term)) or "constant"
                raise ShapeMismatchError(
                    f"equation {eq_id}: term on [{names}] has shape {tshape}, "
                    f"expected {shape}", eq_id=eq_id,
                    block=(blocks_in(term)[0].name if blocks_in(term) else None))
            seen = set()
            for b in blocks_in(term):
                if b.name in seen:
                    raise BuildError(
                        f"equation {eq_id}: block {b.name!r} appears twice in one "
                        "term; terms must be affine in each block")
                seen.add(b.name)
                if b.role in (ROLE_Z1, ROLE_Z2) and not isinstance(term, LinearTerm):
                    raise BuildError(
                        f"equation {eq_id}: block {b.name!r} has role {b.role!r} "
                        "and may only appear in linear terms")
                existing = self.blocks.get(b.name)
                if existing is not None and existing != b:
                    raise BuildError(f"conflicting definitions of block {b.name!r}")
                self.blocks[b.name] = b
            if isinstance(term.sign, (int, float)) and term.sign not in (1, -1):
                raise BuildError(f"equation {eq_id}: sign must be +1 or -1")
        self.equations.append((eq_id, terms))
        self.equations.sort(key=lambda pair: pair[0])
        self._eq_shapes[eq_id] = shape
        return eq_id

    def eq_shape(self, eq_id: int) -> tuple:
        return self._eq_shapes[eq_id]

    @property
    def eq_ids(self):
        return [e for e, _ in self.equations]

    def blocks_with_role(self, *roles):
        return [b for b in self.blocks.values() if b.role in roles]

    @property
    def out_dim(self) -> int:
        return sum(s[0] * s[1] for s in
                   (self._eq_shapes[e] for e in self.eq_ids))

    def constraint_dims(self):
        """(eq_id, shape) pairs in stacking order."""
        return [(e, self._eq_shapes[e]) for e in self.eq_ids]


def _value_of(assignment, block: BlockId):
    try:
        v = assignment[block]
    except KeyError:
        raise KeyError(f"assignment missing block {block.name!r}") from None
    v = np.asarray(v, dtype=float)
    if v.shape != block.shape:
        raise ShapeMismatchError(
            f"value for block {block.name!r} has shape {v.shape}, "
            f"declared {block.shape}", block=block.name)
    return v


def _eval_term(term, assignment):
    if isinstance(term, MatChain):
        out = None
        for f in term.factors:
            v = _value_of(assignment, f) if isinstance(f, BlockId) else np.asarray(f, dtype=float)
            out = v if out is None else out @ v
        return term.sign * out
    if isinstance(term, HadamardPair):
        prod = _value_of(assignment, term.left) * _value_of(assignment, term.right)
        if term.post is not None:
            prod = term.post.apply(prod)
        return term.sign * prod
    if isinstance(term, Conv2D):
        return term.sign * circ_conv2(_value_of(assignment, term.kernel),
                                      _value_of(assignment, term.signal))
    if isinstance(term, LinearTerm):
        return term.sign * term.op.apply(_value_of(assignment, term.block))
    if isinstance(term, Constant):
        return term.sign * term.value
    raise BuildError(f"unknown term type {type(term).__name__}")


def evaluate(system: MultiaffineSystem, assignment) -> list:
    """Residual arrays of every equation, ascending eq_id."""
    out = []
    for eq_id, terms in system.equations:
        total = np.zeros(system.eq_shape(eq_id))
        for term in terms:
            total = total + _eval_term(term, assignment)
        out.append(total)
    return out


def stack_residual(residuals) -> np.ndarray:
    """Row-major flatten within each equation, concatenated ascending eq_id."""
    return np.concatenate([np.ravel(r) for r in residuals]) if residuals else np.zeros(0)


class _Piece:
    """One frozen linear contribution of a focus block to one equation."""

    def __init__(self, eq_id, block, kind, payload, sign):
        self.eq_id = eq_id
        self.block = block
        self.kind = kind
        self.payload = payload
        self.sign = float(sign)

    def apply(self, y):
        s = self.sign
        if self.kind == "scaled_identity":
            return (s * self.payload) * y
        if self.kind == "linear_op":
            return s * self.payload.apply(y)
        if self.kind == "left_mul":
            return s * (self.payload @ y)
        if self.kind == "right_mul":
            return s * (y @ self.payload)
        if self.kind == "both_mul":
            left, right = self.payload
            return s * (left @ y @ right)
        if self.kind == "hadamard":
            other, post = self.payload
            prod = y * other
            return s * (post.apply(prod) if post is not None else prod)
        if self.kind == "conv_signal":
            return s * circ_conv2(self.payload, y)
        if self.kind == "conv_kernel":
            return s * circ_conv2(y, self.payload)
        raise BuildError(f"unknown piece kind {self.kind}")

    def adjoint(self, w):
        s = self.sign
        if self.kind == "scaled_identity":
            return (s * self.payload) * w
        if self.kind == "linear_op":
            return s * self.payload.adjoint(w)
        if self.kind == "left_mul":
            return s * (self.payload.T @ w)
        if self.kind == "right_mul":
            return s * (w @ self.payload.T)
        if self.kind == "both_mul":
            left, right = self.payload
            return s * (left.T @ w @ right.T)
        if self.kind == "hadamard":
            other, post = self.payload
            back = post.adjoint(w) if post is not None else w
            return s * (back * other)
        if self.kind == "conv_signal":
            return s * _conv_adjoint_signal(self.payload, w)
        if self.kind == "conv_kernel":
            return s * _conv_adjoint_kernel(self.payload, w, self.block.shape)
        raise BuildError(f"unknown piece kind {self.kind}")


def _freeze_term(term, focus_hits, assignment, eq_id):
    """Pieces for the focus blocks appearing in `term` (one per occurrence)."""
    pieces = []
    if isinstance(term, MatChain):
        for idx, f in enumerate(term.factors):
            if isinstance(f, BlockId) and f in focus_hits:
                left = None
                for g in term.factors[:idx]:
                    v = _value_of(assignment, g) if isinstance(g, BlockId) else np.asarray(g, dtype=float)
                    left = v if left is None else left @ v
                right = None
                for g in term.factors[idx + 1:]:
                    v = _value_of(assignment, g) if isinstance(g, BlockId) else np.asarray(g, dtype=float)
                    right = v if right is None else right @ v
                if left is None and right is None:
                    pieces.append(_Piece(eq_id, f, "scaled_identity", 1.0, term.sign))
                elif left is None:
                    pieces.append(_Piece(eq_id, f, "right_mul", right, term.sign))
                elif right is None:
                    pieces.append(_Piece(eq_id, f, "left_mul", left, term.sign))
                else:
                    pieces.append(_Piece(eq_id, f, "both_mul", (left, right), term.sign))
    elif isinstance(term, HadamardPair):
        if term.left in focus_hits:
            other = _value_of(assignment, term.right)
            pieces.append(_Piece(eq_id, term.left, "hadamard", (other, term.post), term.sign))
        if term.right in focus_hits:
            other = _value_of(assignment, term.left)
            pieces.append(_Piece(eq_id, term.right, "hadamard", (other, term.post), term.sign))
    elif isinstance(term, Conv2D):
        if term.kernel in focus_hits:
            pieces.append(_Piece(eq_id, term.kernel, "conv_kernel",
                                 _value_of(assignment, term.signal), term.sign))
        if term.signal in focus_hits:
            pieces.append(_Piece(eq_id, term.signal, "conv_signal",
                                 _value_of(assignment, term.kernel), term.sign))
    elif isinstance(term, LinearTerm):
        if term.block in focus_hits:
            op = term.op
            if op.identity_scale is not None:
                pieces.append(_Piece(eq_id, term.block, "scaled_identity",
                                     op.identity_scale, term.sign))
            else:
                pieces.append(_Piece(eq_id, term.block, "linear_op", op, term.sign))
    return pieces


class FrozenLinearForm:
    """The system as an affine map of one focus block (or a block group).

    For every admissible value ``Y`` of the focus, the stacked constraint
    residual equals ``apply(Y) - offset``; equivalently the frozen constraint
    reads ``apply(Y) = offset``.  ``apply``/``adjoint`` take and return plain
    arrays for a single focus block and name-keyed dicts for a group.
    """

    def __init__(self, focus, pieces, offsets, eq_dims, single):
        self.focus = tuple(focus)
        self.pieces = pieces              # list of _Piece
        self._offsets = offsets           # eq_id -> array
        self.eq_dims = eq_dims            # list of (eq_id, shape)
        self._single = single
        self._by_eq = {}
        for p in pieces:
            self._by_eq.setdefault(p.eq_id, []).append(p)

    @property
    def out_dim(self) -> int:
        return sum(s[0] * s[1] for _, s in self.eq_dims)

    @property
    def in_dim(self) -> int:
        return sum(b.dim for b in self.focus)

    @property
    def offset(self) -> np.ndarray:
        """Stacked offset b_U (row-major within equations, ascending eq_id)."""
        return np.concatenate([np.ravel(self._offsets[e]) for e, _ in self.eq_dims])

    def offset_for(self, eq_id: int) -> np.ndarray:
        return self._offsets[eq_id]

    def _as_values(self, y):
        if self._single:
            block = self.focus[0]
            y = np.asarray(y, dtype=float)
            if y.shape != block.shape:
                raise ShapeMismatchError(
                    f"focus value has shape {y.shape}, block {block.name!r} "
                    f"declared {block.shape}", block=block.name)
            return {block: y}
        return {b: np.asarray(y[b.name], dtype=float) for b in self.focus}

    def apply_eqs(self, y) -> dict:
        """eq_id -> linear part of the residual at focus value(s) y."""
        values = self._as_values(y)
        out = {}
        for eq_id, shape in self.eq_dims:
            total = np.zeros(shape)
            for p in self._by_eq.get(eq_id, ()):
                total = total + p.apply(values[p.block])
            out[eq_id] = total
        return out

    def apply(self, y) -> np.ndarray:
        """Stacked linear map C_U(Y)."""
        per_eq = self.apply_eqs(y)
        return np.concatenate([np.ravel(per_eq[e]) for e, _ in self.eq_dims])

    def adjoint_eqs(self, w_by_eq: dict):
        """Adjoint of apply on per-equation dual arrays."""
        grads = {b: np.zeros(b.shape) for b in self.focus}
        for p in self.pieces:
            w = w_by_eq.get(p.eq_id)
            if w is None:
                continue
            grads[p.block] = grads[p.block] + p.adjoint(np.asarray(w, dtype=float))
        if self._single:
            return grads[self.focus[0]]
        return {b.name: g for b, g in grads.items()}

    def adjoint(self, w: np.ndarray):
        """Adjoint of the stacked map; w is a stacked vector."""
        return self.adjoint_eqs(self.split_dual(w))

    def split_dual(self, w: np.ndarray) -> dict:
        w = np.ravel(w)
        out, pos = {}, 0
        for eq_id, shape in self.eq_dims:
            n = shape[0] * shape[1]
            out[eq_id] = w[pos:pos + n].reshape(shape)
            pos += n
        if pos != w.size:
            raise ShapeMismatchError(
                f"dual vector has length {w.size}, expected {pos}")
        return out

    def stack_values(self, y) -> np.ndarray:
        values = self._as_values(y)
        return np.concatenate([np.ravel(values[b]) for b in self.focus])

    def unstack_values(self, v: np.ndarray):
        v = np.ravel(v)
        out, pos = {}, 0
        for b in self.focus:
            out[b.name] = v[pos:pos + b.dim].reshape(b.shape)
            pos += b.dim
        if self._single:
            return out[self.focus[0].name]
        return out

    def apply_vec(self, v: np.ndarray) -> np.ndarray:
        return self.apply(self.unstack_values(v))

    def adjoint_vec(self, w: np.ndarray) -> np.ndarray:
        y = self.adjoint(w)
        if self._single:
            return np.ravel(y)
        return np.concatenate([np.ravel(y[b.name]) for b in self.focus])


def freeze(system: MultiaffineSystem, focus, assignment) -> FrozenLinearForm:
    """Freeze all blocks except `focus` (a BlockId or a sequence of them).

    The assignment must supply values for every non-focus block that appears
    in the system; values for focus blocks are ignored.  Terms containing two
    focus blocks are rejected: the frozen map must be affine.
    """
    focus_blocks = [focus] if isinstance(focus, BlockId) else list(focus)
    if not focus_blocks:
        raise BuildError("freeze needs at least one focus block")
    for b in focus_blocks:
        if system.blocks.get(b.name) != b:
            raise BuildError(f"focus block {b.name!r} is not part of the system")
    focus_set = set(focus_blocks)

    pieces, offsets = [], {}
    for eq_id, terms in system.equations:
        base = np.zeros(system.eq_shape(eq_id))
        for term in terms:
            hits = [b for b in blocks_in(term) if b in focus_set]
            if len(hits) > 1:
                raise BuildError(
                    f"equation {eq_id}: term couples focus blocks "
                    f"{[b.name for b in hits]}; the frozen map would not be affine")
            if hits:
                pieces.extend(_freeze_term(term, focus_set, assignment, eq_id))
            else:
                base = base + _eval_term(term, assignment)
        offsets[eq_id] = -base
    return FrozenLinearForm(focus_blocks, pieces, offsets,
                            system.constraint_dims(),
                            single=isinstance(focus, BlockId))


def jacobian_image_basis(system: MultiaffineSystem, assignment, samples: int = 8,
                         seed: int = 0) -> np.ndarray:
    """Sampled image of the nonlinear constraint part.

    Columns are stacked residuals with every "z1"/"z2" block forced to zero
    (their linear contributions vanish there, leaving only the coupled part
    and constants), evaluated at the given assignment and at ``samples``
    Gaussian redraws of the remaining blocks.
    """
    rng = np.random.default_rng(seed)
    z_linear = [b for b in system.blocks.values() if b.role in (ROLE_Z1, ROLE_Z2)]
    others = [b for b in system.blocks.values() if b.role not in (ROLE_Z1, ROLE_Z2)]

    def column(point):
        point = dict(point)
        for b in z_linear:
            point[b] = np.zeros(b.shape)
        return stack_residual(evaluate(system, point))

    cols = [column(assignment)]
    for _ in range(samples):
        cols.append(column({b: rng.standard_normal(b.shape) for b in others}))
    return np.column_stack(cols)
