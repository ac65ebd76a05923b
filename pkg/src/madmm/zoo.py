"""Ready-made problem instances with multiaffine constraints.

Each builder takes the problem data and returns a ZooInstance wrapping a
validated Problem together with the data arrays and, for generated data, the
planted ground truth.  The shared design across families: nonsmooth or
constrained pieces live on their own split blocks so every sequential update
is an exact projection or proximal step, and every shadow (z-role) block
enters its equation through the identity, keeping the final joint update in
closed form.

Families
--------
nmf3    nonnegative matrix factorization with split factors
dl3     sparse dictionary learning with unit-norm atoms
rp2     equal-risk portfolio selection with box and budget slacks
mc1     graph cut relaxation through a rank-one model matrix
rpca2   robust factorization with a sparse outlier matrix
sbd1    sparse blind deconvolution with a noise shadow (sbd0: without it)

The curvature constants that certify a penalty weight are stored in each
problem's metadata when they hold structurally; builders whose constants
would depend on the iterates omit them, which routes automatic penalty
selection to the probing path.  ``metadata["assumptions_violated"]`` marks
the deliberately broken variants (rpca2 raw, sbd0) that the structure
checker must reject.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BuildError
from .operators import (BroadcastOnes, DenseOp, DiagExtract, ScaledIdentity,
                        TransposeOp)
from .prox import (IndicatorBox, IndicatorNonneg, IndicatorUnitColumns, L1,
                   Quadratic, SmoothCustom, soft_threshold)
from .solver import Problem
from .system import (BlockId, Constant, Conv2D, HadamardPair, LinearTerm,
                     MatChain, MultiaffineSystem, _conv_adjoint_kernel,
                     circ_conv2, freeze)

_INNER_TOL = 1e-11
# Passes of the split solver granted to the sparse-signal update per outer
# iteration.  The update restarts from zero each call, so the budget is a
# hard accuracy cap rather than a warm-start top-up; a fixed budget is how
# this subproblem is run at any realistic scale.
_SBD_INNER_BUDGET = 12
# Proximal weight of the kernel update's anchor.  Any positive weight keeps
# the same stationary points; larger values slow the kernel's scale drift.
_KERNEL_PROX_WEIGHT = 0.5


@dataclass
class ZooInstance:
    """A named problem plus the data it was built from.

    ``truth`` holds planted block values (name -> array) when the data came
    from a generator, empty otherwise.  ``init`` is a recommended starting
    point (name -> array) for families where the solver's random start is
    poorly scaled; pass it to solve() or leave it out to use random starts.
    """

    name: str
    problem: Problem
    data: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict)
    init: dict = field(default_factory=dict)


def _ident(shape):
    return ScaledIdentity(1.0, shape)


# ---------------------------------------------------------------------------
# Nonnegative factorization.

def nmf3(B, r: int, mu: float = 1.0) -> ZooInstance:
    """Nonnegative factorization of B (m x n) at rank r.

    min  1/2 ||Z - B||^2 + mu/2 (||X_rem||^2 + ||Y_rem||^2)
         + nonneg(X_pos) + nonneg(Y_pos)
    s.t. Z = X Y,  X = X_pos + X_rem,  Y = Y_pos + Y_rem.

    The shadow blocks make every curvature constant structural, so the
    certified penalty bound applies.
    """
    B = np.asarray(B, dtype=float)
    m, n = B.shape
    if r < 1 or r > min(m, n):
        raise BuildError(f"rank {r} out of range for a {m} x {n} matrix")
    Y = BlockId("Y", "x", (r, n), index=0)
    Yp = BlockId("Y_pos", "x", (r, n), index=1)
    X = BlockId("X", "x", (m, r), index=2)
    Xp = BlockId("X_pos", "x", (m, r), index=3)
    Z = BlockId("Z", "z1", (m, n))
    Xr = BlockId("X_rem", "z1", (m, r))
    Yr = BlockId("Y_rem", "z1", (r, n))
    system = MultiaffineSystem()
    system.add_equation([LinearTerm(_ident((m, n)), Z),
                         MatChain([X, Y], sign=-1)])
    system.add_equation([MatChain([X]), MatChain([Xp], sign=-1),
                         LinearTerm(_ident((m, r)), Xr, sign=-1)])
    system.add_equation([MatChain([Y]), MatChain([Yp], sign=-1),
                         LinearTerm(_ident((r, n)), Yr, sign=-1)])
    objective = {Z: [Quadratic(1.0, center=B)],
                 Xr: [Quadratic(mu)], Yr: [Quadratic(mu)],
                 Xp: [IndicatorNonneg()], Yp: [IndicatorNonneg()]}
    metadata = {"m1": min(1.0, mu), "M1": max(1.0, mu), "M2": 0.0, "M_F": 0.0,
                "subproblem_methods": {"X": "sylvester", "Y": "sylvester"}}
    problem = Problem(system, objective, metadata=metadata)
    return ZooInstance("nmf3", problem, data={"B": B})


def gen_nmf_data(m: int, n: int, r: int, seed: int = 0):
    """(B, X0, Y0) with B = X0 @ Y0 and planted factors drawn uniformly from
    [0.5, 1.5], bounded away from zero so the factorization is well
    conditioned."""
    rng = np.random.default_rng(seed)
    X0 = rng.uniform(0.5, 1.5, size=(m, r))
    Y0 = rng.uniform(0.5, 1.5, size=(r, n))
    return X0 @ Y0, X0, Y0


# ---------------------------------------------------------------------------
# Dictionary learning.

def dl3(B, r: int, mu_fit: float = 50.0, mu_dict: float = 50.0,
        mu_code: float = 50.0, l1_weight: float = 1.0) -> ZooInstance:
    """Sparse coding of B (m x n) with a dictionary of r unit-norm atoms.

    min  mu_fit/2 ||Z - B||^2 + mu_dict/2 ||D_rem||^2 + mu_code/2 ||C_rem||^2
         + l1_weight ||C_sparse||_1 + unit_columns(D_unit)
    s.t. Z = D C,  D = D_unit + D_rem,  C = C_sparse + C_rem.
    """
    B = np.asarray(B, dtype=float)
    m, n = B.shape
    if r < 1:
        raise BuildError("dictionary needs at least one atom")
    C = BlockId("C", "x", (r, n), index=0)
    Cs = BlockId("C_sparse", "x", (r, n), index=1)
    D = BlockId("D", "x", (m, r), index=2)
    Du = BlockId("D_unit", "x", (m, r), index=3)
    Z = BlockId("Z", "z1", (m, n))
    Dr = BlockId("D_rem", "z1", (m, r))
    Cr = BlockId("C_rem", "z1", (r, n))
    system = MultiaffineSystem()
    system.add_equation([LinearTerm(_ident((m, n)), Z),
                         MatChain([D, C], sign=-1)])
    system.add_equation([MatChain([D]), MatChain([Du], sign=-1),
                         LinearTerm(_ident((m, r)), Dr, sign=-1)])
    system.add_equation([MatChain([C]), MatChain([Cs], sign=-1),
                         LinearTerm(_ident((r, n)), Cr, sign=-1)])
    objective = {Z: [Quadratic(mu_fit, center=B)],
                 Dr: [Quadratic(mu_dict)], Cr: [Quadratic(mu_code)],
                 Cs: [L1(l1_weight)], Du: [IndicatorUnitColumns()]}
    weights = (mu_fit, mu_dict, mu_code)
    metadata = {"m1": min(weights), "M1": max(weights), "M2": 0.0, "M_F": 0.0,
                "subproblem_methods": {"D": "sylvester", "C": "sylvester"}}
    problem = Problem(system, objective, metadata=metadata)
    return ZooInstance("dl3", problem, data={"B": B})


def gen_dl_data(m: int, n: int, r: int, density: float = 0.3, seed: int = 0):
    """(B, D0, C0): unit-column dictionary times a sparse code."""
    rng = np.random.default_rng(seed)
    D0 = rng.standard_normal((m, r))
    D0 = D0 / np.linalg.norm(D0, axis=0, keepdims=True)
    mask = rng.uniform(size=(r, n)) < density
    C0 = 3.0 * mask * rng.standard_normal((r, n))
    return D0 @ C0, D0, C0


# ---------------------------------------------------------------------------
# Equal-risk portfolio selection.

def rp2(covariance, lo, hi, mu: float = 1000.0) -> ZooInstance:
    """Equal risk contributions under box and budget constraints.

    Writing y = covariance @ x, the risk contribution of asset i is
    x_i * y_i; the map P sends that vector to the gaps against asset 0.  All
    four couplings carry quadratic slack blocks weighted by mu:

    min  box(x_box; lo, hi) + mu/2 (||gap||^2 + ||y_slack||^2
         + ||box_slack||^2 + ||budget_slack||^2)
    s.t. P(x * y) = gap,        y = covariance x + y_slack,
         x = x_box + box_slack, sum(x) = 1 + budget_slack.
    """
    cov = np.asarray(covariance, dtype=float)
    n = cov.shape[0]
    if cov.shape != (n, n):
        raise BuildError("covariance must be square")
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n, 1)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n, 1)).copy()
    if np.any(lo > hi) or np.sum(lo) > 1.0 or np.sum(hi) < 1.0:
        raise ValueError("infeasible box")
    x = BlockId("x", "x", (n, 1), index=0)
    xb = BlockId("x_box", "x", (n, 1), index=1)
    y = BlockId("y", "x", (n, 1), index=2)
    gap = BlockId("gap", "z1", (n, 1))
    ys = BlockId("y_slack", "z2", (n, 1))
    bs = BlockId("box_slack", "z2", (n, 1))
    gs = BlockId("budget_slack", "z2", (1, 1))
    parity = np.zeros((n, n))
    parity[1:, 0] = 1.0
    parity[1:, 1:] = -np.eye(n - 1)
    system = MultiaffineSystem()
    system.add_equation([HadamardPair(x, y, post=DenseOp(parity, (n, 1), (n, 1))),
                         LinearTerm(_ident((n, 1)), gap, sign=-1)])
    system.add_equation([MatChain([y]), MatChain([cov, x], sign=-1),
                         LinearTerm(_ident((n, 1)), ys, sign=-1)])
    system.add_equation([MatChain([x]), MatChain([xb], sign=-1),
                         LinearTerm(_ident((n, 1)), bs, sign=-1)])
    system.add_equation([MatChain([np.ones((1, n)), x]),
                         Constant([[1.0]], sign=-1),
                         LinearTerm(_ident((1, 1)), gs, sign=-1)])
    objective = {xb: [IndicatorBox(lo, hi)],
                 gap: [Quadratic(mu)], ys: [Quadratic(mu)],
                 bs: [Quadratic(mu)], gs: [Quadratic(mu)]}
    metadata = {"m1": mu, "M1": mu, "M2": mu, "M_F": 0.0,
                "subproblem_methods": {"x": "dense", "y": "dense"}}
    problem = Problem(system, objective, metadata=metadata)
    return ZooInstance("rp2", problem,
                       data={"covariance": cov, "lo": lo, "hi": hi})


def gen_rp_data(n: int, seed: int = 0):
    """(covariance, lo, hi): a well-conditioned covariance and a feasible box."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    cov = A @ A.T / n + 0.1 * np.eye(n)
    lo = np.zeros((n, 1))
    hi = np.full((n, 1), 0.5)
    return cov, lo, hi


# ---------------------------------------------------------------------------
# Graph cut relaxation.

def mc1(weights, mu_diag: float = 1000.0, mu_tie: float = 1000.0) -> ZooInstance:
    """Cut maximization on a weighted graph through a rank-one model.

    The model matrix factors as Z = row_factor^T-compatible product x y with
    y tied to x^T by a quadratic slack; diag(Z) is pulled to one so the
    factors approach sign vectors:

    min  1/4 <weights, Z - 1> + mu_diag/2 ||diag(Z) - 1||^2 + mu_tie/2 ||s||^2
    s.t. Z = x y,  x = y^T + s.

    Lower values of the linear term correspond to heavier cuts; use
    cut_value to read off the cut weight of a model matrix.
    """
    W = np.asarray(weights, dtype=float)
    n = W.shape[0]
    if W.shape != (n, n):
        raise BuildError("weights must be square")
    if np.max(np.abs(W - W.T)) > 1e-12 * (1.0 + np.max(np.abs(W))):
        raise BuildError("weights must be symmetric")
    if np.any(np.diag(W) != 0.0):
        raise BuildError("weights must have a zero diagonal")
    x = BlockId("x", "x", (n, 1), index=0)
    y = BlockId("y", "x", (1, n), index=1)
    Z = BlockId("Z", "z1", (n, n))
    s = BlockId("s", "z2", (n, 1))
    system = MultiaffineSystem()
    system.add_equation([LinearTerm(_ident((n, n)), Z),
                         MatChain([x, y], sign=-1)])
    system.add_equation([MatChain([x]),
                         LinearTerm(TransposeOp((1, n)), y, sign=-1),
                         LinearTerm(_ident((n, 1)), s, sign=-1)])
    total = float(np.sum(W))
    cut_term = SmoothCustom(
        lambda Zv: 0.25 * float(np.sum(W * Zv)) - 0.25 * total,
        lambda Zv: 0.25 * W, lipschitz=0.0, convex=True)
    objective = {Z: [Quadratic(mu_diag, center=np.ones((n, 1)),
                               linear_map=DiagExtract(n)), cut_term],
                 s: [Quadratic(mu_tie)]}
    # The smooth curvature on Z acts on its diagonal only; off-diagonal
    # directions carry just the linear cut term.  The diagonal pull is
    # declared as the governing constant, so the step bound it certifies is
    # heuristic for this family and is validated by tests, not structure.
    metadata = {"m1": mu_diag, "M1": mu_diag, "M2": mu_tie, "M_F": 0.0,
                "subproblem_methods": {"x": "sylvester", "y": "sylvester"}}
    problem = Problem(system, objective, metadata=metadata)
    return ZooInstance("mc1", problem, data={"weights": W})


def cut_value(weights, Z) -> float:
    """Cut weight read from a model matrix with +-1 entries (each edge is
    counted once)."""
    W = np.asarray(weights, dtype=float)
    return 0.25 * float(np.sum(W * (1.0 - np.asarray(Z, dtype=float))))


def triangle_graph() -> np.ndarray:
    return np.ones((3, 3)) - np.eye(3)


# ---------------------------------------------------------------------------
# Robust factorization.

def rpca2(B, k: int, lam: float = 0.5, variant: str = "slack",
          mu: float = 1.0) -> ZooInstance:
    """Split B (m x n) into a rank-k product plus a sparse outlier matrix.

    variant="slack" (default):

        min  1/2 (||U||^2 + ||Vt||^2) + lam ||S||_1 + mu/2 ||Z||^2
        s.t. U Vt + S - Z = B,

    with S swept last so its update is a plain shrinkage, and the shadow Z
    carrying the strongly convex final block.  variant="raw" drops Z and
    puts the sparse matrix itself in the final position:

        min  1/2 (||U||^2 + ||Vt||^2) + lam ||S||_1   s.t.  U Vt + S = B.

    The raw variant intentionally breaks the smooth-final-block requirement
    (metadata["assumptions_violated"] is set); the structure checker reports
    it and it exists for exactly that demonstration.  Neither variant
    declares certified curvature constants: the factor blocks' coefficient
    maps depend on the iterates, so automatic penalty selection probes.
    """
    B = np.asarray(B, dtype=float)
    m, n = B.shape
    if k < 1 or k > min(m, n):
        raise BuildError(f"rank {k} out of range for a {m} x {n} matrix")
    if variant not in ("slack", "raw"):
        raise BuildError(f"unknown variant {variant!r}; use 'slack' or 'raw'")
    U = BlockId("U", "x", (m, k), index=0)
    Vt = BlockId("Vt", "x", (k, n), index=1)
    system = MultiaffineSystem()
    if variant == "slack":
        S = BlockId("S", "x", (m, n), index=2)
        Z = BlockId("Z", "z1", (m, n))
        system.add_equation([MatChain([U, Vt]), MatChain([S]),
                             LinearTerm(_ident((m, n)), Z, sign=-1),
                             Constant(B, sign=-1)])
        objective = {U: [Quadratic(1.0)], Vt: [Quadratic(1.0)],
                     S: [L1(lam)], Z: [Quadratic(mu)]}
        metadata = {"assumptions_violated": False,
                    "subproblem_methods": {"U": "sylvester", "Vt": "sylvester"},
                    "note": "certified bound unavailable: factor coefficient "
                            "maps depend on the iterates"}
    else:
        S = BlockId("S", "z1", (m, n))
        system.add_equation([MatChain([U, Vt]),
                             LinearTerm(_ident((m, n)), S),
                             Constant(B, sign=-1)])
        objective = {U: [Quadratic(1.0)], Vt: [Quadratic(1.0)], S: [L1(lam)]}
        metadata = {"assumptions_violated": True,
                    "subproblem_methods": {"U": "sylvester", "Vt": "sylvester"},
                    "note": "final block is nonsmooth on purpose"}
    problem = Problem(system, objective, metadata=metadata)
    return ZooInstance(f"rpca2_{variant}" if variant != "slack" else "rpca2",
                       problem, data={"B": B})


def gen_rpca_data(m: int, n: int, k: int, spike_density: float = 0.05,
                  seed: int = 0):
    """(B, L0, S0): a rank-k matrix plus sparse +-5 spikes."""
    rng = np.random.default_rng(seed)
    L0 = rng.standard_normal((m, k)) @ rng.standard_normal((k, n)) / np.sqrt(k)
    mask = rng.uniform(size=(m, n)) < spike_density
    S0 = mask * rng.choice([-5.0, 5.0], size=(m, n))
    return L0 + S0, L0, S0


# ---------------------------------------------------------------------------
# Sparse blind deconvolution.

def _sparse_conv_updater(l1_weight: float, max_passes: int = _SBD_INNER_BUDGET):
    """Budgeted update for the sparse signal in a convolution.

    Splits the signal against a shadow copy and alternates a Fourier-diagonal
    quadratic step with shrinkage, running at most ``max_passes`` passes per
    call from the zero signal, the anchor of the sparsity term.  The split
    weight starts at the mean squared kernel spectrum and is rebalanced
    against the consensus residuals.  Returns the shrinkage iterate, so the
    result is exactly sparse.

    Each call is a self-contained bounded-work approximation of the
    subproblem: signal content the kernel transfers strongly is recovered
    within the budget, while content aligned with the kernel's weakest
    frequencies is not, mirroring how this update behaves at any realistic
    scale.  Formulations whose remaining blocks can absorb that leftover
    stay stable; formulations with a hard constraint push it into the
    multipliers.
    """

    def update(problem, block, assignment, multipliers, rho):
        form = freeze(problem.system, block, assignment)
        if len(form.pieces) != 1:
            raise BuildError("sparse convolution block must appear exactly once")
        piece = form.pieces[0]
        kernel = np.asarray(piece.payload, dtype=float)
        target = piece.sign * (form.offset_for(piece.eq_id)
                               - multipliers[piece.eq_id] / rho)
        shape = block.shape
        padded = np.zeros(shape)
        padded[: kernel.shape[0], : kernel.shape[1]] = kernel
        ker_hat = np.fft.rfft2(padded)
        spectrum = (ker_hat.conj() * ker_hat).real
        target_hat = np.fft.rfft2(target)
        # mean of the full two-sided spectrum, by Parseval
        mean_spec = float(np.sum(kernel * kernel))
        eta = rho * max(1.0, mean_spec)
        denom = rho * spectrum + eta
        quad_hat = rho * ker_hat.conj() * target_hat
        v, u = np.zeros(shape), np.zeros(shape)
        scale = 1.0 + float(np.linalg.norm(target))
        for it in range(max_passes):
            x = np.fft.irfft2((quad_hat + np.fft.rfft2(eta * v - u)) / denom,
                              s=shape)
            v_new = soft_threshold(x + u / eta, l1_weight / eta)
            u = u + eta * (x - v_new)
            split_res = float(np.linalg.norm(x - v_new))
            drift_res = eta * float(np.linalg.norm(v_new - v))
            gap = max(float(np.max(np.abs(x - v_new))),
                      eta * float(np.max(np.abs(v_new - v))))
            v = v_new
            if gap <= _INNER_TOL * scale:
                break
            if it % 10 == 9:
                if split_res > 10.0 * drift_res:
                    eta *= 2.0
                    denom = rho * spectrum + eta
                elif drift_res > 10.0 * split_res:
                    eta *= 0.5
                    denom = rho * spectrum + eta
        return v

    return update


def _conv_kernel_updater():
    """Proximally damped update for a small kernel convolved with a fixed
    signal.

    The normal matrix of A -> conv(A, X) has entries given by the circular
    autocorrelation of X, so it is assembled from one Fourier transform and
    solved densely.  The solve carries a proximal term anchored at the
    current kernel, the collapsed form of coupling the kernel to an inert
    copy block (see add_prox_constraint): stationary points are unchanged,
    the system stays positive definite even while the signal is zero, and
    the kernel cannot take unbounded rescaling jumps.  Without the damping,
    alternating exact steps drift the kernel scale up without limit to pay
    down the signal's sparsity cost.
    """

    def update(problem, block, assignment, multipliers, rho):
        form = freeze(problem.system, block, assignment)
        if len(form.pieces) != 1 or form.pieces[0].kind != "conv_kernel":
            raise BuildError("kernel block must appear exactly once, in a "
                             "convolution")
        piece = form.pieces[0]
        signal = np.asarray(piece.payload, dtype=float)
        target = piece.sign * (form.offset_for(piece.eq_id)
                               - multipliers[piece.eq_id] / rho)
        p, q = block.shape
        n1, n2 = signal.shape
        spec = np.abs(np.fft.rfft2(signal)) ** 2
        autocorr = np.fft.irfft2(spec, s=(n1, n2))
        d1 = (np.arange(p)[:, None] - np.arange(p)[None, :]) % n1
        d2 = (np.arange(q)[:, None] - np.arange(q)[None, :]) % n2
        normal = autocorr[d1[:, None, :, None], d2[None, :, None, :]]
        normal = normal.reshape(p * q, p * q)
        rhs = np.ravel(_conv_adjoint_kernel(signal, target, (p, q)))
        current = np.ravel(assignment[block])
        gap = rhs - normal @ current
        damp = _KERNEL_PROX_WEIGHT * np.eye(p * q)
        delta = np.linalg.solve(normal + damp, gap)
        return (current + delta).reshape(p, q)

    return update


def _sbd_instance(Y, kernel_shape, mu, l1_weight, with_shadow: bool) -> ZooInstance:
    Y = np.asarray(Y, dtype=float)
    n1, n2 = Y.shape
    p, q = kernel_shape
    if p > n1 or q > n2:
        raise BuildError(f"kernel {kernel_shape} larger than the signal {Y.shape}")
    A = BlockId("A", "x", (p, q), index=0)
    X = BlockId("X", "x", (n1, n2), index=1)
    b = BlockId("b", "x", (1, 1), index=2)
    terms = [Conv2D(A, X), LinearTerm(BroadcastOnes((n1, n2)), b),
             Constant(Y, sign=-1)]
    objective = {X: [L1(l1_weight)]}
    methods = {"A": "autocorrelation normal-matrix solve",
               "X": "inner split solver (FFT)"}
    if with_shadow:
        Z = BlockId("Z", "z1", (n1, n2))
        terms.insert(2, LinearTerm(_ident((n1, n2)), Z, sign=-1))
        objective[Z] = [Quadratic(mu)]
        metadata = {"m1": mu, "M1": mu, "M2": 0.0, "M_F": 0.0,
                    "assumptions_violated": False,
                    "subproblem_methods": methods}
        name = "sbd1"
    else:
        metadata = {"assumptions_violated": True,
                    "subproblem_methods": methods,
                    "note": "no block spans the constraint image; multipliers "
                            "can escape under noise"}
        name = "sbd0"
    system = MultiaffineSystem()
    system.add_equation(terms)
    problem = Problem(system, objective,
                      custom_updaters={"X": _sparse_conv_updater(l1_weight),
                                       "A": _conv_kernel_updater()},
                      metadata=metadata)
    delta = np.zeros((p, q))
    delta[0, 0] = 1.0
    init = {"A": delta, "X": np.zeros((n1, n2)),
            "b": np.array([[float(np.mean(Y))]])}
    if with_shadow:
        init["Z"] = np.zeros((n1, n2))
    return ZooInstance(name, problem,
                       data={"Y": Y, "kernel_shape": (p, q)}, init=init)


def sbd1(Y, kernel_shape, mu: float = 500.0, l1_weight: float = 1.0) -> ZooInstance:
    """Blind deconvolution of Y into a small kernel, a sparse signal, and a
    bias, with a shadow block absorbing what the model cannot represent.

    min  ||X||_1 + mu/2 ||Z||^2
    s.t. A (*) X + b 1 - Z = Y     ((*) is circular 2-D convolution).
    """
    return _sbd_instance(Y, kernel_shape, mu, l1_weight, with_shadow=True)


def sbd0(Y, kernel_shape, l1_weight: float = 1.0) -> ZooInstance:
    """sbd1 without the shadow block: A (*) X + b 1 = Y must hold exactly.

    No block spans the constraint image, so with data the model cannot
    represent the multipliers lose every anchor the theory provides; the
    structure checker rejects this variant, and it exists to demonstrate
    that rejection.
    """
    return _sbd_instance(Y, kernel_shape, 0.0, l1_weight, with_shadow=False)


def gen_sbd_data(n: int, kernel_shape, theta: float = 0.05,
                 sigma: float = 0.0, bias: float = 0.0, seed: int = 0):
    """(Y, A0, X0, b0): unit-norm kernel, Bernoulli-Gaussian signal, bias,
    and Gaussian noise at level sigma."""
    rng = np.random.default_rng(seed)
    p, q = kernel_shape
    A0 = rng.standard_normal((p, q))
    A0 = A0 / np.linalg.norm(A0)
    X0 = (rng.uniform(size=(n, n)) < theta) * rng.standard_normal((n, n))
    Y = circ_conv2(A0, X0) + bias
    if sigma > 0.0:
        Y = Y + sigma * rng.standard_normal((n, n))
    return Y, A0, X0, np.array([[float(bias)]])


# ---------------------------------------------------------------------------
# Default instances at desk scale.

def _default_nmf3(seed):
    B, X0, Y0 = gen_nmf_data(20, 20, 3, seed=seed)
    inst = nmf3(B, 3)
    inst.truth.update({"X": X0, "Y": Y0})
    return inst


def _default_dl3(seed):
    B, D0, C0 = gen_dl_data(50, 50, 10, seed=seed)
    inst = dl3(B, 10)
    inst.truth.update({"D": D0, "C": C0})
    return inst


def _default_rp2(seed):
    cov, lo, hi = gen_rp_data(6, seed=seed)
    return rp2(cov, lo, hi)


def _default_mc1(seed):
    return mc1(triangle_graph())


def _default_rpca2(seed):
    B, L0, S0 = gen_rpca_data(20, 16, 3, seed=seed)
    inst = rpca2(B, 3)
    inst.truth.update({"L": L0, "S": S0})
    return inst


def _default_rpca2_raw(seed):
    B, L0, S0 = gen_rpca_data(20, 16, 3, seed=seed)
    inst = rpca2(B, 3, variant="raw")
    inst.truth.update({"L": L0, "S": S0})
    return inst


def _default_sbd1(seed):
    Y, A0, X0, b0 = gen_sbd_data(32, (8, 8), theta=0.05, bias=0.1, seed=seed)
    inst = sbd1(Y, (8, 8))
    inst.truth.update({"A": A0, "X": X0, "b": b0})
    return inst


def _default_sbd0(seed):
    Y, A0, X0, b0 = gen_sbd_data(32, (8, 8), theta=0.05, bias=0.1, seed=seed)
    inst = sbd0(Y, (8, 8))
    inst.truth.update({"A": A0, "X": X0, "b": b0})
    return inst


_DEFAULTS = {"nmf3": _default_nmf3, "dl3": _default_dl3, "rp2": _default_rp2,
             "mc1": _default_mc1, "rpca2": _default_rpca2,
             "rpca2_raw": _default_rpca2_raw, "sbd1": _default_sbd1,
             "sbd0": _default_sbd0}


def zoo_names():
    return sorted(_DEFAULTS)


def default_instance(name: str, seed: int = 0) -> ZooInstance:
    """Canonical desk-scale instance of a family, with planted truth where
    the family has one."""
    try:
        builder = _DEFAULTS[name]
    except KeyError:
        raise BuildError(
            f"unknown zoo problem {name!r}; choose from {zoo_names()}") from None
    return builder(seed)
