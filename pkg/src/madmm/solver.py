"""Block-coordinate method of multipliers for multiaffine constraint systems.

One iteration sweeps the x-role blocks in a fixed order, each minimizing the
augmented Lagrangian

    L(U, W) = phi(U) + sum_e <W_e, C_e(U)> + (rho / 2) * sum_e ||C_e(U)||^2

with every other block frozen, then minimizes jointly over the final z-role
group, then takes the dual ascent step W_e <- W_e + rho * C_e(U) for every
equation.  Each x subproblem is solved exactly: a smooth block reduces to the
quadratic solver in prox.py, a block carrying one separable nonsmooth term
reduces to a single proximal step, and anything else must register a custom
updater.  The z blocks split into connected components (blocks tied by a
shared equation); a component is solved jointly when that is exact and by
cyclic coordinate passes otherwise, with the pass count recorded per
iteration.

The penalty weight rho can be given explicitly, certified from curvature
constants declared in the problem metadata via rho_lower_bound, or found by
doubling until a short trial run keeps L nonincreasing.  Statuses are plain
strings so callers can switch on them without extra imports.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import BuildError, ShapeMismatchError, SubproblemError
from .operators import DenseOp, LinearOp
from .prox import (CouplingTerm, IndicatorBox, IndicatorNonneg,
                   IndicatorUnitColumns, L1, ObjectiveTerm, Quadratic,
                   SmoothCustom, _QuadPieces, quad_block_solve)
from .system import (BlockId, LinearTerm, MatChain, MultiaffineSystem,
                     ROLE_X, ROLE_Z1, ROLE_Z2, blocks_in, evaluate, freeze,
                     FrozenLinearForm, stack_residual)

STATUS_CONVERGED = "Converged"
STATUS_MAXITER = "MaxIter"
STATUS_DIVERGED = "Diverged"

_ROLE_ORDER = {"x": 0, "z0": 1, "z1": 2, "z2": 3}
_DIVERGE_LIMIT = 1e12
_Z_INNER_TOL = 1e-12
_Z_INNER_MAX_PASSES = 100
_SPECTRUM_LIMIT = 1500
_CONVERGED_STREAK = 3


def _block_key(block: BlockId):
    return (_ROLE_ORDER[block.role], block.index, block.name)


@dataclass(frozen=True)
class Violation:
    """One failed runtime check; magnitude is the amount over the tolerance."""

    check: str
    magnitude: float
    tol: float
    detail: str = ""


@dataclass
class IterTrace:
    """Per-iteration record; wall_ms is the only nondeterministic field."""

    k: int
    L: float
    primal_res: float
    dual_step: float
    block_steps: dict
    stat_est: float
    wall_ms: float
    z_inner_passes: int = 0
    z_inexact: bool = False
    violations: tuple = ()


@dataclass
class SolverState:
    assignment: dict          # BlockId -> array
    multipliers: dict         # eq_id -> array
    rho: float
    k: int = 0

    def copy(self) -> "SolverState":
        return SolverState({b: np.array(v) for b, v in self.assignment.items()},
                           {e: np.array(w) for e, w in self.multipliers.items()},
                           self.rho, self.k)


class Problem:
    """A constraint system plus objective terms, validated and ready to run.

    ``objective`` maps blocks (BlockId or name) to lists of ObjectiveTerm;
    blocks may be absent.  ``coupling`` lists CouplingTerm objects whose
    per-block gradients are verified to be affine at build time.
    ``update_order`` must list every x-role block exactly once and defaults
    to (index, name) order.  ``custom_updaters`` maps block names to

        fn(problem, block, assignment, multipliers, rho) -> array

    which must return the exact minimizer of L over that block.  ``metadata``
    is free-form; the keys "m1", "M1", "M2", "M_F" and "r_blocks" feed the
    certified penalty bound, and "subproblem_methods" is advisory.
    """

    def __init__(self, system: MultiaffineSystem, objective=None, coupling=(),
                 update_order=None, custom_updaters=None, metadata=None):
        self.system = system
        self.coupling = list(coupling or ())
        self.custom_updaters = dict(custom_updaters or {})
        self.metadata = dict(metadata or {})
        self.objective = {}
        for key, terms in (objective or {}).items():
            self.objective[self._resolve(key)] = list(terms)
        x_blocks = sorted(system.blocks_with_role(ROLE_X), key=_block_key)
        if update_order is None:
            self.update_order = x_blocks
        else:
            order = [self._resolve(k) for k in update_order]
            if len(set(order)) != len(order) or sorted(order, key=_block_key) != x_blocks:
                raise BuildError("update_order must list every x-role block exactly once")
            self.update_order = order
        self.z_order = sorted((b for b in system.blocks.values() if b.role != ROLE_X),
                              key=_block_key)
        self._validate()
        self._z_components = self._build_z_components()

    def _resolve(self, key) -> BlockId:
        if isinstance(key, BlockId):
            if self.system.blocks.get(key.name) != key:
                raise BuildError(f"block {key.name!r} is not part of the system")
            return key
        block = self.system.blocks.get(key)
        if block is None:
            raise BuildError(f"unknown block {key!r}")
        return block

    def terms_for(self, block: BlockId):
        return self.objective.get(block, ())

    def nonsmooth_term(self, block: BlockId):
        for t in self.terms_for(block):
            if not t.smooth:
                return t
        return None

    @property
    def all_blocks(self):
        return list(self.update_order) + list(self.z_order)

    def z_components(self):
        """(blocks, mode) pairs; mode is "single", "joint" or "cyclic"."""
        return self._z_components

    def _validate(self):
        for name in self.custom_updaters:
            if name not in self.system.blocks:
                raise BuildError(f"custom updater for unknown block {name!r}")
        for block, terms in self.objective.items():
            for t in terms:
                if not isinstance(t, ObjectiveTerm):
                    raise BuildError(
                        f"objective for {block.name!r} contains "
                        f"{type(t).__name__}; expected ObjectiveTerm")
            nonsmooth = [t for t in terms if not t.smooth]
            if len(nonsmooth) > 1:
                raise BuildError(
                    f"block {block.name!r} carries {len(nonsmooth)} nonsmooth "
                    "terms; at most one is supported")
            if block.name in self.custom_updaters:
                continue
            for t in terms:
                if isinstance(t, SmoothCustom) and t.lipschitz != 0.0:
                    raise BuildError(
                        f"block {block.name!r} has a smooth term with curvature; "
                        "register a custom updater")
            if nonsmooth:
                msg = _prox_structure_error(self.system, block)
                if msg:
                    raise BuildError(msg)
        for c in self.coupling:
            if not isinstance(c, CouplingTerm):
                raise BuildError(f"coupling entry {type(c).__name__} is not a CouplingTerm")
            for b in c.blocks:
                self._resolve(b)
            if c.affine_per_block:
                _check_affine_coupling(c)
            else:
                missing = [b.name for b in c.blocks if b.name not in self.custom_updaters]
                if missing:
                    raise BuildError(
                        "coupling term is not affine per block; blocks "
                        f"{missing} need custom updaters")

    def _build_z_components(self):
        zs = self.z_order
        if not zs:
            return []
        parent = {b: b for b in zs}

        def find(b):
            while parent[b] != b:
                parent[b] = parent[parent[b]]
                b = parent[b]
            return b

        entangled_pairs = []
        for eq_id, terms in self.system.equations:
            eq_zs = []
            for term in terms:
                term_zs = [b for b in blocks_in(term) if b.role != ROLE_X]
                if len(set(term_zs)) > 1:
                    entangled_pairs.append(tuple(term_zs[:2]))
                eq_zs.extend(term_zs)
            uniq = list(dict.fromkeys(eq_zs))
            for a, b in zip(uniq, uniq[1:]):
                ra, rb = find(a), find(b)
                if ra != rb:
                    parent[ra] = rb
        for c in self.coupling:
            c_zs = list(dict.fromkeys(b for b in c.blocks if b.role != ROLE_X))
            for a, b in zip(c_zs, c_zs[1:]):
                # Coupling inside one component breaks the joint quadratic
                # model, so force cyclic passes there.
                entangled_pairs.append((a, b))

        comps = {}
        for b in zs:
            comps.setdefault(find(b), []).append(b)
        tangled_roots = set()
        for a, b in entangled_pairs:
            if find(a) == find(b):
                tangled_roots.add(find(a))

        out = []
        for root, blocks in comps.items():
            blocks = sorted(blocks, key=_block_key)
            if len(blocks) == 1:
                mode = "single"
            elif (root in tangled_roots
                  or any(b.name in self.custom_updaters for b in blocks)
                  or any(self.nonsmooth_term(b) is not None for b in blocks)):
                mode = "cyclic"
            else:
                mode = "joint"
            out.append((tuple(blocks), mode))
        out.sort(key=lambda pair: _block_key(pair[0][0]))
        return out


def _check_affine_coupling(c: CouplingTerm):
    rng = np.random.default_rng(1234)
    base = {b.name: rng.standard_normal(b.shape) for b in c.blocks}
    for b in c.blocks:
        g1 = c.grad_block(base, b.name)
        alt = dict(base)
        alt[b.name] = rng.standard_normal(b.shape)
        g2 = c.grad_block(alt, b.name)
        if np.linalg.norm(g1 - g2) > 1e-8 * (1.0 + np.linalg.norm(g1)):
            raise BuildError(
                f"coupling gradient for {b.name!r} varies with the block "
                "itself; it is not affine per block")


def _prox_structure_error(system: MultiaffineSystem, block: BlockId):
    """None when every occurrence of `block` supports an exact proximal step."""
    for eq_id, terms in system.equations:
        occ = [t for t in terms if block in blocks_in(t)]
        if not occ:
            continue
        idents = 0
        gram_ok = 0
        for term in occ:
            if isinstance(term, MatChain) and len(term.factors) == 1:
                idents += 1
            elif isinstance(term, LinearTerm):
                if term.op.identity_scale is not None:
                    idents += 1
                elif term.op.gram_scalar() is not None:
                    gram_ok += 1
        if idents == len(occ):
            continue
        if len(occ) == 1 and gram_ok == 1:
            continue
        return (f"nonsmooth block {block.name!r} enters equation {eq_id} "
                "through a map whose gram is not a scalar multiple of the "
                "identity; register a custom updater")
    return None


def _named_values(problem: Problem, assignment: dict) -> dict:
    return {b.name: assignment[b] for b in problem.system.blocks.values()}


def _al(problem: Problem, assignment: dict, multipliers: dict, rho: float) -> float:
    phi = 0.0
    for block, terms in problem.objective.items():
        x = assignment[block]
        for t in terms:
            v = t.value(x)
            if not v < np.inf:
                return math.inf
            phi += v
    if problem.coupling:
        values = _named_values(problem, assignment)
        for c in problem.coupling:
            phi += c.value(values)
    total = phi
    for eq_id, r in zip(problem.system.eq_ids, evaluate(problem.system, assignment)):
        w = multipliers[eq_id]
        total += float(np.sum(w * r)) + 0.5 * rho * float(np.sum(r * r))
    return float(total)


def augmented_lagrangian(problem: Problem, state: SolverState) -> float:
    """L at the state's assignment, multipliers and rho; +inf when infeasible
    for an indicator term."""
    return _al(problem, state.assignment, state.multipliers, state.rho)


def _smooth_extras(problem: Problem, block: BlockId, assignment: dict) -> list:
    extras = [t for t in problem.terms_for(block) if t.smooth]
    touching = [c for c in problem.coupling if block in c.blocks]
    if touching:
        values = _named_values(problem, assignment)
        for c in touching:
            # Affine per block, so the gradient is a constant linear term
            # for this subproblem.
            extras.append(c.grad_block(values, block.name))
    return extras


def _composite_prox_update(form: FrozenLinearForm, block: BlockId,
                           multipliers: dict, rho: float, extras: list,
                           nonsmooth: ObjectiveTerm) -> np.ndarray:
    kappa = 0.0
    lin = np.zeros(block.dim)
    for eq_id, _ in form.eq_dims:
        plist = [p for p in form.pieces if p.eq_id == eq_id]
        if not plist:
            continue
        target = rho * form.offset_for(eq_id) - multipliers[eq_id]
        if all(p.kind == "scaled_identity" for p in plist):
            t = sum(p.sign * p.payload for p in plist)
            kappa += rho * t * t
            lin += t * np.ravel(target)
        elif len(plist) == 1 and plist[0].kind == "linear_op":
            c = plist[0].payload.gram_scalar()
            if c is None:
                raise BuildError(
                    f"nonsmooth block {block.name!r} lacks a scalar-gram "
                    "occurrence; cannot take a proximal step")
            kappa += rho * c
            lin += np.ravel(plist[0].adjoint(target))
        else:
            raise BuildError(
                f"nonsmooth block {block.name!r} has a non-orthogonal "
                "occurrence; cannot take a proximal step")
    for item in extras:
        if isinstance(item, Quadratic):
            cur = item.identity_curvature
            if cur is None:
                raise BuildError(
                    f"quadratic term on nonsmooth block {block.name!r} must "
                    "act through a map with scalar gram")
            kappa += cur
            if item.center is not None and item.weight != 0.0:
                back = (item.linear_map.adjoint(item.center)
                        if item.linear_map is not None else item.center)
                lin += item.weight * np.ravel(back)
        elif isinstance(item, SmoothCustom):
            lin -= np.ravel(item.grad(np.zeros(block.shape)))
        else:
            lin -= np.ravel(np.asarray(item, dtype=float))
    if kappa <= 0.0:
        raise BuildError(f"proximal update for {block.name!r} has no curvature")
    point = (lin / kappa).reshape(block.shape)
    return np.asarray(nonsmooth.prox(point, 1.0 / kappa), dtype=float)


def _update_block(problem: Problem, block: BlockId, assignment: dict,
                  multipliers: dict, rho: float, cg_tol, cg_maxit) -> np.ndarray:
    custom = problem.custom_updaters.get(block.name)
    if custom is not None:
        new = np.asarray(custom(problem, block, assignment, multipliers, rho),
                         dtype=float)
        if new.shape != block.shape:
            raise SubproblemError(
                f"custom updater for {block.name!r} returned shape "
                f"{new.shape}, declared {block.shape}", block=block.name)
        return new
    form = freeze(problem.system, block, assignment)
    extras = _smooth_extras(problem, block, assignment)
    nonsmooth = problem.nonsmooth_term(block)
    if nonsmooth is not None:
        return _composite_prox_update(form, block, multipliers, rho, extras,
                                      nonsmooth)
    return quad_block_solve(form, dict(multipliers), rho, extras=extras,
                            cg_tol=cg_tol, cg_maxit=cg_maxit,
                            y0=assignment[block])


def _update_z_group(problem: Problem, assignment: dict, multipliers: dict,
                    rho: float, cg_tol, cg_maxit, block_steps: dict):
    passes = 0
    inexact = False
    for blocks, mode in problem.z_components():
        if mode == "single":
            b = blocks[0]
            new = _update_block(problem, b, assignment, multipliers, rho,
                                cg_tol, cg_maxit)
            block_steps[b.name] = float(np.linalg.norm(new - assignment[b]))
            assignment[b] = new
        elif mode == "joint":
            form = freeze(problem.system, tuple(blocks), assignment)
            extras = []
            for b in blocks:
                for item in _smooth_extras(problem, b, assignment):
                    extras.append((b.name, item))
            y0 = {b.name: assignment[b] for b in blocks}
            res = quad_block_solve(form, dict(multipliers), rho, extras=extras,
                                   cg_tol=cg_tol, cg_maxit=cg_maxit, y0=y0)
            for b in blocks:
                new = np.asarray(res[b.name], dtype=float)
                block_steps[b.name] = float(np.linalg.norm(new - assignment[b]))
                assignment[b] = new
        else:
            inexact = True
            starts = {b: assignment[b] for b in blocks}
            for _ in range(_Z_INNER_MAX_PASSES):
                passes += 1
                worst = 0.0
                for b in blocks:
                    new = _update_block(problem, b, assignment, multipliers,
                                        rho, cg_tol, cg_maxit)
                    worst = max(worst, float(np.linalg.norm(new - assignment[b])))
                    assignment[b] = new
                if worst < _Z_INNER_TOL:
                    break
            for b in blocks:
                block_steps[b.name] = float(np.linalg.norm(assignment[b] - starts[b]))
    return passes, inexact


def _stationarity(problem: Problem, assignment: dict, multipliers: dict):
    """Per-block first-order residuals and their maximum.

    For a smooth block this is the norm of the partial gradient of L's linear
    part, grad phi_block + C'_block^T W; for a block with one separable
    nonsmooth term it is the distance of that gradient to the negative
    subdifferential (normal cone for indicators).
    """
    parts = {}
    values = _named_values(problem, assignment)
    for block in problem.all_blocks:
        form = freeze(problem.system, block, assignment)
        g = np.asarray(form.adjoint_eqs(multipliers), dtype=float)
        for t in problem.terms_for(block):
            if t.smooth:
                g = g + t.grad(assignment[block])
        for c in problem.coupling:
            if block in c.blocks:
                g = g + c.grad_block(values, block.name)
        parts[block.name] = _nonsmooth_stat_residual(
            problem.nonsmooth_term(block), assignment[block], g)
    agg = max(parts.values()) if parts else 0.0
    return parts, agg


def _nonsmooth_stat_residual(term, x, g) -> float:
    g = np.asarray(g, dtype=float)
    if term is None:
        return float(np.linalg.norm(g))
    x = np.asarray(x, dtype=float)
    if isinstance(term, L1):
        lam = term.weight
        on = np.abs(x) > 1e-12
        r = np.where(on, np.abs(g + lam * np.sign(x)),
                     np.maximum(np.abs(g) - lam, 0.0))
        return float(np.linalg.norm(r))
    if isinstance(term, IndicatorNonneg):
        r = np.where(x <= 1e-9, np.maximum(-g, 0.0), np.abs(g))
        return float(np.linalg.norm(r))
    if isinstance(term, IndicatorBox):
        lo = np.broadcast_to(term.lo, x.shape)
        hi = np.broadcast_to(term.hi, x.shape)
        span = 1e-9 * (1.0 + np.abs(hi - lo))
        at_lo = x <= lo + span
        at_hi = x >= hi - span
        r = np.where(at_lo & at_hi, 0.0,
                     np.where(at_lo, np.maximum(-g, 0.0),
                              np.where(at_hi, np.maximum(g, 0.0), np.abs(g))))
        return float(np.linalg.norm(r))
    if isinstance(term, IndicatorUnitColumns):
        norms = np.linalg.norm(x, axis=0, keepdims=True)
        xn = x / np.where(norms > 0, norms, 1.0)
        tangent = g - xn * np.sum(xn * g, axis=0, keepdims=True)
        return float(np.linalg.norm(tangent))
    # Unknown nonsmooth term: report the raw gradient norm.
    return float(np.linalg.norm(g))


def step(problem: Problem, state: SolverState, *, cg_tol=None, cg_maxit=None,
         check_argmin: bool = False):
    """One full iteration; returns (new_state, IterTrace).

    check_argmin re-evaluates L after every block update and records a
    Violation when it rose beyond solver tolerance (exact minimization over
    one block can never increase L).
    """
    t0 = time.perf_counter()
    rho = state.rho
    system = problem.system
    assignment = dict(state.assignment)
    multipliers = state.multipliers
    k_next = state.k + 1
    block_steps = {}
    violations = []
    argmin_tol = 10.0 * (cg_tol if cg_tol is not None else 1e-10)
    L_track = _al(problem, assignment, multipliers, rho) if check_argmin else None

    def _argmin_check(label):
        nonlocal L_track
        L_now = _al(problem, assignment, multipliers, rho)
        tol = argmin_tol * (1.0 + abs(L_now) if math.isfinite(L_now) else 1.0)
        if math.isfinite(L_track) and L_now > L_track + tol:
            violations.append(Violation("block_argmin", float(L_now - L_track),
                                        tol, f"L rose while updating {label}"))
        L_track = L_now

    try:
        for block in problem.update_order:
            new = _update_block(problem, block, assignment, multipliers, rho,
                                cg_tol, cg_maxit)
            block_steps[block.name] = float(np.linalg.norm(new - assignment[block]))
            assignment[block] = new
            if check_argmin:
                _argmin_check(repr(block.name))
        z_passes, z_inexact = _update_z_group(problem, assignment, multipliers,
                                              rho, cg_tol, cg_maxit, block_steps)
        if check_argmin and problem.z_order:
            _argmin_check("the z group")
    except SubproblemError as exc:
        if exc.k < 0:
            exc.k = k_next
        raise

    residuals = evaluate(system, assignment)
    mults_new = {}
    dual_sq = 0.0
    for eq_id, r in zip(system.eq_ids, residuals):
        delta = rho * r
        mults_new[eq_id] = multipliers[eq_id] + delta
        dual_sq += float(np.sum(delta * delta))
    primal = float(np.linalg.norm(stack_residual(residuals)))
    L_new = _al(problem, assignment, mults_new, rho)
    _, stat = _stationarity(problem, assignment, mults_new)
    new_state = SolverState(assignment, mults_new, rho, k_next)
    trace = IterTrace(k=k_next, L=float(L_new), primal_res=primal,
                      dual_step=math.sqrt(dual_sq), block_steps=block_steps,
                      stat_est=float(stat),
                      wall_ms=(time.perf_counter() - t0) * 1000.0,
                      z_inner_passes=z_passes, z_inexact=z_inexact,
                      violations=tuple(violations))
    return new_state, trace


def solve(problem: Problem, *, rho=None, max_iter: int = 500,
          tol_primal: float = 1e-8, tol_step: float = 1e-8, seed: int = 0,
          assert_level: str = "none", init=None, cg_tol=None, cg_maxit=None):
    """Run the solver; returns (state, traces, status).

    rho=None picks the penalty automatically: certified from metadata
    curvature constants when they are declared, otherwise by doubling from 1
    until a 10-iteration trial keeps L nonincreasing.  Initial blocks are
    unit-Frobenius Gaussian draws (seeded; one draw per block in sorted order,
    so runs are reproducible bit for bit), overridden per block by ``init``.
    Convergence requires the stacked residual norm to fall below
    tol_primal * (1 + ||C(0)||) with every block step below tol_step on
    3 consecutive iterations.  Divergence (a status, not an exception) is
    declared when L or the multiplier norm passes 1e12 or stops being finite.
    assert_level "basic" attaches per-iteration invariant violations to the
    traces; "strict" additionally checks per-block descent and raises
    AssertionError on any violation.
    """
    if assert_level not in ("none", "basic", "strict"):
        raise ValueError(f"unknown assert_level {assert_level!r}")
    if max_iter < 0:
        raise ValueError("max_iter must be nonnegative")
    system = problem.system
    blocks = sorted(system.blocks.values(), key=_block_key)
    if not blocks:
        raise BuildError("the system has no variable blocks")

    init_map = {}
    if init:
        for key, v in init.items():
            block = problem._resolve(key)
            arr = np.asarray(v, dtype=float)
            if arr.shape != block.shape:
                raise ShapeMismatchError(
                    f"initial value for {block.name!r} has shape {arr.shape}, "
                    f"declared {block.shape}", block=block.name)
            init_map[block] = arr.copy()
    rng = np.random.default_rng(seed)
    assignment = {}
    for b in blocks:
        draw = rng.standard_normal(b.shape)
        norm = float(np.linalg.norm(draw))
        if norm > 0.0:
            draw = draw / norm
        assignment[b] = init_map.get(b, draw)
    multipliers = {e: np.zeros(system.eq_shape(e)) for e in system.eq_ids}
    zero_assign = {b: np.zeros(b.shape) for b in blocks}
    offsets_norm = float(np.linalg.norm(
        stack_residual(evaluate(system, zero_assign))))

    certified = False
    if rho is None or rho == "auto":
        rho_val, certified = _auto_rho(problem, assignment, cg_tol, cg_maxit)
    elif isinstance(rho, str):
        raise ValueError(f"unknown rho policy {rho!r}")
    else:
        rho_val = float(rho)
        if not rho_val > 0.0:
            raise ValueError("rho must be positive")

    current = SolverState(assignment, multipliers, rho_val, 0)
    traces = []
    if max_iter == 0:
        return current, traces, STATUS_MAXITER
    status = STATUS_MAXITER
    streak = 0
    for _ in range(max_iter):
        prev = current
        current, tr = step(problem, prev, cg_tol=cg_tol, cg_maxit=cg_maxit,
                           check_argmin=(assert_level == "strict"))
        if assert_level != "none":
            from . import diagnostics
            extra = diagnostics.assert_iteration(problem, prev, current, tr,
                                                 level=assert_level,
                                                 rho_certified=certified)
            if extra:
                tr.violations = tr.violations + tuple(extra)
        traces.append(tr)
        w_sq = sum(float(np.sum(w * w)) for w in current.multipliers.values())
        if not math.isfinite(tr.L) or tr.L > _DIVERGE_LIMIT \
                or w_sq > _DIVERGE_LIMIT ** 2:
            status = STATUS_DIVERGED
            break
        max_step = max(tr.block_steps.values(), default=0.0)
        if tr.primal_res <= tol_primal * (1.0 + offsets_norm) \
                and max_step <= tol_step:
            streak += 1
        else:
            streak = 0
        if streak >= _CONVERGED_STREAK:
            status = STATUS_CONVERGED
            break
    return current, traces, status


def _auto_rho(problem: Problem, assignment: dict, cg_tol, cg_maxit):
    """(rho, certified): the metadata bound when available, else a probe."""
    md = problem.metadata
    system = problem.system
    z1 = [b for b in problem.z_order if b.role == ROLE_Z1]
    z2 = [b for b in problem.z_order if b.role == ROLE_Z2]
    if "m1" in md and "M1" in md and z1:
        q1 = freeze(system, tuple(z1), assignment)
        q2 = freeze(system, tuple(z2), assignment) if z2 else None
        r_blocks = [(freeze(system, system.blocks[name], assignment), float(mu))
                    for name, mu in md.get("r_blocks", ())]
        rho = rho_lower_bound(float(md["m1"]), float(md["M1"]),
                              float(md.get("M2", 0.0)),
                              float(md.get("M_F", 0.0)), q1, q2, r_blocks)
        return rho, True
    base = {b: np.array(v) for b, v in assignment.items()}
    rho_try = 1.0
    for _ in range(40):
        if _probe_ok(problem, base, rho_try, cg_tol, cg_maxit):
            return rho_try, False
        rho_try *= 2.0
    return rho_try, False


def _probe_ok(problem: Problem, base: dict, rho: float, cg_tol, cg_maxit,
              iters: int = 10) -> bool:
    st = SolverState({b: np.array(v) for b, v in base.items()},
                     {e: np.zeros(problem.system.eq_shape(e))
                      for e in problem.system.eq_ids}, rho, 0)
    values = [_al(problem, st.assignment, st.multipliers, rho)]
    try:
        for _ in range(iters):
            st, tr = step(problem, st, cg_tol=cg_tol, cg_maxit=cg_maxit)
            values.append(tr.L)
    except SubproblemError:
        return False
    for a, b in zip(values, values[1:]):
        if not math.isfinite(b):
            return False
        if math.isfinite(a) and b > a + 1e-10 * (1.0 + abs(a)):
            return False
    return True


def _min_pos_from_eigs(eigs: np.ndarray, tol: float):
    """(smallest eigenvalue after zeroing, smallest positive eigenvalue)."""
    eigs = np.sort(np.asarray(eigs, dtype=float))
    lam_max = eigs[-1]
    if eigs[0] < -tol * max(abs(lam_max), 1.0):
        raise ValueError("matrix is not positive semidefinite within tolerance")
    if lam_max <= 0.0:
        raise ValueError("matrix has no positive eigenvalue")
    thr = tol * lam_max
    eigs = np.where(eigs < thr, 0.0, eigs)
    positives = eigs[eigs > 0.0]
    if positives.size == 0:
        raise ValueError("matrix has no positive eigenvalue")
    return float(eigs[0]), float(positives.min())


def lambda_min_pos(M, tol: float = 1e-9):
    """(lambda_min, lambda_min_positive) of a symmetric PSD matrix.

    Eigenvalues below tol * lambda_max count as zero; lambda_min is taken
    after that truncation.  Raises ValueError for matrices that are
    asymmetric, indefinite beyond the tolerance, or have no positive
    eigenvalue.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.size == 0:
        raise ValueError("a nonempty square matrix is required")
    scale = float(np.max(np.abs(M)))
    if float(np.max(np.abs(M - M.T))) > tol * (1.0 + scale):
        raise ValueError("matrix is not symmetric")
    eigs = np.linalg.eigvalsh((M + M.T) / 2.0)
    return _min_pos_from_eigs(eigs, tol)


def _gram_eigenvalues(q):
    """Ascending eigenvalues of Q^T Q for an operator, matrix or frozen form."""
    if q is None:
        return None
    if isinstance(q, FrozenLinearForm):
        pieces = _QuadPieces(q, np.zeros(q.out_dim), 1.0, [])
        diag = pieces.normal_diag()
        if diag is not None:
            return np.sort(np.asarray(diag, dtype=float))
        n = q.in_dim
        if n > _SPECTRUM_LIMIT:
            raise BuildError(
                f"constraint map with {n} columns is too large for a dense "
                "spectrum")
        gram = np.empty((n, n))
        basis = np.zeros(n)
        for j in range(n):
            basis[j] = 1.0
            gram[:, j] = pieces.normal_apply(basis)
            basis[j] = 0.0
        return np.linalg.eigvalsh((gram + gram.T) / 2.0)
    if isinstance(q, LinearOp):
        gd = q.gram_diag()
        if gd is not None:
            return np.sort(np.asarray(gd, dtype=float))
        dense = q.to_dense()
        if dense is None:
            raise BuildError("operator is too large for a dense spectrum")
        return np.linalg.eigvalsh(dense.T @ dense)
    mat = np.asarray(q, dtype=float)
    if mat.ndim != 2:
        raise BuildError("Q must be a LinearOp, a matrix, or a frozen form")
    return np.linalg.eigvalsh(mat.T @ mat)


def rho_lower_bound(m1: float, M1: float, M2: float, M_F: float, q1, q2,
                    r_blocks=()) -> float:
    """Smallest grid penalty 1e-3 * 1.05**k meeting the descent conditions.

    m1/M1 bound the curvature of the smooth coupled term over the z1 blocks,
    M2 its gradient Lipschitz constant over the z2 blocks, and M_F the
    Lipschitz constant of the separable smooth remainder.  q1/q2 are the
    constraint coefficient maps of the z1/z2 groups (LinearOp, matrix, or a
    frozen form over those blocks); q2 may be None when there are no z2
    blocks, which requires M2 == 0.  r_blocks lists (map, mu) pairs for
    blocks whose own coefficient map must be injective, adding the condition
    rho > (mu + M_F) / lambda_min(R^T R) for each.
    """
    if not m1 > 0.0:
        raise ValueError("m1 must be positive")
    if M1 < m1:
        raise ValueError("M1 must be at least m1")
    if M2 < 0.0 or M_F < 0.0:
        raise ValueError("M2 and M_F must be nonnegative")
    eigs1 = _gram_eigenvalues(q1)
    if eigs1 is None:
        raise ValueError("Q1 is required")
    _, lam_pp = _min_pos_from_eigs(eigs1, 1e-9)
    sigma = None
    if q2 is not None:
        eigs2 = _gram_eigenvalues(q2)
        sigma = float(np.min(eigs2))
        if sigma <= 1e-10:
            raise ValueError("Q2 not injective")
    elif M2 > 0.0:
        raise ValueError("Q2 not injective")

    kappa = M1 / m1
    bound = max(2.0 * M1 * kappa / lam_pp,
                0.5 * (M1 + M2) * max(1.0 / sigma if sigma else 0.0,
                                      (1.0 + 2.0 * kappa) ** 2 / lam_pp))
    for r_map, mu in r_blocks:
        if mu + M_F == 0.0:
            continue
        eigs_r = _gram_eigenvalues(r_map)
        lam_min = float(np.min(eigs_r))
        if lam_min <= 1e-10:
            raise ValueError("final-block coefficient map is not injective")
        bound = max(bound, (mu + M_F) / lam_min)

    def admissible(rho):
        if rho <= bound:
            return False
        if M2 > 0.0:
            return sigma * rho / 2.0 - M2 * M2 / (sigma * rho) > M2 / 2.0
        return True

    rho = 1e-3
    for _ in range(3000):
        if admissible(rho):
            return float(rho)
        rho *= 1.05
    raise ValueError("no admissible rho within the search grid")


def add_prox_constraint(problem: Problem, block, S, rho: float) -> Problem:
    """Clone the problem with a proximal tie on one block.

    Appends a shadow z1 block z' of the same shape and the equation

        c * S12 @ block - c * S12 @ z' = 0,   c = sqrt(2 / rho),

    where S12 is the PSD square root of S (a matrix or LinearOp acting on the
    flattened block).  The shadow gets an exact anchored updater, so starting
    from zero multipliers it tracks the block exactly and its multiplier stays
    zero; the block's own subproblem gains the penalty
    (rho_solver / rho) * ||x - x_prev||_S^2, which matches the intended
    proximal weight when the solver runs at this rho.  The curvature metadata
    keys are dropped from the clone: the certified penalty bound does not
    cover the extended system.
    """
    if not rho > 0.0:
        raise ValueError("rho must be positive")
    blk = problem._resolve(block)
    if isinstance(S, LinearOp):
        s_mat = S.to_dense()
        if s_mat is None:
            raise BuildError("S is too large to densify")
    else:
        s_mat = np.asarray(S, dtype=float)
    if s_mat.shape != (blk.dim, blk.dim):
        raise ShapeMismatchError(
            f"S has shape {s_mat.shape}, expected {(blk.dim, blk.dim)} for "
            f"block {blk.name!r}", block=blk.name)
    if float(np.max(np.abs(s_mat - s_mat.T))) > 1e-10 * (1.0 + float(np.max(np.abs(s_mat)))):
        raise ValueError("S must be symmetric")
    lam, vecs = np.linalg.eigh((s_mat + s_mat.T) / 2.0)
    if lam[0] < -1e-10 * max(1.0, abs(lam[-1])):
        raise ValueError("S is not positive semidefinite")
    lam = np.maximum(lam, 0.0)
    sqrt_s = (vecs * np.sqrt(lam)) @ vecs.T
    inv_sqrt = (vecs * np.where(lam > 1e-12 * max(1.0, lam[-1]),
                                1.0 / np.sqrt(np.where(lam > 0, lam, 1.0)),
                                0.0)) @ vecs.T
    c = math.sqrt(2.0 / rho)

    name = f"{blk.name}_prox"
    while name in problem.system.blocks:
        name += "_"
    shadow = BlockId(name, ROLE_Z1, blk.shape)
    eq_new = max(problem.system.eq_ids) + 1

    rebuilt = MultiaffineSystem()
    for eq_id, terms in problem.system.equations:
        rebuilt.add_equation(list(terms), eq_id=eq_id)
    rebuilt.add_equation(
        [LinearTerm(DenseOp(c * sqrt_s, blk.shape, blk.shape), blk),
         LinearTerm(DenseOp(c * sqrt_s, blk.shape, blk.shape), shadow, sign=-1)],
        eq_id=eq_new)

    def _anchored(problem_, zblk, assignment, multipliers, rho_now):
        w = np.ravel(multipliers[eq_new])
        return assignment[blk] + (inv_sqrt @ w / (rho_now * c)).reshape(blk.shape)

    updaters = dict(problem.custom_updaters)
    updaters[shadow.name] = _anchored
    metadata = {k: v for k, v in problem.metadata.items()
                if k not in ("m1", "M1", "M2", "M_F", "r_blocks")}
    ties = dict(metadata.get("prox_rho", {}))
    ties[blk.name] = float(rho)
    metadata["prox_rho"] = ties
    return Problem(rebuilt, dict(problem.objective), problem.coupling,
                   list(problem.update_order), updaters, metadata)
