"""Sparse Levenberg-Marquardt for block-structured nonlinear least squares.

Parameter blocks are plain euclidean vectors or SE(3) poses updated by
left-multiplicative exp-map retraction.  Residual blocks supply analytic
Jacobians with respect to each referenced block's tangent space; a central
finite-difference checker validates them in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import SingularSystem, SolverDiverged
from .se3 import Pose, exp_map

EUCLIDEAN = "euclidean"
SE3 = "se3"


@dataclass(frozen=True)
class RobustLoss:
    """rho applied to the squared residual norm s = ||r||^2."""

    kind: str = "trivial"        # trivial | huber | cauchy
    param: float = 1.0

    def rho(self, s: float) -> float:
        if self.kind == "trivial":
            return s
        if self.kind == "huber":
            d2 = self.param * self.param
            return s if s <= d2 else 2.0 * self.param * np.sqrt(s) - d2
        if self.kind == "cauchy":
            c2 = self.param * self.param
            return c2 * np.log1p(s / c2)
        raise ValueError(f"unknown loss kind {self.kind!r}")

    def rho_prime(self, s: float) -> float:
        if self.kind == "trivial":
            return 1.0
        if self.kind == "huber":
            d2 = self.param * self.param
            return 1.0 if s <= d2 else self.param / np.sqrt(s)
        if self.kind == "cauchy":
            return 1.0 / (1.0 + s / (self.param * self.param))
        raise ValueError(f"unknown loss kind {self.kind!r}")


TRIVIAL_LOSS = RobustLoss()


@dataclass
class ParameterBlock:
    name: str
    value: object               # np.ndarray or Pose
    manifold: str = EUCLIDEAN
    fixed: bool = False

    @property
    def dim(self) -> int:
        return 6 if self.manifold == SE3 else len(self.value)

    def retracted(self, delta):
        if self.manifold == SE3:
            return exp_map(delta) @ self.value
        return self.value + delta


@dataclass
class ResidualBlock:
    fn: object                  # fn(*values) -> (residual, [jacobians])
    params: list
    loss: RobustLoss = TRIVIAL_LOSS


@dataclass
class SolverOptions:
    max_iters: int = 50
    grad_tol: float = 1e-10
    param_tol: float = 1e-12
    initial_lambda: float = 1e-4
    max_lambda: float = 1e32


@dataclass
class SolverReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str


class Problem:
    def __init__(self):
        self.blocks = {}
        self.residuals = []

    def add_parameter_block(self, name, value, manifold=EUCLIDEAN, fixed=False):
        if name in self.blocks:
            raise ValueError(f"duplicate parameter block {name!r}")
        if manifold == SE3:
            if not isinstance(value, Pose):
                raise ValueError("se3 blocks take a Pose value")
        else:
            value = np.asarray(value, dtype=float).ravel()
        self.blocks[name] = ParameterBlock(name, value, manifold, fixed)

    def add_residual_block(self, fn, params, loss=TRIVIAL_LOSS):
        for p in params:
            if p not in self.blocks:
                raise ValueError(f"residual references unknown block {p!r}")
        if loss is None:
            loss = TRIVIAL_LOSS
        self.residuals.append(ResidualBlock(fn, list(params), loss))

    def set_fixed(self, name, fixed=True):
        self.blocks[name].fixed = fixed

    def value(self, name):
        return self.blocks[name].value

    # evaluation -----------------------------------------------------------

    def _values(self, names):
        return [self.blocks[n].value for n in names]

    def evaluate(self):
        """(total robustified cost, stacked raw residual vector)."""
        cost = 0.0
        parts = []
        for rb in self.residuals:
            r, _ = rb.fn(*self._values(rb.params))
            r = np.asarray(r, dtype=float).ravel()
            cost += rb.loss.rho(float(r @ r))
            parts.append(r)
        residual = np.concatenate(parts) if parts else np.empty(0)
        return cost, residual


def _cost_only(problem, values):
    cost = 0.0
    for rb in problem.residuals:
        r, _ = rb.fn(*[values[n] for n in rb.params])
        r = np.asarray(r, dtype=float).ravel()
        cost += rb.loss.rho(float(r @ r))
    return cost


def _free_layout(problem):
    offsets = {}
    n = 0
    for name, blk in problem.blocks.items():
        if not blk.fixed:
            offsets[name] = n
            n += blk.dim
    return offsets, n


def _assemble(problem, offsets, n_params):
    """Robust-weighted Jacobian (sparse COO) and residual stack."""
    rows, cols, vals = [], [], []
    res = []
    row0 = 0
    for rb in problem.residuals:
        r, jacs = rb.fn(*problem._values(rb.params))
        r = np.asarray(r, dtype=float).ravel()
        w = np.sqrt(rb.loss.rho_prime(float(r @ r)))
        res.append(w * r)
        m = len(r)
        for name, J in zip(rb.params, jacs):
            if problem.blocks[name].fixed or J is None:
                continue
            J = w * np.asarray(J, dtype=float).reshape(m, -1)
            c0 = offsets[name]
            rr, cc = np.nonzero(np.ones_like(J))
            rows.append(rr + row0)
            cols.append(cc + c0)
            vals.append(J.ravel())
        row0 += m
    if rows:
        J = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(row0, n_params)).tocsr()
    else:
        J = scipy.sparse.csr_matrix((row0, n_params))
    return J, np.concatenate(res) if res else np.empty(0)


def solve(problem: Problem, options: SolverOptions = SolverOptions()) -> SolverReport:
    """Levenberg-Marquardt with multiplicative damping on the scaled diagonal.

    Accepted steps strictly decrease the robustified cost; fixed blocks are
    never touched.  Deterministic for identical inputs.
    """
    offsets, n_params = _free_layout(problem)
    initial_cost, _ = problem.evaluate()
    if n_params == 0 or not problem.residuals:
        return SolverReport(initial_cost, initial_cost, 0, "all_fixed")

    cost = initial_cost
    lam = options.initial_lambda
    iters = 0
    termination = "max_iterations"
    for iters in range(1, options.max_iters + 1):
        J, r = _assemble(problem, offsets, n_params)
        g = J.T @ r
        if np.max(np.abs(g)) < options.grad_tol:
            termination = "gradient_tolerance"
            iters -= 1
            break
        H = (J.T @ J).tocsc()
        diag = np.maximum(H.diagonal(), 1e-12)
        accepted = False
        while lam <= options.max_lambda:
            A = H + scipy.sparse.diags(lam * diag)
            try:
                delta = scipy.sparse.linalg.spsolve(A.tocsc(), -g)
            except Exception:
                delta = np.full(n_params, np.nan)
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            trial = {}
            for name, blk in problem.blocks.items():
                if blk.fixed:
                    trial[name] = blk.value
                else:
                    o = offsets[name]
                    trial[name] = blk.retracted(delta[o:o + blk.dim])
            new_cost = _cost_only(problem, trial)
            if np.isfinite(new_cost) and new_cost < cost:
                for name, blk in problem.blocks.items():
                    if not blk.fixed:
                        blk.value = trial[name]
                step_norm = float(np.linalg.norm(delta))
                cost = new_cost
                lam = max(lam * 0.5, 1e-18)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            if lam > options.max_lambda and cost > initial_cost:
                raise SolverDiverged(f"damping overflow at cost {cost}")
            termination = "no_decrease"
            break
        if step_norm < options.param_tol * (np.sqrt(n_params) + options.param_tol):
            termination = "parameter_tolerance"
            break
        if cost < 1e-30:
            termination = "cost_zero"
            break
    return SolverReport(initial_cost, cost, iters, termination)


def evaluate(problem: Problem):
    return problem.evaluate()


def check_jacobian(problem: Problem, block: str = None, step: float = 1e-6) -> float:
    """Max elementwise deviation of analytic vs central-FD Jacobians.

    Deviation is |analytic - fd| / max(1, |fd|); covers every residual that
    touches `block` (all blocks when None).
    """
    worst = 0.0
    for rb in problem.residuals:
        values = problem._values(rb.params)
        _, jacs = rb.fn(*values)
        for k, name in enumerate(rb.params):
            if block is not None and name != block:
                continue
            blk = problem.blocks[name]
            J = np.asarray(jacs[k], dtype=float)
            fd = np.zeros_like(J)
            for i in range(blk.dim):
                e = np.zeros(blk.dim)
                e[i] = step
                vp = list(values)
                vm = list(values)
                vp[k] = blk.retracted(e)
                vm[k] = blk.retracted(-e)
                rp, _ = rb.fn(*vp)
                rm, _ = rb.fn(*vm)
                fd[:, i] = (np.asarray(rp, float).ravel()
                            - np.asarray(rm, float).ravel()) / (2 * step)
            dev = np.abs(J - fd) / np.maximum(1.0, np.abs(fd))
            worst = max(worst, float(dev.max(initial=0.0)))
    return worst


def information_sqrt(omega) -> np.ndarray:
    """Whitening factor L^T with L L^T = Omega (lower Cholesky).

    Premultiplying residual and Jacobians by this folds the information
    matrix into the plain least-squares cost: r^T Omega r = ||L^T r||^2.
    """
    omega = np.asarray(omega, dtype=float)
    try:
        L = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError as e:
        raise SingularSystem(f"information matrix not SPD: {e}") from e
    return L.T
