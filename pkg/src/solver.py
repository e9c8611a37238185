"""
Operator-splitting (ADMM) solver for the conic programs built by ``ocp``.

Problem form:

    minimize    1/2 x' P x + q' x + offset
    subject to  b - A x in K

with K a product of zero cones, nonnegative orthants and second-order cones
{(s, w): ||w||_2 <= s}, listed in row order. The iteration follows the
OSQP splitting: with z = A x constrained to C = b - K, each step solves one
quasi-definite KKT system (factorized once and cached), projects onto C and
updates the scaled dual. The data is equilibrated first (Ruiz scaling of the
KKT matrix plus a cost scale) so penalty weights of very different size do
not stall the iteration. Over-relaxation, ratio-based rho adaptation,
infeasibility certificates and an active-set polish for LP/QP instances are
included.
"""

import logging
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as spspa
import scipy.sparse.linalg as spla
from pydantic import BaseModel, ConfigDict, Field, field_validator

logger = logging.getLogger(__name__)

ZERO = "zero"
NONNEG = "nonnegative"
SOC = "second-order"
CONE_KINDS = (ZERO, NONNEG, SOC)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITERS = "max_iters"

RHO_MIN = 1e-6
RHO_MAX = 1e6
SCALING_MIN = 1e-4
SCALING_MAX = 1e4


class SolverSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eps_abs: float = Field(1e-6, gt=0)
    eps_rel: float = Field(1e-6, ge=0)
    eps_infeasible: float = Field(1e-6, gt=0)
    max_iters: int = Field(20000, ge=1)
    alpha: float = Field(1.6, gt=0, lt=2)
    rho: float = Field(0.1, gt=0)
    rho_eq_scale: float = Field(1e3, ge=1)
    sigma: float = Field(1e-6, gt=0)
    adaptive_rho_interval: int = Field(50, ge=0)
    adaptive_rho_tolerance: float = Field(5.0, gt=1)
    check_interval: int = Field(10, ge=1)
    polish: bool = True
    polish_delta: float = Field(1e-7, gt=0)
    polish_refine_iters: int = Field(10, ge=0)
    scaling_iters: int = Field(10, ge=0)
    warm_start: bool = True


class ConeSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str
    dim: int = Field(..., ge=1)


class ConicProblem(BaseModel):
    """
    Solver-ready problem. ``var_tags`` / ``row_tags`` optionally label each
    variable and row with (role, stage) so a solution can be time-shifted to
    warm start the next problem in a receding horizon.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    P: Any
    q: np.ndarray
    A: Any
    b: np.ndarray
    cones: List[ConeSpec]
    offset: float = 0.0
    var_tags: Optional[List[tuple]] = None
    row_tags: Optional[List[tuple]] = None

    @field_validator("P", "A", mode="before")
    @classmethod
    def to_csc(cls, v):
        return spspa.csc_matrix(v, dtype=float)

    @field_validator("q", "b", mode="before")
    @classmethod
    def to_vector(cls, v):
        return np.asarray(v, dtype=float).reshape(-1)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def validate_dims(self) -> None:
        n, m = self.n, self.m
        if self.P.shape != (n, n) or self.q.shape != (n,):
            raise ValueError(f"objective dimensions inconsistent: P {self.P.shape}, q {self.q.shape}")
        if self.A.shape[1] != n or self.b.shape != (m,):
            raise ValueError(f"constraint dimensions inconsistent: A {self.A.shape}, b {self.b.shape}")
        if sum(c.dim for c in self.cones) != m:
            raise ValueError(f"cones cover {sum(c.dim for c in self.cones)} rows, A has {m}")
        for c in self.cones:
            if c.kind not in CONE_KINDS:
                raise ValueError(f"unknown cone kind '{c.kind}'")
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-9 * (1.0 + abs(self.P).max()):
            raise ValueError("objective matrix is not symmetric")

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.offset)

    def has_soc(self) -> bool:
        return any(c.kind == SOC for c in self.cones)


class SolveResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    y: np.ndarray
    objective: float
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool = False


def project_cone(v: np.ndarray, kind: str, dim: int) -> np.ndarray:
    """Euclidean projection of v onto a single cone."""
    v = np.asarray(v, dtype=float)
    if v.shape != (dim,):
        raise ValueError(f"vector of length {v.shape} does not match cone dimension {dim}")
    if kind == ZERO:
        return np.zeros(dim)
    if kind == NONNEG:
        return np.maximum(v, 0.0)
    if kind == SOC:
        s, w = v[0], v[1:]
        norm_w = np.linalg.norm(w)
        if norm_w <= s:
            return v.copy()
        if norm_w <= -s:
            return np.zeros(dim)
        scale = 0.5 * (norm_w + s)
        out = np.empty(dim)
        out[0] = scale
        out[1:] = scale * w / norm_w
        return out
    raise ValueError(f"unknown cone kind '{kind}'")


def project_product(v: np.ndarray, cones: Sequence[ConeSpec], dual: bool = False) -> np.ndarray:
    """Project onto the product cone K (or its dual K*)."""
    out = np.empty_like(v)
    start = 0
    for cone in cones:
        stop = start + cone.dim
        if dual and cone.kind == ZERO:
            out[start:stop] = v[start:stop]
        else:
            out[start:stop] = project_cone(v[start:stop], cone.kind, cone.dim)
        start = stop
    return out


def _inf_norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _zero_rows(cones: Sequence[ConeSpec]) -> np.ndarray:
    mask = []
    for cone in cones:
        mask.extend([cone.kind == ZERO] * cone.dim)
    return np.array(mask, dtype=bool)


def _nonneg_rows(cones: Sequence[ConeSpec]) -> np.ndarray:
    mask = []
    for cone in cones:
        mask.extend([cone.kind == NONNEG] * cone.dim)
    return np.array(mask, dtype=bool)


def _col_inf(M) -> np.ndarray:
    if M.shape[0] == 0 or M.nnz == 0:
        return np.zeros(M.shape[1])
    return abs(M).max(axis=0).toarray().ravel()


def _limit_scaling(v):
    v = np.where(np.asarray(v) < SCALING_MIN, 1.0, v)
    return np.minimum(v, SCALING_MAX)


def _soc_blocks(cones: Sequence[ConeSpec]) -> List[Tuple[int, int]]:
    blocks, start = [], 0
    for cone in cones:
        if cone.kind == SOC:
            blocks.append((start, start + cone.dim))
        start += cone.dim
    return blocks


class Scaling(BaseModel):
    """
    Diagonal equilibration of a problem: the solver iterates on
    P' = c D P D, q' = c D q, A' = E A D, b' = E b, so x = D x', y = E y' / c.
    E is constant on every second-order block, which keeps K unchanged.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    D: np.ndarray
    E: np.ndarray
    c: float
    P: Any
    A: Any


def equilibrate(problem: ConicProblem, iterations: int) -> Scaling:
    """Ruiz equilibration of the KKT matrix interleaved with cost normalization."""
    n, m = problem.n, problem.m
    P, A, q = problem.P.tocsc(), problem.A.tocsc(), problem.q.copy()
    D, E, c = np.ones(n), np.ones(m), 1.0
    blocks = _soc_blocks(problem.cones)
    for _ in range(iterations):
        d = 1.0 / np.sqrt(_limit_scaling(np.maximum(_col_inf(P), _col_inf(A))))
        e = 1.0 / np.sqrt(_limit_scaling(_col_inf(A.T.tocsc())))
        for start, stop in blocks:
            e[start:stop] = e[start:stop].mean()
        Dm, Em = spspa.diags(d), spspa.diags(e)
        P = (Dm @ P @ Dm).tocsc()
        A = (Em @ A @ Dm).tocsc()
        q = d * q
        D, E = D * d, E * e

        mean_p = float(np.mean(_col_inf(P))) if n else 0.0
        c_step = 1.0 / float(_limit_scaling(max(mean_p, float(_limit_scaling(_inf_norm(q))))))
        P = (c_step * P).tocsc()
        q = c_step * q
        c *= c_step
    return Scaling(D=D, E=E, c=c, P=P, A=A)


class AdmmSolver:
    """
    One solver instance per vehicle. The equilibration and the KKT
    factorization are cached and reused across solves as long as P and A
    are unchanged, which holds for every timestep of a receding-horizon run
    since only q and b move. The cost scale is fixed by the first q seen.
    """

    def __init__(self, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings()
        self._scaling_key = None
        self._scaling: Optional[Scaling] = None
        self._factor_rho = None
        self._factor = None
        self._rho_scalar = self.settings.rho
        self.factorizations = 0

    # -- linear system -------------------------------------------------------

    def _rho_vector(self, cones: Sequence[ConeSpec], rho: float) -> np.ndarray:
        rho_vec = np.full(sum(c.dim for c in cones), rho)
        rho_vec[_zero_rows(cones)] = rho * self.settings.rho_eq_scale
        return rho_vec

    def _matrix_key(self, problem: ConicProblem) -> tuple:
        P, A = problem.P, problem.A
        return (P.shape, A.shape, P.indptr.tobytes(), P.indices.tobytes(), P.data.tobytes(),
                A.indptr.tobytes(), A.indices.tobytes(), A.data.tobytes(), tuple((c.kind, c.dim) for c in problem.cones))

    def _setup(self, problem: ConicProblem) -> Scaling:
        key = self._matrix_key(problem)
        if key != self._scaling_key:
            self._scaling = equilibrate(problem, self.settings.scaling_iters)
            self._scaling_key = key
            self._factor_rho = None
            logger.debug(f"equilibrated problem: cost scale {self._scaling.c:.3e}")
        return self._scaling

    def _factorize(self, scaling: Scaling, cones: Sequence[ConeSpec], rho: float) -> None:
        if rho == self._factor_rho:
            return
        n = scaling.P.shape[0]
        rho_vec = self._rho_vector(cones, rho)
        kkt = spspa.bmat([
            [scaling.P + self.settings.sigma * spspa.eye(n), scaling.A.T],
            [scaling.A, -spspa.diags(1.0 / rho_vec)],
        ], format="csc")
        self._factor = spla.splu(kkt)
        self._factor_rho = rho
        self._rho_vec = rho_vec
        self.factorizations += 1
        logger.debug(f"factorized KKT system of size {kkt.shape[0]} (rho={rho:.3e})")

    # -- iteration -----------------------------------------------------------

    @staticmethod
    def _project_c(v: np.ndarray, b: np.ndarray, cones: Sequence[ConeSpec]) -> np.ndarray:
        return b - project_product(b - v, cones)

    def solve(self, problem: ConicProblem, warm_start: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> SolveResult:
        problem.validate_dims()
        s = self.settings
        n, m = problem.n, problem.m
        cones = problem.cones

        sc = self._setup(problem)
        D, E, c = sc.D, sc.E, sc.c
        P, A = sc.P, sc.A
        q = c * D * problem.q
        b = E * problem.b

        rho = self._rho_scalar if s.warm_start else s.rho
        self._factorize(sc, cones, rho)

        if warm_start is not None and s.warm_start:
            x = np.asarray(warm_start[0], dtype=float) / D
            y = c * np.asarray(warm_start[1], dtype=float) / E
        else:
            x = np.zeros(n)
            y = np.zeros(m)
        z = self._project_c(A @ x, b, cones)

        status = MAX_ITERS
        pri_res = dua_res = np.inf
        best, best_score = None, np.inf
        iteration = 0
        for iteration in range(1, s.max_iters + 1):
            x_prev, y_prev = x, y
            rho_vec = self._rho_vec
            rhs = np.concatenate([s.sigma * x - q, z - y / rho_vec])
            sol = self._factor.solve(rhs)
            x_tilde = sol[:n]
            z_tilde = z + (sol[n:] - y) / rho_vec

            x = s.alpha * x_tilde + (1.0 - s.alpha) * x
            z_relaxed = s.alpha * z_tilde + (1.0 - s.alpha) * z
            z = self._project_c(z_relaxed + y / rho_vec, b, cones)
            y = y + rho_vec * (z_relaxed - z)

            check = iteration % s.check_interval == 0 or iteration == s.max_iters
            adapt = s.adaptive_rho_interval and iteration % s.adaptive_rho_interval == 0
            if not (check or adapt):
                continue

            Ax_s, Px_s, Aty_s = A @ x, P @ x, A.T @ y
            # termination is judged on the unscaled problem
            Ax, z_u = Ax_s / E, z / E
            Px, Aty = Px_s / (c * D), Aty_s / (c * D)
            pri_res = _inf_norm(Ax - z_u)
            dua_res = _inf_norm(Px + problem.q + Aty)
            eps_pri = s.eps_abs + s.eps_rel * max(_inf_norm(Ax), _inf_norm(z_u))
            eps_dua = s.eps_abs + s.eps_rel * max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(problem.q))

            score = max(pri_res / eps_pri, dua_res / eps_dua)
            if score < best_score:
                best, best_score = (x, y, z, pri_res, dua_res), score

            if pri_res <= eps_pri and dua_res <= eps_dua:
                status = OPTIMAL
                break
            if self._primal_infeasible(problem, E * (y - y_prev)):
                status = INFEASIBLE
                break
            if self._dual_infeasible(problem, D * (x - x_prev)):
                status = UNBOUNDED
                break

            if adapt:
                pri_scaled = _inf_norm(Ax_s - z) / (max(_inf_norm(Ax_s), _inf_norm(z)) + 1e-12)
                dua_scaled = _inf_norm(Px_s + q + Aty_s) / (max(_inf_norm(Px_s), _inf_norm(Aty_s), _inf_norm(q)) + 1e-12)
                new_rho = float(np.clip(rho * np.sqrt(pri_scaled / (dua_scaled + 1e-12)), RHO_MIN, RHO_MAX))
                if new_rho > rho * s.adaptive_rho_tolerance or new_rho < rho / s.adaptive_rho_tolerance:
                    logger.debug(f"iteration {iteration}: rho {rho:.3e} -> {new_rho:.3e}")
                    rho = new_rho
                    self._factorize(sc, cones, rho)

        self._rho_scalar = rho
        if status == MAX_ITERS and best is not None:
            x, y, z, pri_res, dua_res = best
        guess = (b - z) < y
        x, y, z = D * x, E * y / c, z / E
        result = SolveResult(x=x, y=y, objective=problem.objective(x), status=status, iterations=iteration,
                             primal_residual=pri_res, dual_residual=dua_res)
        if s.polish and status in (OPTIMAL, MAX_ITERS) and not problem.has_soc():
            polished = self._polish(problem, guess, result)
            if polished is not None:
                result = polished.model_copy(update={"iterations": iteration})
        logger.debug(f"solve finished: status={result.status} iters={iteration} "
                     f"pri={result.primal_residual:.2e} dua={result.dual_residual:.2e} polished={result.polished}")
        return result

    # -- certificates --------------------------------------------------------

    def _primal_infeasible(self, problem: ConicProblem, delta_y: np.ndarray) -> bool:
        eps = self.settings.eps_infeasible
        norm = _inf_norm(delta_y)
        if norm <= eps:
            return False
        w = delta_y / norm
        if _inf_norm(project_product(w, problem.cones, dual=True) - w) > eps:
            return False
        if problem.b @ w >= -eps:
            return False
        return _inf_norm(problem.A.T @ w) <= eps

    def _dual_infeasible(self, problem: ConicProblem, delta_x: np.ndarray) -> bool:
        eps = self.settings.eps_infeasible
        norm = _inf_norm(delta_x)
        if norm <= eps:
            return False
        d = delta_x / norm
        if problem.q @ d >= -eps:
            return False
        if _inf_norm(problem.P @ d) > eps:
            return False
        # A d must lie in the recession cone of C, i.e. -A d in K
        neg_Ad = -(problem.A @ d)
        return _inf_norm(project_product(neg_Ad, problem.cones) - neg_Ad) <= eps

    # -- polish --------------------------------------------------------------

    def _polish(self, problem: ConicProblem, guess: np.ndarray, admm: SolveResult) -> Optional[SolveResult]:
        """
        Solve the equality-constrained QP on the guessed active set. ``guess``
        marks the rows whose slack is below their dual in the scaled iterate.
        The polished point is kept when it does not worsen either residual.
        """
        s = self.settings
        n = problem.n
        zero = _zero_rows(problem.cones)
        nonneg = _nonneg_rows(problem.cones)
        idx = np.flatnonzero(zero | (nonneg & guess))
        A_act = problem.A.tocsr()[idx]
        b_act = problem.b[idx]
        k = len(idx)

        kkt_true = spspa.bmat([[problem.P, A_act.T], [A_act, None]], format="csc") if k else problem.P.tocsc()
        kkt_reg = kkt_true + spspa.block_diag(
            [s.polish_delta * spspa.eye(n), -s.polish_delta * spspa.eye(k)] if k else [s.polish_delta * spspa.eye(n)],
            format="csc")
        try:
            factor = spla.splu(kkt_reg.tocsc())
        except RuntimeError as e:
            logger.debug(f"polish factorization failed: {e}")
            return None
        rhs = np.concatenate([-problem.q, b_act])
        sol = factor.solve(rhs)
        for _ in range(s.polish_refine_iters):
            sol = sol + factor.solve(rhs - kkt_true @ sol)
        if not np.all(np.isfinite(sol)):
            return None

        x_pol = sol[:n]
        y_pol = np.zeros(problem.m)
        y_pol[idx] = sol[n:]
        y_pol[nonneg] = np.maximum(y_pol[nonneg], 0.0)

        Ax = problem.A @ x_pol
        z_pol = self._project_c(Ax, problem.b, problem.cones)
        Px, Aty = problem.P @ x_pol, problem.A.T @ y_pol
        pri_res = _inf_norm(Ax - z_pol)
        dua_res = _inf_norm(Px + problem.q + Aty)
        eps_pri = s.eps_abs + s.eps_rel * max(_inf_norm(Ax), _inf_norm(z_pol))
        eps_dua = s.eps_abs + s.eps_rel * max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(problem.q))
        if pri_res > max(admm.primal_residual, eps_pri) or dua_res > max(admm.dual_residual, eps_dua):
            logger.debug(f"polish rejected: pri={pri_res:.2e} dua={dua_res:.2e}")
            return None
        status = OPTIMAL if pri_res <= eps_pri and dua_res <= eps_dua else admm.status
        return SolveResult(x=x_pol, y=y_pol, objective=problem.objective(x_pol), status=status, iterations=0,
                           primal_residual=pri_res, dual_residual=dua_res, polished=True)



def solve(problem: ConicProblem, settings: Optional[SolverSettings] = None,
          warm_start: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> SolveResult:
    """Solve a single problem with a fresh solver instance."""
    return AdmmSolver(settings).solve(problem, warm_start=warm_start)


def shift_index(tags: Sequence[tuple]) -> np.ndarray:
    """
    For tags of the form (role, stage) return, for each entry, the index of
    the entry with the same role one stage later (or itself for stage-free
    tags, -1 when no later stage exists).
    """
    lookup = {tag: pos for pos, tag in enumerate(tags)}
    out = np.full(len(tags), -1, dtype=int)
    for pos, (role, stage) in enumerate(tags):
        if stage is None:
            out[pos] = pos
        else:
            out[pos] = lookup.get((role, stage + 1), -1)
    return out


def shift_vector(values: np.ndarray, tags: Sequence[tuple]) -> np.ndarray:
    """Time-shift a primal or dual vector by one stage using its tags."""
    idx = shift_index(tags)
    out = np.zeros(len(tags))
    mask = idx >= 0
    out[mask] = np.asarray(values)[idx[mask]]
    return out
