"""Gradient descent on the shape: fixed metric and variable metric loops.

Both loops take a step ``mesh <- (id - t d)(mesh)`` along a descent field
``d`` found by backtracking.  The first accepted decrease
Delta_0 = J(Omega_0) - J(Omega_1) is the reference of the sufficient-decrease
test J_n - J_{n+1} >= gamma Delta_0.  On failure the fixed-metric loop stops,
while the variable-metric loop rejects the step and multiplies sigma by q.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .fem import DEFAULT_CG_TOL, ProblemData
from .gradients import (GradientMethod, MeshMotion, MethodKind, gradient_field,
                        rkhs_interface_gradient)
from .mesh import (ShapeSpec, TriMesh, boundary_constraint_mask, deform, generate_mesh, repair,
                   validate)
from .shape_calculus import Solution, TrackingProblem, dJ_vol

logger = logging.getLogger(__name__)

DEFAULT_INITIAL = ShapeSpec.from_tuples([((0.15, 0.15), 0.1)])
DEFAULT_TARGET = ShapeSpec.from_tuples([((0.65, 0.35), 0.2), ((0.7, 0.5), 0.1)])


@dataclass(frozen=True)
class OptConfig:
    method: GradientMethod = GradientMethod(MethodKind.RKHS_GAUSS, 10.0)
    sigma0: float = 10.0
    gamma: float = 1e-2
    q: float = 0.5
    max_iter: int = 500
    t0: float = 1.0
    max_halvings: int = 30
    sigma_min: float = 1e-4
    beta_plus: float = 1.0
    beta_minus: float = 0.5
    f: float = 1.0
    initial_shape: ShapeSpec = DEFAULT_INITIAL
    target_shape: ShapeSpec = DEFAULT_TARGET
    n_interface: int = 100
    grid_res: int = 21
    cg_tol: float = DEFAULT_CG_TOL
    target_mode: str = "background"
    area_floor: float = 1e-12
    angle_floor: float = 5.0
    mesh_motion: str = "extension"
    slide: bool = False
    stiffness_exponent: float = 0.0
    mesh_repair: bool = True

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError("q must lie in (0, 1)")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.sigma_min > 0 or self.sigma0 < self.sigma_min:
            raise ValueError("need sigma0 >= sigma_min > 0")
        if self.max_iter < 0 or self.max_halvings < 1:
            raise ValueError("max_iter must be >= 0 and max_halvings >= 1")
        if not self.t0 > 0:
            raise ValueError("t0 must be positive")
        if self.mesh_motion not in ("extension", "direct"):
            raise ValueError("mesh_motion must be 'extension' or 'direct'")

    def with_(self, **kw):
        return replace(self, **kw)

    @property
    def data(self):
        return ProblemData(self.beta_plus, self.beta_minus, self.f)

    def problem(self):
        return TrackingProblem(self.data, self.target_shape, self.target_mode,
                               self.n_interface, self.grid_res, self.cg_tol)

    def initial_mesh(self):
        return generate_mesh(self.initial_shape, self.n_interface, self.grid_res)

    def direction(self, mesh, tensors, sigma):
        """Gradient field for the current mesh (the step goes along its negative)."""
        if self.method.is_rkhs and self.mesh_motion == "extension":
            motion = MeshMotion(mesh, self.slide, self.stiffness_exponent)
            return rkhs_interface_gradient(mesh, tensors, self.method.kernel(sigma), motion)
        return gradient_field(self.method, mesh, tensors,
                              sigma=sigma if self.method.is_rkhs else None)


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    J: float
    t: float
    sigma: float
    grad_norm: float
    accepted: bool
    wall_time: float
    slope: float = 0.0


@dataclass
class OptHistory:
    rows: list = field(default_factory=list)
    meshes: dict = field(default_factory=dict)
    status: str = ""
    sigma_reductions: int = 0
    final_state: "OptState | None" = None

    @property
    def J0(self):
        return self.rows[0].J

    @property
    def accepted_rows(self):
        return [r for r in self.rows if r.accepted]

    @property
    def final_J(self):
        return self.accepted_rows[-1].J

    @property
    def n_accepted_steps(self):
        return len(self.accepted_rows) - 1

    @property
    def final_mesh(self):
        return self.meshes[max(self.meshes)]

    @property
    def final_sigma(self):
        return self.rows[-1].sigma


@dataclass
class OptState:
    mesh: TriMesh
    solution: Solution
    iteration: int
    sigma: float

    @property
    def J(self):
        return self.solution.J

    @property
    def u_h(self):
        return self.solution.u

    @property
    def p_h(self):
        return self.solution.p

    @property
    def u_d(self):
        return self.solution.data.u_d

    @property
    def tensors(self):
        return self.solution.tensors


@dataclass(frozen=True)
class LineSearchResult:
    t: float
    mesh: TriMesh
    solution: Solution
    trials: int

    @property
    def J(self):
        return self.solution.J


def line_search(problem, state: OptState, direction, t0, max_halvings=30,
                area_floor=1e-12, angle_floor=5.0, *, slide=False, mesh_repair=False):
    """Backtracking on t for mesh <- (id - t direction)(mesh).

    The first trial is ``t0 / max(|direction|_inf, 1e-12)``.  A trial is
    admissible if the deformed mesh passes ``validate`` and the cost
    strictly decreases.  With ``mesh_repair`` a trial that fails the
    quality check is first passed through :func:`mesh.repair` (edge flips
    and bulk smoothing).  Repair changes the discrete cost
    discontinuously, so it is only used when needed.
    Returns None when all trials fail.
    """
    d = np.asarray(direction, dtype=float)
    if np.any(d[boundary_constraint_mask(state.mesh, slide)]):
        raise ValueError("direction must vanish on the outer boundary")
    t = t0 / max(float(np.abs(d).max(initial=0.0)), 1e-12)
    for k in range(max_halvings):
        m = deform(state.mesh, d, -t, slide=slide)
        ok = validate(m, area_floor, angle_floor).valid
        if not ok and mesh_repair:
            m = repair(m, area_floor, angle_floor)
            ok = validate(m, area_floor, angle_floor).valid
        if ok:
            sol = problem.solve(m)
            logger.debug("trial %d: t=%.3e J=%.6e", k, t, sol.J)
            if sol.J < state.J:
                return LineSearchResult(t, m, sol, k + 1)
        else:
            logger.debug("trial %d: t=%.3e invalid mesh", k, t)
        t *= 0.5
    return None


def _run(config: OptConfig, variable: bool, problem=None, mesh=None, on_row=None):
    t_start = time.perf_counter()
    problem = config.problem() if problem is None else problem
    mesh = config.initial_mesh() if mesh is None else mesh
    sol = problem.solve(mesh)
    sigma = float(config.sigma0)
    state = OptState(mesh, sol, 0, sigma)
    hist = OptHistory()

    def record(n, J, t, s, g, ok, slope=0.0):
        row = HistoryRow(n, float(J), float(t), float(s), float(g), bool(ok),
                         time.perf_counter() - t_start, float(slope))
        hist.rows.append(row)
        if on_row is not None:
            on_row(row)

    record(0, sol.J, 0.0, sigma, 0.0, True)
    hist.meshes[0] = mesh
    delta0 = None
    n = 0
    hist.status = "max_iter"
    while n < config.max_iter:
        d = config.direction(state.mesh, state.tensors, sigma)
        gnorm = float(np.abs(d).max(initial=0.0))
        slope = dJ_vol(state.tensors, -d)
        if gnorm > 0 and not slope < 0:
            logger.warning("iteration %d: -gradient is not a descent direction "
                           "(dJ = %.3e)", n + 1, slope)
        res = line_search(problem, state, d, config.t0, config.max_halvings,
                          config.area_floor, config.angle_floor,
                          slide=config.slide, mesh_repair=config.mesh_repair)
        n += 1
        if res is not None and (delta0 is None or state.J - res.J >= config.gamma * delta0):
            if delta0 is None:
                delta0 = state.J - res.J
            state = OptState(res.mesh, res.solution, n, sigma)
            record(n, res.J, res.t, sigma, gnorm, True, slope)
            hist.meshes[n] = res.mesh
            continue
        if res is None:
            record(n, state.J, 0.0, sigma, gnorm, False, slope)
            reason = "converged_at_start" if delta0 is None else "line_search_failed"
        else:
            record(n, res.J, res.t, sigma, gnorm, False, slope)
            reason = "no_sufficient_decrease"
        logger.info("iteration %d rejected: %s (sigma=%g)", n, reason, sigma)
        if not variable:
            hist.status = reason
            break
        sigma *= config.q
        hist.sigma_reductions += 1
        if sigma < config.sigma_min:
            hist.status = "sigma_min"
            break
    hist.final_state = state
    return hist


def run_standard(config: OptConfig, **kw) -> OptHistory:
    """Fixed-metric descent; stops at the first insufficient decrease."""
    return _run(config, False, **kw)


def run_variable_metric(config: OptConfig, **kw) -> OptHistory:
    """RKHS descent that shrinks sigma by q whenever a step is rejected."""
    if not config.method.is_rkhs:
        raise ValueError("the variable metric loop needs an RKHS method")
    return _run(config, True, **kw)


def run(config: OptConfig, **kw) -> OptHistory:
    return (run_variable_metric if config.method.is_rkhs else run_standard)(config, **kw)
