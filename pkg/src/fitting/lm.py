"""
Levenberg-Marquardt on dense residual/Jacobian pairs with gain-ratio damping updates
"""

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.fitting.config import LMSettings
from src.utils.error_handling import ErrorHandler
from src.utils.logging_config import BodyFitLogger, get_logger

logger = get_logger(__name__)
error_handler = ErrorHandler(logger)

ResidualFunction = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


@dataclass
class LMDiagnostics:
    iterations: int = 0
    accepted_steps: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    gradient_norm: float = 0.0
    reason: str = ""
    cost_history: List[float] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.reason != "max_iterations"

    def to_dict(self) -> Dict:
        return {**asdict(self), "converged": self.converged}

    @classmethod
    def from_dict(cls, data: Dict) -> "LMDiagnostics":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


def _check_finite(residuals: np.ndarray, jacobian: np.ndarray, x: np.ndarray, name: str, iteration: int, damping: float):
    if np.all(np.isfinite(residuals)) and np.all(np.isfinite(jacobian)):
        return
    raise error_handler.handle_fitting_error(
        name,
        {
            "iteration": iteration,
            "parameters": x,
            "damping": damping,
            "cost": float(residuals @ residuals) if np.all(np.isfinite(residuals)) else None,
        },
        "non-finite residuals or Jacobian",
    )


def levenberg_marquardt(
    fun: ResidualFunction,
    x0: np.ndarray,
    settings: Optional[LMSettings] = None,
    free: Optional[np.ndarray] = None,
    name: str = "lm",
) -> Tuple[np.ndarray, LMDiagnostics]:
    """
    Minimize ||r(x)||^2 over the entries of x selected by `free`

    `fun` returns the residual vector and its Jacobian w.r.t. the full x. The
    damping starts at initial_damping * max(diag(J^T J)); accepted steps shrink it
    by max(1/3, 1 - (2 rho - 1)^3), rejected steps grow it geometrically. Stops on
    ||J^T r||_inf below the gradient tolerance, a step below the step tolerance, or
    the iteration cap.
    """
    settings = settings or LMSettings()
    x = np.array(x0, dtype=float).reshape(-1)
    free = np.ones(len(x), dtype=bool) if free is None else np.asarray(free, dtype=bool)
    cols = np.flatnonzero(free)

    r, J = fun(x)
    _check_finite(r, J, x, name, 0, settings.initial_damping)
    cost = float(r @ r)
    diagnostics = LMDiagnostics(initial_cost=cost, final_cost=cost, cost_history=[cost])
    if len(cols) == 0:
        diagnostics.reason = "no_free_parameters"
        return x, diagnostics

    Jf = J[:, cols]
    A = Jf.T @ Jf
    g = Jf.T @ r
    mu = settings.initial_damping * max(float(np.max(np.diag(A))), 1e-12)
    nu = 2.0

    reason = "max_iterations"
    while diagnostics.iterations < settings.max_iterations:
        gnorm = float(np.max(np.abs(g)))
        diagnostics.gradient_norm = gnorm
        if gnorm <= settings.gradient_tolerance:
            reason = "gradient_tolerance"
            break
        diagnostics.iterations += 1

        try:
            h = np.linalg.solve(A + mu * np.eye(len(cols)), -g)
        except np.linalg.LinAlgError:
            h = np.linalg.lstsq(A + mu * np.eye(len(cols)), -g, rcond=None)[0]
        if np.linalg.norm(h) <= settings.step_tolerance * (np.linalg.norm(x[cols]) + settings.step_tolerance):
            reason = "step_tolerance"
            break

        x_new = x.copy()
        x_new[cols] += h
        r_new, J_new = fun(x_new)
        _check_finite(r_new, J_new, x_new, name, diagnostics.iterations, mu)
        cost_new = float(r_new @ r_new)
        predicted = float(h @ (mu * h - g))
        rho = (cost - cost_new) / predicted if predicted > 0 else -1.0

        if rho > 0 and cost_new < cost:
            x, r, cost = x_new, r_new, cost_new
            Jf = J_new[:, cols]
            A = Jf.T @ Jf
            g = Jf.T @ r
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            diagnostics.accepted_steps += 1
            diagnostics.cost_history.append(cost)
        else:
            mu *= nu
            nu *= 2.0
            if not np.isfinite(mu) or mu > 1e32:
                reason = "damping_overflow"
                break
    else:
        diagnostics.gradient_norm = float(np.max(np.abs(g)))

    diagnostics.final_cost = cost
    diagnostics.reason = reason
    BodyFitLogger.log_fit_metrics(
        logger,
        name,
        diagnostics.iterations,
        diagnostics.initial_cost,
        diagnostics.final_cost,
        accepted=diagnostics.accepted_steps,
        reason=reason,
        gradient_norm=diagnostics.gradient_norm,
    )
    return x, diagnostics
