"""Problem-agnostic Levenberg-Marquardt loop.

A problem object provides::

    cost(state) -> float
    linearize(state) -> system      # exposes .max_diagonal() and .gradient_norm()
    solve(system, damping) -> step
    predicted_reduction(system, step, damping) -> float
    retract(state, step) -> state

Damping follows the usual gain-ratio schedule: on acceptance it shrinks by
max(1/3, 1 - (2 rho - 1)^3), on rejection it grows geometrically.  A step is
accepted only if it strictly lowers the cost, so the recorded cost sequence of
accepted iterations is non-increasing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field


class Aborted(Exception):
    """Raised when an optimization observes its abort flag."""


class OptimizationDiverged(RuntimeError):
    pass


@dataclass
class LMConfig:
    max_iterations: int = 10
    initial_damping: float = 1e-4  # multiplied by the largest diagonal entry
    gradient_tolerance: float = 1e-12
    relative_tolerance: float = 1e-12
    max_rejections: int = 10

    def __post_init__(self):
        if min(self.max_iterations, self.initial_damping, self.gradient_tolerance,
               self.relative_tolerance, self.max_rejections) <= 0:
            raise ValueError("LM configuration values must be positive")


@dataclass
class LMResult:
    state: object
    cost: float
    initial_cost: float
    iterations: int
    log: list = field(default_factory=list)
    converged: bool = False


def lm_iterations(problem, state, config: LMConfig, abort=None, log=None):
    """Generator form: yields (iteration, cost) after each iteration; returns LMResult.

    ``abort`` is anything with ``is_set()``; it is checked before every
    iteration and raises Aborted.
    """
    log = [] if log is None else log
    cost = problem.cost(state)
    if not math.isfinite(cost):
        raise OptimizationDiverged("initial cost is not finite")
    initial = cost
    damping = None
    nu = 2.0
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        if abort is not None and abort.is_set():
            raise Aborted()
        system = problem.linearize(state)
        if system.gradient_norm() < config.gradient_tolerance:
            converged = True
            log.append({"iteration": it, "cost": cost, "damping": damping or 0.0, "accepted": False})
            break
        if damping is None:
            damping = config.initial_damping * max(system.max_diagonal(), 1e-12)
        accepted = False
        for _ in range(config.max_rejections):
            step = problem.solve(system, damping)
            candidate = problem.retract(state, step)
            new_cost = problem.cost(candidate)
            if math.isfinite(new_cost) and new_cost < cost:
                pred = problem.predicted_reduction(system, step, damping)
                rho = (cost - new_cost) / pred if pred > 0 else 1.0
                damping *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                accepted = True
                break
            damping *= nu
            nu *= 2.0
        if accepted:
            decrease = cost - new_cost
            state, cost = candidate, new_cost
        log.append({"iteration": it, "cost": cost, "damping": damping, "accepted": accepted})
        yield it, cost
        if not accepted:
            converged = True
            break
        if decrease <= config.relative_tolerance * max(cost + decrease, 1e-300):
            converged = True
            break
    return LMResult(state, cost, initial, it, log, converged)


def run_lm(problem, state, config: LMConfig, abort=None, log=None) -> LMResult:
    gen = lm_iterations(problem, state, config, abort=abort, log=log)
    while True:
        try:
            next(gen)
        except StopIteration as stop:
            return stop.value
