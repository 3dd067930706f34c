"""Proximal-gradient reconstruction in four variants.

The iteration minimizes

    J(sigma) = 1/2 ||Phi(sigma) - Lambda||^2 + (lam*rho/2) ||sigma||^2
               + lam * R(sigma)   subject to the box (and mask, if any)

by alternating a gradient step on the smooth part with the penalty prox
and the feasibility projections. R is either the l1 distance to the
background or the weighted anisotropic TV, and each comes with or
without a support mask, giving the four variants.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError, SolverBlowupError
from .forward import ForwardOperator
from .prox import RegularizerConfig, prox_g

VARIANTS = ("pgm-l1", "pgm-tv", "pgm-l1-mo", "pgm-tv-mo")

DESCENT_SLACK = 1e-12
_MAX_HALVINGS = 30
_POWER_STEPS = 50


def variant_name(penalty: str, masked: bool) -> str:
    name = f"pgm-{penalty}"
    return name + "-mo" if masked else name


@dataclass(frozen=True)
class SolverConfig:
    """Variant, weights, step size, and stopping rule for one solve."""

    variant: str
    lam: float
    reg: RegularizerConfig
    rho: float = 1e-12
    mu: float | str = "auto"
    max_iters: int = 500
    tol: float = 1e-6

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}")
        if not self.lam > 0:
            raise InputError("lam must be positive")
        if self.rho < 0:
            raise InputError("rho must be nonnegative")
        if self.mu != "auto" and not (
                isinstance(self.mu, (int, float)) and self.mu > 0):
            raise InputError("mu must be positive or 'auto'")
        if self.max_iters < 1:
            raise InputError("max_iters must be at least 1")
        if not self.tol > 0:
            raise InputError("tol must be positive")
        masked = self.variant.endswith("-mo")
        penalty = "tv" if self.variant.startswith("pgm-tv") else "l1"
        if self.reg.penalty != penalty:
            raise InputError(
                f"variant {self.variant} needs penalty {penalty!r}, "
                f"config has {self.reg.penalty!r}")
        if masked != (self.reg.mask is not None):
            raise InputError(
                f"variant {self.variant} and mask presence disagree")


@dataclass(frozen=True)
class SolveReport:
    """Final iterate plus the full trajectory record of one solve."""

    sigma: np.ndarray
    objective_trace: tuple
    change_trace: tuple
    mu: float
    iterations: int
    termination: str
    variant: str
    lam: float
    rho: float
    beta_hat: float | None = None
    alpha_hat: float | None = None
    gamma_hat: float | None = None
    q: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "sigma",
                           np.ascontiguousarray(self.sigma, dtype=np.float64))
        object.__setattr__(self, "objective_trace",
                           tuple(float(v) for v in self.objective_trace))
        object.__setattr__(self, "change_trace",
                           tuple(float(v) for v in self.change_trace))
        if len(self.objective_trace) != self.iterations + 1:
            raise InputError("objective trace length must be iterations + 1")
        if len(self.change_trace) != self.iterations + 1:
            raise InputError("change trace length must be iterations + 1")

    def as_dict(self) -> dict:
        return {
            "sigma": self.sigma.tolist(),
            "objective_trace": list(self.objective_trace),
            "change_trace": list(self.change_trace),
            "mu": self.mu,
            "iterations": self.iterations,
            "termination": self.termination,
            "variant": self.variant,
            "lam": self.lam,
            "rho": self.rho,
            "beta_hat": self.beta_hat,
            "alpha_hat": self.alpha_hat,
            "gamma_hat": self.gamma_hat,
            "q": self.q,
        }


def write_report(report: SolveReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, sort_keys=True)
        fh.write("\n")


def read_report(path) -> SolveReport:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return SolveReport(
        sigma=np.asarray(payload["sigma"], dtype=np.float64),
        objective_trace=tuple(payload["objective_trace"]),
        change_trace=tuple(payload["change_trace"]),
        mu=payload["mu"],
        iterations=payload["iterations"],
        termination=payload["termination"],
        variant=payload["variant"],
        lam=payload["lam"],
        rho=payload["rho"],
        beta_hat=payload.get("beta_hat"),
        alpha_hat=payload.get("alpha_hat"),
        gamma_hat=payload.get("gamma_hat"),
        q=payload.get("q"),
    )


def _values(sigma) -> np.ndarray:
    return np.ascontiguousarray(
        getattr(sigma, "values", sigma), dtype=np.float64)


def grad_f(sigma, measurements, lam: float, rho: float,
           op: ForwardOperator) -> np.ndarray:
    """Gradient of the smooth part: J^T (Phi(sigma) - Lambda) + lam*rho*sigma."""
    vals = _values(sigma)
    meas = np.asarray(measurements, dtype=np.float64)
    phi, jac = op.phi_and_jacobian(vals)
    return jac.entries.T @ (phi - meas) + lam * rho * vals


def choose_step_size(beta_hat: float, lam: float, rho: float) -> float:
    """0.99 times the smaller of the two step bounds 1/(2*beta), 1/(2*lam*rho).

    beta_hat bounds the squared operator norm of the Jacobian, the same
    units as the spectral estimates from the RIP helper.
    """
    if not beta_hat > 0:
        raise InputError("beta_hat must be positive")
    lam_rho = lam * rho
    cap = 1.0 / (2.0 * beta_hat)
    if lam_rho > 0:
        cap = min(cap, 1.0 / (2.0 * lam_rho))
    return 0.99 * cap


def estimate_beta(op: ForwardOperator, sigma, steps: int = _POWER_STEPS,
                  seed: int = 0, support=None) -> float:
    """Largest eigenvalue of J^T J at sigma, by power iteration.

    With ``support`` given, only those Jacobian columns enter: the step
    bound for a masked solve comes from the operator restricted to the
    subspace the iteration actually moves in, which is far better
    conditioned than the full column space.
    """
    jac = op.jacobian(_values(sigma)).entries
    if support is not None:
        support = np.asarray(support)
        if support.dtype == bool:
            support = np.flatnonzero(support)
        if support.size == 0:
            raise InputError("support is empty")
        jac = jac[:, support]
    rng = np.random.default_rng(seed)
    v = rng.normal(size=jac.shape[1])
    v /= np.linalg.norm(v)
    for _ in range(steps):
        w = jac.T @ (jac @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
    return float(np.linalg.norm(jac @ v) ** 2)


def _objective_value(vals, phi, measurements, config: SolverConfig) -> float:
    resid = phi - measurements
    value = 0.5 * float(resid @ resid)
    value += 0.5 * config.lam * config.rho * float(vals @ vals)
    value += config.lam * config.reg.penalty_value(vals)
    return value


def _feasible(vals, config: SolverConfig) -> bool:
    c0, c1 = config.reg.bounds
    if vals.min() < c0 or vals.max() > c1:
        return False
    mask = config.reg.mask
    if mask is not None:
        off = np.asarray(mask.bits) == 0
        if not np.array_equal(vals[off], config.reg.sigma0[off]):
            return False
    return True


def objective(sigma, measurements, config: SolverConfig,
              op: ForwardOperator) -> float:
    """Full variational objective, +inf off the feasible set."""
    vals = _values(sigma)
    meas = np.asarray(measurements, dtype=np.float64)
    if not _feasible(vals, config):
        return math.inf
    return _objective_value(vals, op.phi(vals), meas, config)


def run_pgm(init, measurements, config: SolverConfig, op: ForwardOperator,
            alpha_hat: float | None = None,
            gamma_hat: float | None = None) -> SolveReport:
    """Iterate sigma <- prox_{mu*lam*g}(sigma - mu*grad_f(sigma)).

    The initial point is projected onto the feasible set. With mu="auto"
    the step size comes from a power-iteration estimate of the squared
    Jacobian norm at the start; a step that fails the descent check is
    halved until it descends, and two consecutive such failures trigger
    a re-estimate at the current iterate. Traces cover every accepted
    iterate, the initial point included. A non-finite objective aborts
    with the trace attached to the raised error.
    """
    meas = np.asarray(measurements, dtype=np.float64)
    if meas.ndim != 1 or meas.size != op.m:
        raise InputError(
            f"measurement vector must have length {op.m}, got {meas.shape}")
    if not np.isfinite(meas).all():
        raise InputError("measurements must be finite")
    sigma = prox_g(_values(init), 0.0, config.reg)

    mask_support = None
    if config.reg.mask is not None:
        mask_support = np.flatnonzero(np.asarray(config.reg.mask.bits))
        if mask_support.size == 0:
            # fully pinned iteration; any step size converges immediately
            mask_support = None
    beta_hat = None
    if config.mu == "auto":
        beta_hat = estimate_beta(op, sigma, support=mask_support)
        if beta_hat <= 0:
            raise SolverBlowupError("Jacobian estimate vanished at the start")
        mu = choose_step_size(beta_hat, config.lam, config.rho)
    else:
        mu = float(config.mu)

    def report(trace_obj, trace_change, term, final_sigma, mu_used):
        q = None
        if alpha_hat is not None and gamma_hat is not None:
            q = (1.0 - mu_used * config.lam * config.rho
                 - mu_used * alpha_hat + 2.0 * mu_used * gamma_hat)
        return SolveReport(
            sigma=final_sigma,
            objective_trace=tuple(trace_obj),
            change_trace=tuple(trace_change),
            mu=mu_used,
            iterations=len(trace_obj) - 1,
            termination=term,
            variant=config.variant,
            lam=config.lam,
            rho=config.rho,
            beta_hat=beta_hat,
            alpha_hat=alpha_hat,
            gamma_hat=gamma_hat,
            q=q,
        )

    obj = _objective_value(sigma, op.phi(sigma), meas, config)
    if not math.isfinite(obj):
        raise SolverBlowupError(
            "objective not finite at the initial point",
            report=report([obj], [0.0], "blowup", sigma, mu))
    obj_trace = [obj]
    change_trace = [0.0]
    consecutive_failures = 0
    termination = "max_iters"

    for _ in range(config.max_iters):
        phi_k, jac_k = op.phi_and_jacobian(sigma)
        grad = jac_k.entries.T @ (phi_k - meas) + config.lam * config.rho * sigma
        halved = False
        stalled = False
        for _attempt in range(_MAX_HALVINGS + 1):
            cand = prox_g(sigma - mu * grad, mu * config.lam, config.reg)
            cand_obj = _objective_value(cand, op.phi(cand), meas, config)
            if not math.isfinite(cand_obj):
                raise SolverBlowupError(
                    "objective became non-finite",
                    report=report(obj_trace + [cand_obj],
                                  change_trace + [math.nan],
                                  "blowup", cand, mu))
            if cand_obj <= obj + DESCENT_SLACK:
                break
            halved = True
            mu *= 0.5
        else:
            # No step at any size descends beyond evaluation noise: the
            # iterate is numerically stationary for this composite step.
            termination = "stalled"
            stalled = True
        if stalled:
            break

        consecutive_failures = consecutive_failures + 1 if halved else 0
        change = float(np.linalg.norm(cand - sigma)
                       / max(1.0, np.linalg.norm(sigma)))
        sigma = cand
        obj = cand_obj
        obj_trace.append(obj)
        change_trace.append(change)
        if change < config.tol:
            termination = "converged"
            break
        if consecutive_failures >= 2 and config.mu == "auto":
            beta_hat = estimate_beta(op, sigma, support=mask_support)
            if beta_hat > 0:
                mu = min(mu, choose_step_size(beta_hat, config.lam, config.rho))
            consecutive_failures = 0

    return report(obj_trace, change_trace, termination, sigma, mu)


def estimate_gamma(op: ForwardOperator, bounds, n_pairs: int = 10,
                   seed: int = 0, support=None, sigma0=None) -> float:
    """Worst squared Taylor-remainder ratio over random pairs in the box.

    gamma_hat = max ||Phi(s1) - Phi(s2) - J(s2)(s1 - s2)||^2 / ||s1 - s2||^2.
    With ``support`` given, the pairs agree with ``sigma0`` off the
    support, probing the restricted subspace the masked variants move in.
    """
    c0, c1 = bounds
    rng = np.random.default_rng(seed)
    n = op.n
    if support is not None:
        support = np.asarray(support)
        if support.dtype == bool:
            support = np.flatnonzero(support)
        if sigma0 is None:
            raise InputError("sigma0 is required with a support restriction")
        base = _values(sigma0)
    worst = 0.0
    for _ in range(n_pairs):
        if support is None:
            s1 = rng.uniform(c0, c1, n)
            s2 = rng.uniform(c0, c1, n)
        else:
            s1 = base.copy()
            s2 = base.copy()
            s1[support] = rng.uniform(c0, c1, support.size)
            s2[support] = rng.uniform(c0, c1, support.size)
        phi2, jac2 = op.phi_and_jacobian(s2)
        phi1 = op.phi(s1)
        diff = s1 - s2
        rem = phi1 - phi2 - jac2.entries @ diff
        ratio = float((rem @ rem) / (diff @ diff))
        worst = max(worst, ratio)
    return worst


def cluster_point_bound(sigma_final, sigma_true, objective_at_true: float,
                        alpha_hat: float, lam: float, rho: float,
                        gamma_hat: float) -> dict:
    """Probe of the cluster-point error bound on the restricted subspace.

    Returns the two sides of ||sigma_true - sigma_final||^2 <=
    4 / (alpha_hat + lam*rho - 2*gamma_hat) * J(sigma_true) together with
    whether the parameter condition (positive denominator) holds; the
    inequality is only meaningful in that case.
    """
    denom = alpha_hat + lam * rho - 2.0 * gamma_hat
    lhs = float(np.linalg.norm(_values(sigma_true) - _values(sigma_final)) ** 2)
    out = {
        "denominator": denom,
        "condition_holds": denom > 0,
        "lhs": lhs,
        "rhs": math.inf if denom <= 0 else 4.0 / denom * objective_at_true,
    }
    out["holds"] = (lhs <= out["rhs"]) if out["condition_holds"] else None
    return out
