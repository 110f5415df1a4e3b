"""Risks, total-variation penalties, the two Lagrangians, and their
(sub)gradients.

The classifier scalar w is fixed at 1, so each environment's risk
sensitivity d/dw R(w o phi) is itself a scalar and is written out
analytically inside the forward graph:

    grad_w R = mean_j (sigmoid(f_j) - y_j) * f_j,   f_j = phi(x_j).

All composite objectives are therefore first-order expressions and one
reverse pass per tape yields every required (sub)gradient, with |.|
contributing subgradient 0 at 0 everywhere.

Two Lagrangians are provided. ``lagrangian_g`` works on ground-truth
environment partitions:

    g = mean_e risk_e + lambda * penalty_base
    penalty_base(l1) = (mean_e |grad_w_e|)^2
    penalty_base(l2) = mean_e grad_w_e^2

``lagrangian_h`` works on pooled data with soft environments inferred
from the auxiliary variable by the rho network. The fidelity term uses
the uniform environment measure, which collapses to the pooled sample
mean and is independent of rho; the penalty weights each inferred
environment's grad_w magnitude by that environment's average assignment
mass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from . import tensor as T
from .datagen import EnvBatch
from .nets import Network, NetworkSpec

FLAVORS = ("l1", "l2")
NORMALIZATIONS = ("mass", "count")


@dataclass(frozen=True)
class LagrangianBreakdown:
    """total = fidelity + lam * penalty_base (checked to 1e-10 in tests)."""

    fidelity: float
    penalty_base: float
    lam: float
    total: float

    @property
    def penalty(self) -> float:
        return self.lam * self.penalty_base


@dataclass(frozen=True)
class GradBundle:
    d_phi: np.ndarray
    d_psi: np.ndarray | None
    d_rho: np.ndarray | None = None


def subgrad_abs(v: float) -> float:
    """Subgradient of |.|: sign(v), with the zero branch at v == 0."""
    return float(np.sign(v))


def tv_expectation(magnitudes, weights) -> float:
    """Expectation sum_i weights_i * |magnitudes|_i over the simplex weights."""
    m = np.asarray(magnitudes, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if m.size != w.size:
        raise ValueError(f"{m.size} magnitudes vs {w.size} weights")
    if w.min() < -1e-12 or abs(w.sum() - 1.0) > 1e-8:
        raise ValueError("weights must lie on the simplex")
    return float(np.abs(m) @ w)


def empirical_risk(phi: Network, w: float, env: EnvBatch) -> float:
    """Mean binary cross-entropy of the logits w * phi(x) against y."""
    if env.n == 0:
        raise ValueError("empty environment")
    if not np.isfinite(w):
        raise ValueError("classifier scalar must be finite")
    logits = w * phi.apply(env.x).reshape(-1)
    losses = np.maximum(logits, 0.0) - logits * env.y + np.log1p(np.exp(-np.abs(logits)))
    return float(losses.mean())


def grad_w_risk(phi: Network, env: EnvBatch) -> float:
    """d/dw of the empirical risk at w = 1, as a plain scalar."""
    tape = T.Tape()
    f = nets.forward(phi.spec, tape.const(phi.params), tape.const(env.x))
    return _grad_w_expr(f, tape.const(env.y.reshape(-1, 1))).item()


def _risk_expr(f: T.Tensor, y: T.Tensor) -> T.Tensor:
    return T.mean(T.bce_from_logits(f, y))


def _grad_w_expr(f: T.Tensor, y: T.Tensor) -> T.Tensor:
    # analytic d/dw mean BCE(w*f, y) at w=1, kept on the tape so its own
    # gradient w.r.t. phi exists
    return T.mean(T.mul(T.sub(T.sigmoid(f), y), f))


def _lambda_term(lambda_net, fixed_lambda, tape, psi, phi):
    """Scalar penalty strength: a network of (psi, phi) or a fixed constant."""
    if lambda_net is not None:
        return nets.lambda_expr(lambda_net.spec, psi, phi)
    if fixed_lambda is None:
        raise ValueError("need a lambda network or a fixed lambda value")
    return tape.const(np.asarray(float(fixed_lambda)))


def _build_g(
    tape: T.Tape,
    phi_spec: NetworkSpec,
    phi: T.Tensor,
    lambda_net: Network | None,
    psi: T.Tensor | None,
    envs,
    flavor: str,
    fixed_lambda: float | None,
):
    if flavor not in FLAVORS:
        raise ValueError(f"flavor must be one of {FLAVORS}, got {flavor!r}")
    if not envs:
        raise ValueError("need at least one environment")
    n_env = len(envs)
    risks, grads_w = [], []
    for env in envs:
        if env.n == 0:
            raise ValueError(f"environment {env.env_id} is empty")
        f = nets.forward(phi_spec, phi, tape.const(env.x))
        y = tape.const(env.y.reshape(-1, 1))
        risks.append(_risk_expr(f, y))
        grads_w.append(_grad_w_expr(f, y))

    fidelity = _scale(_accumulate(risks), 1.0 / n_env)
    if flavor == "l1":
        penalty_base = T.square(_scale(_accumulate([T.absval(g) for g in grads_w]), 1.0 / n_env))
    else:
        penalty_base = _scale(_accumulate([T.square(g) for g in grads_w]), 1.0 / n_env)
    lam = _lambda_term(lambda_net, fixed_lambda, tape, psi, phi)
    total = T.add(fidelity, T.mul(lam, penalty_base))
    return total, fidelity, penalty_base, lam


def _build_h(
    tape: T.Tape,
    phi_spec: NetworkSpec,
    phi: T.Tensor,
    lambda_net: Network | None,
    psi: T.Tensor | None,
    rho_spec: NetworkSpec,
    theta: T.Tensor,
    data: EnvBatch,
    n_env: int,
    flavor: str,
    fixed_lambda: float | None,
    normalization: str,
):
    if flavor not in FLAVORS:
        raise ValueError(f"flavor must be one of {FLAVORS}, got {flavor!r}")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    if data.n == 0:
        raise ValueError("pooled data is empty")
    if n_env != nets.n_environments(rho_spec):
        raise ValueError(
            f"E={n_env} does not match rho head ({nets.n_environments(rho_spec)} environments)"
        )
    n = data.n
    f = nets.forward(phi_spec, phi, tape.const(data.x))
    y = tape.const(data.y.reshape(-1, 1))
    # fidelity under the uniform environment measure: the pooled sample mean
    fidelity = _risk_expr(f, y)
    per_sample = T.mul(T.sub(T.sigmoid(f), y), f)  # (n, 1) summands of grad_w

    rho = nets.rho_expr(rho_spec, theta, tape.const(data.t.reshape(-1, 1)))  # (n, E)
    weighted_terms = []
    for i in range(n_env):
        col = T.matmul(rho, tape.const(_one_hot(n_env, i)))  # (n, 1)
        mass = T.mean(col)  # average assignment to environment i
        s = T.total(T.mul(col, per_sample))
        if normalization == "mass":
            grad_i = T.safediv(s, T.total(col))
        else:
            grad_i = _scale(s, 1.0 / n)
        if flavor == "l1":
            weighted_terms.append(T.mul(mass, T.absval(grad_i)))
        else:
            weighted_terms.append(T.mul(mass, T.square(grad_i)))
    if flavor == "l1":
        penalty_base = T.square(_accumulate(weighted_terms))
    else:
        penalty_base = _accumulate(weighted_terms)
    lam = _lambda_term(lambda_net, fixed_lambda, tape, psi, phi)
    total = T.add(fidelity, T.mul(lam, penalty_base))
    return total, fidelity, penalty_base, lam


def _accumulate(terms):
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out


def _scale(t, c: float):
    return T.mul(t, float(c))


def _one_hot(n: int, i: int) -> np.ndarray:
    v = np.zeros((n, 1))
    v[i, 0] = 1.0
    return v


def _breakdown(total, fidelity, penalty_base, lam) -> LagrangianBreakdown:
    return LagrangianBreakdown(
        fidelity=fidelity.item(),
        penalty_base=penalty_base.item(),
        lam=lam.item(),
        total=total.item(),
    )


def lagrangian_g(
    phi: Network,
    lambda_net: Network | None,
    envs,
    flavor: str = "l1",
    fixed_lambda: float | None = None,
) -> LagrangianBreakdown:
    """Evaluate the partition-based Lagrangian on ground-truth environments."""
    tape = T.Tape()
    psi = tape.const(lambda_net.params) if lambda_net is not None else None
    parts = _build_g(tape, phi.spec, tape.const(phi.params), lambda_net, psi, envs, flavor, fixed_lambda)
    return _breakdown(*parts)


def grads_and_value_g(
    phi: Network,
    lambda_net: Network | None,
    envs,
    flavor: str = "l1",
    fixed_lambda: float | None = None,
):
    """One tape build: (GradBundle, LagrangianBreakdown) for lagrangian_g."""
    tape = T.Tape()
    phi_leaf = tape.param(phi.params.copy())
    psi_leaf = tape.param(lambda_net.params.copy()) if lambda_net is not None else None
    parts = _build_g(tape, phi.spec, phi_leaf, lambda_net, psi_leaf, envs, flavor, fixed_lambda)
    grads = T.backward(parts[0])
    bundle = GradBundle(
        d_phi=grads[phi_leaf],
        d_psi=grads[psi_leaf] if psi_leaf is not None else None,
    )
    return bundle, _breakdown(*parts)


def grads_g(
    phi: Network,
    lambda_net: Network | None,
    envs,
    flavor: str = "l1",
    fixed_lambda: float | None = None,
) -> GradBundle:
    """(Sub)gradients of lagrangian_g w.r.t. phi and psi via one reverse pass."""
    return grads_and_value_g(phi, lambda_net, envs, flavor, fixed_lambda)[0]


def lagrangian_h(
    phi: Network,
    lambda_net: Network | None,
    rho_net: Network,
    data: EnvBatch,
    n_env: int | None = None,
    flavor: str = "l1",
    fixed_lambda: float | None = None,
    normalization: str = "mass",
) -> LagrangianBreakdown:
    """Evaluate the inferred-environment Lagrangian on pooled data."""
    tape = T.Tape()
    psi = tape.const(lambda_net.params) if lambda_net is not None else None
    if n_env is None:
        n_env = nets.n_environments(rho_net.spec)
    parts = _build_h(
        tape,
        phi.spec,
        tape.const(phi.params),
        lambda_net,
        psi,
        rho_net.spec,
        tape.const(rho_net.params),
        data,
        n_env,
        flavor,
        fixed_lambda,
        normalization,
    )
    return _breakdown(*parts)


def grads_and_value_h(
    phi: Network,
    lambda_net: Network | None,
    rho_net: Network,
    data: EnvBatch,
    n_env: int | None = None,
    flavor: str = "l1",
    fixed_lambda: float | None = None,
    normalization: str = "mass",
):
    """One tape build: (GradBundle, LagrangianBreakdown) for lagrangian_h."""
    tape = T.Tape()
    phi_leaf = tape.param(phi.params.copy())
    psi_leaf = tape.param(lambda_net.params.copy()) if lambda_net is not None else None
    theta_leaf = tape.param(rho_net.params.copy())
    if n_env is None:
        n_env = nets.n_environments(rho_net.spec)
    parts = _build_h(
        tape,
        phi.spec,
        phi_leaf,
        lambda_net,
        psi_leaf,
        rho_net.spec,
        theta_leaf,
        data,
        n_env,
        flavor,
        fixed_lambda,
        normalization,
    )
    grads = T.backward(parts[0])
    bundle = GradBundle(
        d_phi=grads[phi_leaf],
        d_psi=grads[psi_leaf] if psi_leaf is not None else None,
        d_rho=grads[theta_leaf],
    )
    return bundle, _breakdown(*parts)


def grads_h(
    phi: Network,
    lambda_net: Network | None,
    rho_net: Network,
    data: EnvBatch,
    n_env: int | None = None,
    flavor: str = "l1",
    fixed_lambda: float | None = None,
    normalization: str = "mass",
) -> GradBundle:
    """(Sub)gradients of lagrangian_h w.r.t. phi, psi, and the rho parameters."""
    return grads_and_value_h(
        phi, lambda_net, rho_net, data, n_env, flavor, fixed_lambda, normalization
    )[0]


# ---------------------------------------------------------------------------
# semi-Nash diagnostic


@dataclass(frozen=True)
class SemiNashReport:
    item1_ok: bool
    item2_ok: bool
    worst_violation: float
    tol: float


def _contains(grid, point) -> bool:
    point = np.asarray(point, dtype=np.float64).reshape(-1)
    return any(
        np.asarray(p, dtype=np.float64).reshape(-1).shape == point.shape
        and np.allclose(p, point, rtol=0.0, atol=1e-12)
        for p in grid
    )


def semi_nash_check(g, phi_star, psi_star, phi_grid, psi_grid, tol: float) -> SemiNashReport:
    """Grid test of the two equilibrium conditions for a candidate point.

    Item 1: the candidate dual value is a best response on the psi grid.
    Item 2: after re-maximizing the dual at every grid phi, the candidate's
    maximized value is minimal on the phi grid. ``g`` is a callable
    g(psi, phi) -> float. The report carries the worst violation found.
    """
    if not phi_grid or not psi_grid:
        raise ValueError("grids must be non-empty")
    if not _contains(psi_grid, psi_star) or not _contains(phi_grid, phi_star):
        raise ValueError("candidate point must be included in the grids")

    g_star = g(psi_star, phi_star)
    viol1 = max(g(psi, phi_star) - g_star for psi in psi_grid)

    def dual_max(phi):
        return max(g(psi, phi) for psi in psi_grid)

    g_max_star = dual_max(phi_star)
    viol2 = max(g_max_star - dual_max(phi) for phi in phi_grid)

    return SemiNashReport(
        item1_ok=viol1 <= tol,
        item2_ok=viol2 <= tol,
        worst_violation=max(0.0, viol1, viol2),
        tol=tol,
    )
