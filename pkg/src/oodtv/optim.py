"""Primal-dual training: descent on the feature extractor, ascent on the
penalty-side variables, with the dual gradient evaluated at the freshly
updated primal point.

Two optimizers are provided. The normalized subgradient schedule
eta = 1/(k^p * ||grad||) with p > 1 forces step norms <= 1/k^p, making
the iterates a Cauchy sequence with a closed-form iteration bound. The
adaptive-moment path (Adam defaults 1e-3, 0.9/0.999, 1e-8) is the
practical alternative and carries no such guarantee.

A run starts with an annealing phase: the penalty strength is held at a
fixed value, the penalty-strength network is frozen, and only the
feature extractor (optionally also the environment-inference network)
is trained. The adversarial phase then runs full primal-dual steps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import objectives
from .datagen import EnvBatch, pooled
from .nets import Network
from .objectives import GradBundle, LagrangianBreakdown

TRACE_FIELDS = ("epoch", "total", "fidelity", "penalty", "lambda", "dphi_norm", "dpsi_norm")


class TrainingDivergedError(RuntimeError):
    """Raised when the objective becomes non-finite or exceeds the guard."""

    def __init__(self, epoch: int, total: float, last_state):
        self.epoch = epoch
        self.total = total
        self.last_state = last_state
        super().__init__(f"training diverged at epoch {epoch} (total={total!r})")


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    total: float
    fidelity: float
    penalty: float  # lambda * penalty_base
    lam: float
    dphi_norm: float
    dpsi_norm: float

    def as_json_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "total": self.total,
            "fidelity": self.fidelity,
            "penalty": self.penalty,
            "lambda": self.lam,
            "dphi_norm": self.dphi_norm,
            "dpsi_norm": self.dpsi_norm,
        }


@dataclass
class PDState:
    phi: np.ndarray
    psi: np.ndarray | None
    rho: np.ndarray | None
    k: int = 1
    p: float = 2.0
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("iteration counter starts at 1")
        if self.p <= 1.0:
            raise ValueError("schedule exponent p must exceed 1")


def step_size(k: int, p: float, grad_norm: float) -> float:
    """Normalized step 1/(k^p * grad_norm); 0 on the zero-gradient branch."""
    if p <= 1.0:
        raise ValueError(f"p must exceed 1 for the convergent schedule, got {p}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if grad_norm < 0.0:
        raise ValueError("grad_norm must be non-negative")
    if grad_norm == 0.0:
        return 0.0
    return 1.0 / (k**p * grad_norm)


def iterations_for_tolerance(p: float, eps: float) -> int:
    """Smallest integer N with N > ((p-1)*eps)^(-1/(p-1)) + 1."""
    if p <= 1.0:
        raise ValueError(f"p must exceed 1, got {p}")
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    bound = ((p - 1.0) * eps) ** (-1.0 / (p - 1.0)) + 1.0
    return int(math.floor(bound)) + 1


def _norm(v) -> float:
    return 0.0 if v is None else float(np.linalg.norm(v))


def _dual_norm(bundle: GradBundle) -> float:
    parts = [v for v in (bundle.d_rho, bundle.d_psi) if v is not None]
    if not parts:
        return 0.0
    return float(np.sqrt(sum(float(v @ v) for v in parts)))


def _check_finite(bundle: GradBundle, k: int):
    for name, v in (("phi", bundle.d_phi), ("psi", bundle.d_psi), ("rho", bundle.d_rho)):
        if v is not None and not np.isfinite(v).all():
            raise TrainingDivergedError(k, float("nan"), None)


def primal_dual_step(state: PDState, grad_eval) -> PDState:
    """One primal descent / dual ascent step under the normalized schedule.

    ``grad_eval(phi, psi, rho) -> GradBundle``. The dual gradient is
    evaluated at the updated primal point; this ordering is part of the
    update's definition, not an implementation detail.
    """
    k = state.k
    primal = grad_eval(state.phi, state.psi, state.rho)
    _check_finite(primal, k)
    eta1 = step_size(k, state.p, _norm(primal.d_phi))
    phi_next = state.phi - eta1 * primal.d_phi

    dual = grad_eval(phi_next, state.psi, state.rho)
    _check_finite(dual, k)
    eta2 = step_size(k, state.p, _dual_norm(dual))
    psi_next = state.psi if state.psi is None or dual.d_psi is None else state.psi + eta2 * dual.d_psi
    rho_next = state.rho if state.rho is None or dual.d_rho is None else state.rho + eta2 * dual.d_rho

    return replace(state, phi=phi_next, psi=psi_next, rho=rho_next, k=k + 1)


class Adam:
    """Adaptive-moment update; call step(params, grad) for descent."""

    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class ModelBundle:
    """Networks under training. lambda_net None means a fixed penalty."""

    phi: Network
    lambda_net: Network | None = None
    rho_net: Network | None = None


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "g"  # g: ground-truth partition; h: inferred environments
    flavor: str = "l1"
    anneal_epochs: int = 2000
    total_epochs: int = 2400
    optimizer: str = "adam"  # adam | pd-norm
    p: float = 2.0
    lambda_init: float = 1.0  # fixed penalty during annealing and for non-adversarial runs
    lr: float = 1e-3  # adam only
    lr_dual: float | None = None  # adam step for the ascent side (None: same as lr)
    normalization: str = "mass"
    anneal_train_rho: bool = False  # let rho ascend during annealing
    dual_warm_start: bool = True  # start the adversarial phase at lambda = lambda_init
    divergence_guard: float = 1e8
    seed: int = 0

    def __post_init__(self):
        if self.objective not in ("g", "h"):
            raise ValueError(f"objective must be g or h, got {self.objective!r}")
        if self.flavor not in objectives.FLAVORS:
            raise ValueError(f"flavor must be one of {objectives.FLAVORS}")
        if self.optimizer not in ("adam", "pd-norm"):
            raise ValueError(f"optimizer must be adam or pd-norm, got {self.optimizer!r}")
        if not 0 <= self.anneal_epochs <= self.total_epochs:
            raise ValueError("need 0 <= anneal_epochs <= total_epochs")
        if self.p <= 1.0 and self.optimizer == "pd-norm":
            raise ValueError("pd-norm schedule needs p > 1")


def _make_evaluators(bundle: ModelBundle, envs, cfg: TrainConfig):
    """(annealing evaluator, adversarial evaluator), each
    (phi, psi, rho) -> (GradBundle, LagrangianBreakdown)."""
    if cfg.objective == "g":
        def run(phi_vec, psi_vec, rho_vec, use_lambda_net):
            phi = bundle.phi.with_params(phi_vec)
            lnet = bundle.lambda_net.with_params(psi_vec) if use_lambda_net else None
            fixed = None if use_lambda_net else cfg.lambda_init
            return objectives.grads_and_value_g(phi, lnet, envs, cfg.flavor, fixed_lambda=fixed)

    else:
        if bundle.rho_net is None:
            raise ValueError("objective h needs a rho network")
        data = pooled(envs)

        def run(phi_vec, psi_vec, rho_vec, use_lambda_net):
            phi = bundle.phi.with_params(phi_vec)
            rho = bundle.rho_net.with_params(rho_vec)
            lnet = bundle.lambda_net.with_params(psi_vec) if use_lambda_net else None
            fixed = None if use_lambda_net else cfg.lambda_init
            return objectives.grads_and_value_h(
                phi, lnet, rho, data, flavor=cfg.flavor, fixed_lambda=fixed,
                normalization=cfg.normalization,
            )

    has_lambda_net = bundle.lambda_net is not None

    def anneal_eval(phi_vec, psi_vec, rho_vec):
        g, b = run(phi_vec, psi_vec, rho_vec, use_lambda_net=False)
        if cfg.objective == "h" and not cfg.anneal_train_rho:
            g = GradBundle(d_phi=g.d_phi, d_psi=None, d_rho=None)
        else:
            g = GradBundle(d_phi=g.d_phi, d_psi=None, d_rho=g.d_rho)
        return g, b

    def adversarial_eval(phi_vec, psi_vec, rho_vec):
        return run(phi_vec, psi_vec, rho_vec, use_lambda_net=has_lambda_net)

    return anneal_eval, adversarial_eval


def train(bundle: ModelBundle, train_envs, cfg: TrainConfig):
    """Full training run; returns (trained bundle, trace records).

    Epochs 1..anneal_epochs minimize fidelity + lambda_init*penalty_base
    with the penalty-strength network frozen; the remaining epochs run
    primal-dual steps. One epoch is one full-batch iteration. Under the
    pd-norm optimizer the step counter k runs across the whole run, so
    the step-norm bound ||dphi|| <= 1/k^p holds for every epoch.
    """
    anneal_eval, adversarial_eval = _make_evaluators(bundle, train_envs, cfg)

    phi = bundle.phi.params.copy()
    psi = None if bundle.lambda_net is None else bundle.lambda_net.params.copy()
    rho = None if bundle.rho_net is None else bundle.rho_net.params.copy()

    lr_dual = cfg.lr if cfg.lr_dual is None else cfg.lr_dual
    adam_phi = Adam(phi.size, lr=cfg.lr) if cfg.optimizer == "adam" else None
    adam_psi = Adam(psi.size, lr=lr_dual) if cfg.optimizer == "adam" and psi is not None else None
    adam_rho = Adam(rho.size, lr=lr_dual) if cfg.optimizer == "adam" and rho is not None else None

    has_dual = bundle.lambda_net is not None or cfg.objective == "h"

    trace: list[TraceRecord] = []
    for epoch in range(1, cfg.total_epochs + 1):
        annealing = epoch <= cfg.anneal_epochs
        evaluator = anneal_eval if annealing else adversarial_eval
        dual_live = has_dual and (not annealing or (cfg.anneal_train_rho and cfg.objective == "h"))

        if (
            cfg.dual_warm_start
            and psi is not None
            and epoch == cfg.anneal_epochs + 1
            and cfg.anneal_epochs > 0
        ):
            # continue the annealed penalty level: set lambda(psi, phi) = lambda_init
            from .nets import calibrate_head_bias

            psi = calibrate_head_bias(
                bundle.lambda_net.with_params(psi), phi, cfg.lambda_init
            ).params

        primal, breakdown = evaluator(phi, psi, rho)
        if not np.isfinite(breakdown.total) or abs(breakdown.total) > cfg.divergence_guard:
            raise TrainingDivergedError(epoch, breakdown.total, _pack(bundle, phi, psi, rho, trace))
        _check_finite(primal, epoch)

        # primal update first
        if cfg.optimizer == "pd-norm":
            eta1 = step_size(epoch, cfg.p, _norm(primal.d_phi))
            phi_next = phi - eta1 * primal.d_phi
        else:
            phi_next = adam_phi.step(phi, primal.d_phi)

        # dual gradients at the updated primal point
        psi_next, rho_next = psi, rho
        dual = evaluator(phi_next, psi, rho)[0] if dual_live else GradBundle(primal.d_phi, None, None)
        _check_finite(dual, epoch)
        if dual.d_psi is not None or dual.d_rho is not None:
            if cfg.optimizer == "pd-norm":
                # one step size, normalized by the joint dual gradient norm
                eta2 = step_size(epoch, cfg.p, _dual_norm(dual))
                if dual.d_psi is not None:
                    psi_next = psi + eta2 * dual.d_psi
                if dual.d_rho is not None:
                    rho_next = rho + eta2 * dual.d_rho
            else:
                # ascend: adam minimizes, so feed the negated gradients
                if dual.d_psi is not None:
                    psi_next = adam_psi.step(psi, -dual.d_psi)
                if dual.d_rho is not None:
                    rho_next = adam_rho.step(rho, -dual.d_rho)

        trace.append(
            TraceRecord(
                epoch=epoch,
                total=breakdown.total,
                fidelity=breakdown.fidelity,
                penalty=breakdown.penalty,
                lam=breakdown.lam,
                dphi_norm=float(np.linalg.norm(phi_next - phi)),
                dpsi_norm=0.0 if psi is None else float(np.linalg.norm(psi_next - psi)),
            )
        )
        phi, psi, rho = phi_next, psi_next, rho_next

    return _pack(bundle, phi, psi, rho, trace), trace


def _pack(bundle: ModelBundle, phi, psi, rho, trace) -> ModelBundle:
    return ModelBundle(
        phi=bundle.phi.with_params(phi),
        lambda_net=None if bundle.lambda_net is None else bundle.lambda_net.with_params(psi),
        rho_net=None if bundle.rho_net is None else bundle.rho_net.with_params(rho),
    )


def write_trace(path, trace) -> None:
    """Trace as JSON lines, one record per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec.as_json_dict()))
            fh.write("\n")


def read_trace(path) -> list[TraceRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(
                TraceRecord(
                    epoch=int(d["epoch"]),
                    total=d["total"],
                    fidelity=d["fidelity"],
                    penalty=d["penalty"],
                    lam=d["lambda"],
                    dphi_norm=d["dphi_norm"],
                    dpsi_norm=d["dpsi_norm"],
                )
            )
    return out
