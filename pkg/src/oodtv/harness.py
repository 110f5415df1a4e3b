"""Experiment orchestration: train every method variant on fresh suites,
evaluate mean/worst accuracy over the four test environments, aggregate
across repetitions, and read/write the result tables.

Method naming: the partition-based family (needs ground-truth
environments) is irm / irm-tv-l1 / ood-tv-irm-{l1,l2}; the inferred-
environment family (uses t as the auxiliary variable) is zin /
minimax-tv-l1 / ood-tv-minimax-{l1,l2}. The ood-tv-* variants train the
penalty-strength network adversarially; the others keep a fixed penalty
weight, which is recorded in every output.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import datagen, nets, optim
from .datagen import EnvBatch, SuiteConfig
from .nets import Network
from .optim import ModelBundle, TrainConfig

RESULT_PRECISION = 6  # significant digits recorded in CSV outputs
ROW_HEADER = ["method", "repetition", "env0", "env1", "env2", "env3", "mean", "worst"]
AGGREGATE_HEADER = ["method", "mean", "mean_std", "worst", "worst_std"]


@dataclass(frozen=True)
class MethodDef:
    name: str
    objective: str  # g | h
    flavor: str  # l1 | l2
    adversarial: bool  # trained penalty network vs fixed constant


METHODS = {
    "irm": MethodDef("irm", "g", "l2", False),
    "irm-tv-l1": MethodDef("irm-tv-l1", "g", "l1", False),
    "ood-tv-irm-l2": MethodDef("ood-tv-irm-l2", "g", "l2", True),
    "ood-tv-irm-l1": MethodDef("ood-tv-irm-l1", "g", "l1", True),
    "zin": MethodDef("zin", "h", "l2", False),
    "minimax-tv-l1": MethodDef("minimax-tv-l1", "h", "l1", False),
    "ood-tv-minimax-l2": MethodDef("ood-tv-minimax-l2", "h", "l2", True),
    "ood-tv-minimax-l1": MethodDef("ood-tv-minimax-l1", "h", "l1", True),
}
METHOD_ALIASES = {"irm-tv-l2": "irm", "minimax-tv-l2": "zin"}


def resolve_method(name: str) -> MethodDef:
    key = name.strip().lower()
    key = METHOD_ALIASES.get(key, key)
    if key not in METHODS:
        known = ", ".join(sorted(METHODS) + sorted(METHOD_ALIASES))
        raise ValueError(f"unknown method {name!r}; known: {known}")
    return METHODS[key]


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "ood-tv-irm-l1"
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    repetitions: int = 10
    seed: int = 0  # master seed; repetition i uses suite seed = seed + i

    def __post_init__(self):
        if self.repetitions <= 0:
            raise ValueError("repetitions must be positive")
        resolve_method(self.method)


@dataclass(frozen=True)
class RepetitionResult:
    repetition: int
    per_env: tuple[float, ...]
    mean: float
    worst: float


@dataclass(frozen=True)
class ResultTable:
    method: str
    rows: tuple[RepetitionResult, ...]
    mean: float
    mean_std: float
    worst: float
    worst_std: float
    config_note: str = ""


def evaluate(model: Network, test_envs) -> tuple[float, float, np.ndarray]:
    """Per-environment accuracy at threshold 0.5 on the sigmoid of the logit.

    Returns (mean over environments, worst environment, per-env vector).
    """
    per_env = []
    for env in test_envs:
        if env.n == 0:
            raise ValueError(f"environment {env.env_id} is empty")
        logits = model.apply(env.x).reshape(-1)
        pred = (logits > 0.0).astype(np.float64)  # sigmoid(logit) > 0.5
        per_env.append(float((pred == env.y).mean()))
    per_env = np.asarray(per_env)
    return float(per_env.mean()), float(per_env.min()), per_env


def _network_seeds(rep_seed: int) -> dict:
    # fixed documented offsets so independent implementations can align
    return {"phi": rep_seed * 1000 + 1, "lambda": rep_seed * 1000 + 2, "rho": rep_seed * 1000 + 3}


def make_bundle(method: MethodDef, rep_seed: int, n_features: int = datagen.N_FEATURES) -> ModelBundle:
    seeds = _network_seeds(rep_seed)
    phi_spec = nets.simulation_phi_spec(n_features)
    phi = nets.build(phi_spec, seeds["phi"])
    lambda_net = (
        nets.build(nets.simulation_lambda_spec(phi_spec.param_count), seeds["lambda"])
        if method.adversarial
        else None
    )
    rho_net = nets.build(nets.simulation_rho_spec(), seeds["rho"]) if method.objective == "h" else None
    return ModelBundle(phi=phi, lambda_net=lambda_net, rho_net=rho_net)


def run_single(method: MethodDef, suite_cfg: SuiteConfig, trainer_cfg: TrainConfig):
    """One repetition: fresh suite and networks, train, evaluate."""
    trainer_cfg = replace(trainer_cfg, objective=method.objective, flavor=method.flavor)
    train_envs, test_envs = datagen.make_suite(suite_cfg)
    bundle = make_bundle(method, suite_cfg.seed)
    trained, trace = optim.train(bundle, train_envs, trainer_cfg)
    mean, worst, per_env = evaluate(trained.phi, test_envs)
    return trained, trace, mean, worst, per_env


def run_experiment(cfg: ExperimentConfig) -> ResultTable:
    """Repeat the method over derived seeds and aggregate mean/worst accuracy."""
    method = resolve_method(cfg.method)
    rows = []
    for rep in range(cfg.repetitions):
        suite_cfg = replace(cfg.suite, seed=cfg.seed + rep)
        try:
            _, _, mean, worst, per_env = run_single(method, suite_cfg, cfg.trainer)
        except Exception as exc:
            raise RuntimeError(
                f"{method.name}: repetition {rep} failed after {len(rows)} completed rows"
            ) from exc
        rows.append(RepetitionResult(rep, tuple(per_env), mean, worst))
    means = np.asarray([r.mean for r in rows])
    worsts = np.asarray([r.worst for r in rows])
    ddof = 1 if len(rows) > 1 else 0
    note = (
        f"lambda_fixed={'trained' if method.adversarial else cfg.trainer.lambda_init} "
        f"n_train={cfg.suite.n_train} n_test_per_env={cfg.suite.n_test_per_env} "
        f"optimizer={cfg.trainer.optimizer} anneal={cfg.trainer.anneal_epochs} "
        f"epochs={cfg.trainer.total_epochs} master_seed={cfg.seed}"
    )
    return ResultTable(
        method=method.name,
        rows=tuple(rows),
        mean=float(means.mean()),
        mean_std=float(means.std(ddof=ddof)),
        worst=float(worsts.mean()),
        worst_std=float(worsts.std(ddof=ddof)),
        config_note=note,
    )


# ---------------------------------------------------------------------------
# results CSV


def _fmt(v: float) -> str:
    return f"{v:.{RESULT_PRECISION}g}"


def format_result_csv(tables) -> str:
    """Per-repetition rows, then a blank line, then the aggregate block."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    for table in tables:
        if table.config_note:
            buf.write(f"# {table.config_note}\n")
    writer.writerow(ROW_HEADER)
    for table in tables:
        for row in table.rows:
            writer.writerow(
                [table.method, row.repetition]
                + [_fmt(v) for v in row.per_env]
                + [_fmt(row.mean), _fmt(row.worst)]
            )
    buf.write("\n")
    writer.writerow(AGGREGATE_HEADER)
    for table in tables:
        writer.writerow(
            [table.method, _fmt(table.mean), _fmt(table.mean_std), _fmt(table.worst), _fmt(table.worst_std)]
        )
    return buf.getvalue()


def write_result_csv(path, tables) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_result_csv(tables))


def read_result_csv(path):
    """Parse a results CSV back into (rows, aggregates) at recorded precision."""
    rows, aggregates = [], []
    section = None
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                section = None
                continue
            if line.startswith("#"):
                continue
            cells = next(csv.reader([line]))
            if cells == ROW_HEADER:
                section = "rows"
                continue
            if cells == AGGREGATE_HEADER:
                section = "aggregate"
                continue
            if section == "rows":
                rows.append(
                    RepetitionResult(
                        repetition=int(cells[1]),
                        per_env=tuple(float(v) for v in cells[2:6]),
                        mean=float(cells[6]),
                        worst=float(cells[7]),
                    )
                )
            elif section == "aggregate":
                aggregates.append(
                    {
                        "method": cells[0],
                        "mean": float(cells[1]),
                        "mean_std": float(cells[2]),
                        "worst": float(cells[3]),
                        "worst_std": float(cells[4]),
                    }
                )
    return rows, aggregates
