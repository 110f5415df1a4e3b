"""Command line interface.

Subcommands:
  generate    write a dataset suite CSV (env 0-1 train, 2-5 test)
  train       single training run from a dataset CSV: checkpoint + trace
  evaluate    accuracy of a checkpoint on a dataset's test environments
  experiment  repeated runs of one method, aggregated result CSV
  seminash    grid equilibrium diagnostic around a short trained run

A --config file holds ``key = value`` lines ('#' starts a comment);
command line flags override it. Keys mirror the suite, trainer, and
experiment fields; see the README for the full list.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace

import numpy as np

from . import datagen, harness, nets, objectives, optim
from .datagen import SuiteConfig
from .harness import ExperimentConfig, resolve_method
from .optim import TrainConfig

SUITE_KEYS = {f.name for f in dataclasses.fields(SuiteConfig)} - {"seed"}
TRAINER_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "objective", "flavor"}
TOP_KEYS = {"method", "repetitions", "seed", "out"}


def parse_config_file(path) -> dict:
    """Flat key=value config; unknown keys are rejected."""
    known = SUITE_KEYS | TRAINER_KEYS | TOP_KEYS
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = value
    return out


def _coerce_field(cls, name, value):
    ftype = {f.name: f.type for f in dataclasses.fields(cls)}[name]
    if isinstance(value, str):
        if "bool" in str(ftype):
            return value.lower() in ("1", "true", "yes", "on")
        if "int" in str(ftype):
            return int(value)
        if "float" in str(ftype):
            return float(value)
    return value


def _suite_from(cfg: dict, seed: int) -> SuiteConfig:
    kwargs = {k: _coerce_field(SuiteConfig, k, v) for k, v in cfg.items() if k in SUITE_KEYS}
    return SuiteConfig(seed=seed, **kwargs)


def _trainer_from(cfg: dict, args) -> TrainConfig:
    kwargs = {k: _coerce_field(TrainConfig, k, v) for k, v in cfg.items() if k in TRAINER_KEYS}
    for name in ("anneal_epochs", "total_epochs", "optimizer", "p", "lambda_init", "lr"):
        value = getattr(args, name, None)
        if value is not None:
            kwargs[name] = value
    return TrainConfig(**kwargs)


def _load_config(args) -> dict:
    return parse_config_file(args.config) if args.config else {}


def _pick(args, cfg: dict, key: str, default, cast=None):
    value = getattr(args, key, None)
    if value is None:
        value = cfg.get(key, default)
    if cast is not None and value is not None:
        value = cast(value)
    return value


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    seed = _pick(args, cfg, "seed", 0, int)
    out = _pick(args, cfg, "out", None)
    if out is None:
        raise ValueError("generate needs --out")
    suite_cfg = _suite_from(cfg, seed)
    train_envs, test_envs = datagen.make_suite(suite_cfg)
    datagen.write_csv(out, train_envs + test_envs)
    n = sum(e.n for e in train_envs + test_envs)
    print(f"wrote {n} samples across {len(train_envs)} train / {len(test_envs)} test envs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    seed = _pick(args, cfg, "seed", 0, int)
    method = resolve_method(_pick(args, cfg, "method", "ood-tv-irm-l1"))
    out = _pick(args, cfg, "out", None)
    if out is None:
        raise ValueError("train needs --out for the checkpoint")
    trace_path = args.trace or f"{out}.trace.jsonl"

    envs = datagen.read_csv(args.data)
    train_envs = [e for e in envs if e.env_id < 2]
    if not train_envs:
        raise ValueError(f"{args.data}: no training environments (env ids 0 or 1)")
    trainer = replace(_trainer_from(cfg, args), objective=method.objective, flavor=method.flavor, seed=seed)
    bundle = harness.make_bundle(method, seed)
    trained, trace = optim.train(bundle, train_envs, trainer)
    nets.save_network(trained.phi, out)
    optim.write_trace(trace_path, trace)
    print(f"{method.name}: trained {trainer.total_epochs} epochs; checkpoint {out}, trace {trace_path}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _pick(args, cfg, "out", None)
    model = nets.load_network(args.checkpoint)
    envs = datagen.read_csv(args.data)
    test_envs = [e for e in envs if e.env_id >= 2] or envs
    mean, worst, per_env = harness.evaluate(model, test_envs)
    payload = {"mean": mean, "worst": worst, "per_env": per_env.tolist()}
    text = json.dumps(payload, indent=2)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_experiment(args) -> int:
    cfg = _load_config(args)
    seed = _pick(args, cfg, "seed", 0, int)
    out = _pick(args, cfg, "out", None)
    methods = [m.strip() for m in _pick(args, cfg, "method", "ood-tv-irm-l1").split(",")]
    repetitions = _pick(args, cfg, "repetitions", 10, int)
    tables = []
    for name in methods:
        exp = ExperimentConfig(
            method=name,
            suite=_suite_from(cfg, seed),
            trainer=_trainer_from(cfg, args),
            repetitions=repetitions,
            seed=seed,
        )
        table = harness.run_experiment(exp)
        tables.append(table)
        print(
            f"{table.method}: mean {table.mean:.4f} +/- {table.mean_std:.4f}, "
            f"worst {table.worst:.4f} +/- {table.worst_std:.4f} ({repetitions} reps)"
        )
    if out:
        harness.write_result_csv(out, tables)
        print(f"wrote {out}")
    return 0


def cmd_seminash(args) -> int:
    cfg = _load_config(args)
    seed = _pick(args, cfg, "seed", 0, int)
    out = _pick(args, cfg, "out", None)
    method = resolve_method(_pick(args, cfg, "method", "ood-tv-irm-l1"))
    if not method.adversarial:
        raise ValueError("seminash needs an adversarial (ood-tv-*) method")
    suite_cfg = replace(_suite_from(cfg, seed), n_train=args.n_train, n_test_per_env=100)
    trainer = replace(
        _trainer_from(cfg, args), objective=method.objective, flavor=method.flavor, seed=seed
    )
    train_envs, _ = datagen.make_suite(suite_cfg)
    bundle = harness.make_bundle(method, seed)
    trained, _ = optim.train(bundle, train_envs, trainer)

    data = datagen.pooled(train_envs)
    phi_star = trained.phi.params
    if method.objective == "g":
        psi_star = trained.lambda_net.params

        def g_eval(psi_vec, phi_vec):
            return objectives.lagrangian_g(
                trained.phi.with_params(phi_vec),
                trained.lambda_net.with_params(psi_vec),
                train_envs,
                method.flavor,
            ).total

    else:
        # unified dual variable: rho parameters followed by psi
        n_rho = trained.rho_net.params.size
        psi_star = np.concatenate([trained.rho_net.params, trained.lambda_net.params])

        def g_eval(dual_vec, phi_vec):
            return objectives.lagrangian_h(
                trained.phi.with_params(phi_vec),
                trained.lambda_net.with_params(dual_vec[n_rho:]),
                trained.rho_net.with_params(dual_vec[:n_rho]),
                data,
                flavor=method.flavor,
            ).total

    rng = np.random.default_rng(seed + 7)
    psi_grid = [psi_star] + [psi_star + args.radius * rng.standard_normal(psi_star.size) for _ in range(args.grid_size)]
    phi_grid = [phi_star] + [phi_star + args.radius * rng.standard_normal(phi_star.size) for _ in range(args.grid_size)]
    report = objectives.semi_nash_check(g_eval, phi_star, psi_star, phi_grid, psi_grid, args.tol)

    payload = {
        "method": method.name,
        "seed": seed,
        "item1_ok": report.item1_ok,
        "item2_ok": report.item2_ok,
        "worst_violation": report.worst_violation,
        "tol": report.tol,
        "psi_grid_points": len(psi_grid),
        "phi_grid_points": len(phi_grid),
    }
    text = json.dumps(payload, indent=2)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(sp, *, method=False, trainer=False):
    sp.add_argument("--config", help="key = value config file")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", default=None)
    if method:
        sp.add_argument("--method", default=None)
        sp.add_argument("--flavor", default=None, help="ignored if the method pins a flavor")
    if trainer:
        sp.add_argument("--anneal-epochs", dest="anneal_epochs", type=int, default=None)
        sp.add_argument("--total-epochs", dest="total_epochs", type=int, default=None)
        sp.add_argument("--optimizer", choices=("adam", "pd-norm"), default=None)
        sp.add_argument("--p", type=float, default=None)
        sp.add_argument("--lambda-init", dest="lambda_init", type=float, default=None)
        sp.add_argument("--lr", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="oodtv", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("generate", help="write a dataset suite CSV")
    _add_common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="single training run")
    _add_common(sp, method=True, trainer=True)
    sp.add_argument("--data", required=True, help="dataset CSV from 'generate'")
    sp.add_argument("--trace", default=None, help="trace JSONL path (default <out>.trace.jsonl)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _add_common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("experiment", help="repeated runs, aggregated results CSV")
    _add_common(sp, method=True, trainer=True)
    sp.add_argument("--repetitions", type=int, default=None)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("seminash", help="grid equilibrium diagnostic")
    _add_common(sp, method=True, trainer=True)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.add_argument("--radius", type=float, default=0.5)
    sp.add_argument("--grid-size", dest="grid_size", type=int, default=8)
    sp.add_argument("--n-train", dest="n_train", type=int, default=400)
    sp.set_defaults(anneal_epochs=150, total_epochs=200)
    sp.set_defaults(func=cmd_seminash)

    return ap


def cli(argv=None) -> int:
    """Parse argv and run; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own usage message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError, optim.TrainingDivergedError) as exc:
        print(f"oodtv: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
