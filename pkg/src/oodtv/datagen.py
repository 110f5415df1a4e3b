"""Synthetic temporally-heterogeneous environments with a spurious shift.

Each sample has a scalar invariant base value and a scalar spurious base
value. The binary label follows the sign of the invariant base with
probability p_v (constant across environments); the spurious base is
drawn around +/- the label with probability p_s, which varies across
environments. The bases are expanded to 5 invariant and 10 spurious
columns by adding independent standard Gaussian noise per column, so x
is n x 15: columns 1-5 invariant, 6-15 spurious. The time stamp t in
[0, 1] is the auxiliary variable available for environment inference.

Training suites hold two environments split at t = 0.5 with spurious
rates (p_s_minus, p_s_plus); test suites hold four environments with
p_s in {0.999, 0.8, 0.2, 0.001} and the same p_v.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

N_INVARIANT = 5
N_SPURIOUS = 10
N_FEATURES = N_INVARIANT + N_SPURIOUS
TEST_P_S = (0.999, 0.8, 0.2, 0.001)

CSV_HEADER = [f"x{i}" for i in range(1, N_FEATURES + 1)] + ["y", "t", "env"]


@dataclass
class EnvBatch:
    """One environment's samples.

    base_v/base_s are the scalar bases behind the noisy feature blocks;
    they are diagnostic only and never exported.
    """

    x: np.ndarray  # (n, 15)
    y: np.ndarray  # (n,) in {0.0, 1.0}
    t: np.ndarray  # (n,) in [0, 1]
    env_id: int
    base_v: np.ndarray | None = field(default=None, repr=False)
    base_s: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[1] != N_FEATURES:
            raise ValueError(f"x must be (n, {N_FEATURES}), got {self.x.shape}")
        if not np.isin(self.y, (0.0, 1.0)).all():
            raise ValueError("labels must be 0/1")
        if self.t.min() < 0.0 or self.t.max() > 1.0:
            raise ValueError("t must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class SuiteConfig:
    p_v: float = 0.8
    p_s_minus: float = 0.999
    p_s_plus: float = 0.9
    n_train: int = 2000
    n_test_per_env: int = 5000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.p_v <= 1.0:
            raise ValueError(f"p_v must be in (0, 1], got {self.p_v}")
        for name in ("p_s_minus", "p_s_plus"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.n_train <= 0 or self.n_test_per_env <= 0:
            raise ValueError("sample counts must be positive")


def generate_environment(
    n: int, p_v: float, p_s: float, t_range=(0.0, 1.0), seed: int = 0, env_id: int = 0
) -> EnvBatch:
    """Draw one environment with spurious rate p_s and t uniform in t_range."""
    if not 0.0 < p_v <= 1.0:
        raise ValueError(f"p_v must be in (0, 1], got {p_v}")
    if not 0.0 <= p_s <= 1.0:
        raise ValueError(f"p_s must be in [0, 1], got {p_s}")
    a, b = t_range
    if not 0.0 <= a <= b <= 1.0:
        raise ValueError(f"t_range must satisfy 0 <= a <= b <= 1, got {t_range}")
    rng = np.random.default_rng(seed)

    center = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    base_v = center + rng.standard_normal(n)
    sign_v = np.where(base_v >= 0.0, 1.0, -1.0)
    y_pm = np.where(rng.random(n) < p_v, sign_v, -sign_v)
    mu_s = np.where(rng.random(n) < p_s, y_pm, -y_pm)
    base_s = mu_s + rng.standard_normal(n)

    xv = base_v[:, None] + rng.standard_normal((n, N_INVARIANT))
    xs = base_s[:, None] + rng.standard_normal((n, N_SPURIOUS))
    t = rng.uniform(a, b, n)
    return EnvBatch(
        x=np.hstack([xv, xs]),
        y=(y_pm + 1.0) / 2.0,
        t=t,
        env_id=env_id,
        base_v=base_v,
        base_s=base_s,
    )


def make_suite(cfg: SuiteConfig):
    """Two training environments and the four fixed-shift test environments.

    Per-environment RNG streams are spawned from SeedSequence(cfg.seed),
    so suites are bit-identical under the same seed.
    """
    children = np.random.SeedSequence(cfg.seed).spawn(2 + len(TEST_P_S))
    env_seeds = [int(c.generate_state(1)[0]) for c in children]
    train = [
        generate_environment(
            cfg.n_train, cfg.p_v, cfg.p_s_minus, (0.0, 0.5), env_seeds[0], env_id=0
        ),
        generate_environment(
            cfg.n_train, cfg.p_v, cfg.p_s_plus, (0.5, 1.0), env_seeds[1], env_id=1
        ),
    ]
    test = [
        generate_environment(
            cfg.n_test_per_env, cfg.p_v, p_s, (0.0, 1.0), env_seeds[2 + i], env_id=2 + i
        )
        for i, p_s in enumerate(TEST_P_S)
    ]
    return train, test


def pooled(envs) -> EnvBatch:
    """Concatenate environments into one batch (env_id -1)."""
    return EnvBatch(
        x=np.vstack([e.x for e in envs]),
        y=np.concatenate([e.y for e in envs]),
        t=np.concatenate([e.t for e in envs]),
        env_id=-1,
        base_v=None if any(e.base_v is None for e in envs) else np.concatenate([e.base_v for e in envs]),
        base_s=None if any(e.base_s is None for e in envs) else np.concatenate([e.base_s for e in envs]),
    )


def write_csv(path, envs) -> None:
    """Dataset CSV: header x1..x15,y,t,env; full float precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for env in envs:
            for i in range(env.n):
                row = [f"{v:.17g}" for v in env.x[i]]
                row.append(f"{env.y[i]:.17g}")
                row.append(f"{env.t[i]:.17g}")
                row.append(str(env.env_id))
                writer.writerow(row)


def read_csv(path) -> list[EnvBatch]:
    """Read a dataset CSV back into per-environment batches (sorted by env id)."""
    by_env: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected dataset header {header!r}")
        for row in reader:
            env_id = int(row[-1])
            by_env.setdefault(env_id, []).append([float(v) for v in row[:-1]])
    batches = []
    for env_id in sorted(by_env):
        arr = np.asarray(by_env[env_id], dtype=np.float64)
        batches.append(
            EnvBatch(x=arr[:, :N_FEATURES], y=arr[:, N_FEATURES], t=arr[:, N_FEATURES + 1], env_id=env_id)
        )
    return batches
