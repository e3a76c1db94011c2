"""Multi-environment ODE systems and the on-disk dataset format.

Every system has four environments; each environment is the invariant field
plus one structurally different environment term. Test samples also carry the
invariant-only trajectory started from the same initial state.

Dataset directory::

    meta.txt     key=value lines (see META_KEYS)
    train.ndrec  one sample per line
    test.ndrec   one sample per line

Sample line::

    <system> <env_index> name=value ... | <T> <d> | <X row-major> [| <X^c row-major>]
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dyn import IntegrationDiverged, TimeGrid, Trajectory, integrate

FORMAT = ".17g"
MAX_RETRIES = 100
LOG_CLAMP = 1e-8


class SchemaError(ValueError):
    """Malformed dataset file; the message names the offending record."""


class SystemId(str, enum.Enum):
    PENDULUM = "pendulum"
    LOTKA_VOLTERRA = "lotka_volterra"
    SIR = "sir"


ENV_NAMES = {
    SystemId.PENDULUM: ("Damped", "Powered", "Spring", "Air"),
    SystemId.LOTKA_VOLTERRA: ("Save", "Fight", "Resource", "Omnivore"),
    SystemId.SIR: ("Origin", "Enlarge", "Loop", "Negative"),
}

STATE_NAMES = {
    SystemId.PENDULUM: ("theta", "omega"),
    SystemId.LOTKA_VOLTERRA: ("p", "q"),
    SystemId.SIR: ("S", "I", "R"),
}

# (low, high) for every ODE parameter, uniform draws.
PARAM_RANGES = {
    SystemId.PENDULUM: {"alpha": (1.0, 2.0), "rho": (0.2, 0.4)},
    SystemId.LOTKA_VOLTERRA: {
        "alpha": (1.2, 2.4), "alpha_p": (1.2, 2.4),
        "beta": (6e-2, 1.2e-1), "beta_p": (6e-2, 1.2e-1),
        "gamma": (0.48, 0.96), "gamma_p": (0.48, 0.96),
        "delta": (4.8e-4, 9.6e-4), "delta_p": (4.8e-4, 9.6e-4),
    },
    SystemId.SIR: {"beta": (4.0, 8.0), "gamma": (0.4, 0.8)},
}

# Parameters shared by every environment (the rest are environment-specific).
COMMON_PARAMS = {
    SystemId.PENDULUM: ("alpha",),
    SystemId.LOTKA_VOLTERRA: ("alpha", "beta", "gamma", "delta"),
    SystemId.SIR: ("beta",),
}

INIT_RANGES = {
    SystemId.PENDULUM: ((0.0, math.pi / 2), (-1.0, 0.0)),
    SystemId.LOTKA_VOLTERRA: ((1000.0, 2000.0), (10.0, 20.0)),
    SystemId.SIR: ((9.0, 10.0), (1.0, 5.0), (0.0, 0.0)),
}

N_ENVS = 4


def system_id(name) -> SystemId:
    if isinstance(name, SystemId):
        return name
    try:
        return SystemId(str(name).lower())
    except ValueError:
        raise ValueError(f"unknown system {name!r}; expected one of {[s.value for s in SystemId]}") from None


def state_dim(system) -> int:
    return len(STATE_NAMES[system_id(system)])


def default_tc(system, T: int, tc_factor: float | None = None) -> int:
    system = system_id(system)
    if tc_factor is None:
        tc_factor = 3 if system is SystemId.PENDULUM else 2
    return int(math.floor(T / tc_factor))


@dataclass
class ParamSet:
    values: dict[str, float]
    x0: np.ndarray

    def __getitem__(self, key):
        return self.values[key]


def sample_params(system, rng: np.random.Generator) -> ParamSet:
    system = system_id(system)
    values = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in PARAM_RANGES[system].items()}
    x0 = np.array([rng.uniform(lo, hi) if hi > lo else lo for lo, hi in INIT_RANGES[system]])
    return ParamSet(values, x0)


# Vector fields take states with the component axis last, so the same code
# serves single states (d,) and batches (B, d) with per-sample parameter arrays.

def _pendulum(env, p, invariant=False):
    alpha, rho = p["alpha"], p.get("rho", 0.0)

    def f(x):
        theta, omega = x[..., 0], x[..., 1]
        dw = -alpha**2 * np.sin(theta)
        if not invariant:
            if env == 0:
                dw = dw - rho * omega
            elif env == 1:
                dw = dw + rho * np.sign(omega)
            elif env == 2:
                dw = dw - rho * theta
            else:
                dw = dw - rho * np.abs(omega) * omega
        return np.stack([omega, dw], axis=-1)
    return f


def _lotka_volterra(env, p, invariant=False):
    a, b, g, dl = p["alpha"], p["beta"], p["gamma"], p["delta"]
    ap, bp, gp, dp = (p.get(k, 0.0) for k in ("alpha_p", "beta_p", "gamma_p", "delta_p"))

    def f(x):
        P, Q = x[..., 0], x[..., 1]
        dP = a * P - b * P * Q
        dQ = dl * P * Q - g * Q
        if not invariant:
            if env == 0:
                dP = dP - bp * P * Q * 10.0 * np.exp(-Q / 10.0)
            elif env == 1:
                dQ = dQ + dp * P * Q * 10.0 * np.exp(-Q / 10.0)
            elif env == 2:
                dP = dP - ap * P**2 / 2000.0
            else:
                dQ = dQ + 20.0 * gp * (1.0 - Q / 100.0)
        return np.stack([dP, dQ], axis=-1)
    return f


def _sir(env, p, invariant=False):
    beta, gamma = p["beta"], p.get("gamma", 0.0)

    def f(x):
        S, I, R = x[..., 0], x[..., 1], x[..., 2]
        flow = beta * S * I / (S + I + R)
        dS, dI = -flow, flow
        dR = np.zeros_like(flow)
        if not invariant:
            if env == 0:
                dI = dI - gamma * I
                dR = gamma * I
            elif env == 1:
                dS = dS + gamma * I
                dI = dI - gamma * I
                dR = gamma * I
            elif env == 2:
                dS = dS + gamma * I + gamma * R
                dI = dI - 2.0 * gamma * I
                dR = gamma * I - gamma * R
            else:
                log_i = np.log(np.maximum(I, LOG_CLAMP))
                dI = dI + gamma * log_i
                dR = -gamma * log_i
        return np.stack([dS, dI, dR], axis=-1)
    return f


_FIELDS = {SystemId.PENDULUM: _pendulum, SystemId.LOTKA_VOLTERRA: _lotka_volterra, SystemId.SIR: _sir}


def _values(params) -> dict:
    return params.values if isinstance(params, ParamSet) else dict(params)


def vector_field(system, env: int, params) -> Callable[[np.ndarray], np.ndarray]:
    system = system_id(system)
    if not 0 <= int(env) < N_ENVS:
        raise ValueError(f"environment index {env} out of range for {system.value}")
    return _FIELDS[system](int(env), _values(params))


def invariant_vector_field(system, params) -> Callable[[np.ndarray], np.ndarray]:
    system = system_id(system)
    common = {k: v for k, v in _values(params).items() if k in COMMON_PARAMS[system]}
    return _FIELDS[system](-1, common, invariant=True)


@dataclass
class Sample:
    x: Trajectory
    env: int
    params: ParamSet
    x_inv: Trajectory | None = None

    def __post_init__(self):
        if self.x_inv is not None:
            if self.x_inv.states.shape != self.x.states.shape:
                raise ValueError("x_inv shape differs from x")
            if not np.array_equal(self.x_inv.states[:, 0], self.x.states[:, 0]):
                raise ValueError("x_inv must share the initial state of x")


@dataclass
class DatasetMeta:
    system: SystemId
    seed: int
    n_train: int
    n_test: int
    T: int
    dt: float
    T_c: int
    norm_mean: np.ndarray
    norm_std: np.ndarray
    envs: tuple[int, ...] = (0, 1, 2, 3)
    noise_std: float = 0.0

    @property
    def d(self) -> int:
        return len(self.norm_mean)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(0.0, self.dt, self.T)

    @property
    def n_envs(self) -> int:
        return N_ENVS


META_KEYS = ("system", "seed", "n_train", "n_test", "T", "dt", "T_c", "envs", "noise_std",
             "norm_mean", "norm_std")


@dataclass
class Dataset:
    meta: DatasetMeta
    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)


_SPLIT_CODE = {"train": 0, "test": 1}


def _substream(seed: int, split: str, env: int, index: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_CODE[split], env, index, attempt]))


def _make_sample(system, env, split, seed, index, grid, noise_std):
    for attempt in range(MAX_RETRIES):
        rng = _substream(seed, split, env, index, attempt)
        params = sample_params(system, rng)
        try:
            x = integrate(vector_field(system, env, params), params.x0, grid)
            x_inv = None
            if split == "test":
                x_inv = integrate(invariant_vector_field(system, params), params.x0, grid)
        except IntegrationDiverged:
            continue
        if noise_std > 0:
            noisy = x.states.copy()
            noisy[:, 1:] += noise_std * rng.standard_normal((x.d, grid.T - 1))
            x = Trajectory(noisy, grid)
        return Sample(x, env, params, x_inv)
    raise IntegrationDiverged(-1, f"{system.value}/{ENV_NAMES[system][env]} sample {index} "
                                  f"diverged {MAX_RETRIES} times")


def generate_dataset(system, seed: int = 0, *, n_train_per_env: int = 200, n_test_per_env: int = 50,
                     T: int = 100, dt: float = 0.1, T_c: int | None = None, tc_factor: float | None = None,
                     envs: Sequence[int] | None = None, noise_std: float = 0.0) -> Dataset:
    system = system_id(system)
    envs = tuple(sorted(set(int(e) for e in envs))) if envs is not None else tuple(range(N_ENVS))
    grid = TimeGrid(0.0, dt, T)
    if T_c is None:
        T_c = default_tc(system, T, tc_factor)
    if not 1 <= T_c < T:
        raise ValueError(f"T_c={T_c} must satisfy 1 <= T_c < T={T}")

    train = [_make_sample(system, e, "train", seed, i, grid, noise_std)
             for e in envs for i in range(n_train_per_env)]
    test = [_make_sample(system, e, "test", seed, i, grid, noise_std)
            for e in envs for i in range(n_test_per_env)]

    all_states = np.concatenate([s.x.states for s in train], axis=1)
    meta = DatasetMeta(system=system, seed=int(seed), n_train=len(train), n_test=len(test), T=T, dt=dt,
                       T_c=T_c, norm_mean=all_states.mean(axis=1), norm_std=all_states.std(axis=1),
                       envs=envs, noise_std=noise_std)
    if np.any(meta.norm_std <= 0):
        raise ValueError("degenerate training set: zero std in some state dimension")
    return Dataset(meta, train, test)


def _fmt(v) -> str:
    return format(float(v), FORMAT)


def _fmt_vec(v) -> str:
    return ",".join(_fmt(x) for x in v)


def format_sample(system: SystemId, s: Sample) -> str:
    parts = [f"{system.value} {s.env}"] + [f"{k}={_fmt(v)}" for k, v in s.params.values.items()]
    d, T = s.x.states.shape
    chunks = [" ".join(parts), f"{T} {d}", " ".join(_fmt(v) for v in s.x.states.ravel())]
    if s.x_inv is not None:
        chunks.append(" ".join(_fmt(v) for v in s.x_inv.states.ravel()))
    return " | ".join(chunks)


def format_meta(meta: DatasetMeta) -> str:
    vals = {
        "system": meta.system.value, "seed": str(meta.seed), "n_train": str(meta.n_train),
        "n_test": str(meta.n_test), "T": str(meta.T), "dt": _fmt(meta.dt), "T_c": str(meta.T_c),
        "envs": ",".join(str(e) for e in meta.envs), "noise_std": _fmt(meta.noise_std),
        "norm_mean": _fmt_vec(meta.norm_mean), "norm_std": _fmt_vec(meta.norm_std),
    }
    return "".join(f"{k}={vals[k]}\n" for k in META_KEYS)


def save_dataset(ds: Dataset, path) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "meta.txt"), "w") as fh:
        fh.write(format_meta(ds.meta))
    for split in ("train", "test"):
        with open(os.path.join(path, f"{split}.ndrec"), "w") as fh:
            for s in getattr(ds, split):
                fh.write(format_sample(ds.meta.system, s) + "\n")


def parse_meta(text: str, where: str = "meta.txt") -> DatasetMeta:
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise SchemaError(f"{where}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    missing = [k for k in META_KEYS if k not in kv]
    if missing:
        raise SchemaError(f"{where}: missing keys {missing}")
    try:
        meta = DatasetMeta(
            system=system_id(kv["system"]), seed=int(kv["seed"]), n_train=int(kv["n_train"]),
            n_test=int(kv["n_test"]), T=int(kv["T"]), dt=float(kv["dt"]), T_c=int(kv["T_c"]),
            norm_mean=np.array([float(x) for x in kv["norm_mean"].split(",")]),
            norm_std=np.array([float(x) for x in kv["norm_std"].split(",")]),
            envs=tuple(int(e) for e in kv["envs"].split(",") if e),
            noise_std=float(kv["noise_std"]),
        )
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc
    if len(meta.norm_std) != state_dim(meta.system) or np.any(meta.norm_std <= 0):
        raise SchemaError(f"{where}: norm_std must have {state_dim(meta.system)} positive entries")
    return meta


def parse_sample(line: str, meta: DatasetMeta, expect_inv: bool, where: str) -> Sample:
    chunks = [c.strip() for c in line.split("|")]
    if len(chunks) != (4 if expect_inv else 3):
        raise SchemaError(f"{where}: expected {4 if expect_inv else 3} '|'-separated fields, got {len(chunks)}")
    head = chunks[0].split()
    try:
        if system_id(head[0]) is not meta.system:
            raise SchemaError(f"{where}: system {head[0]!r} does not match meta {meta.system.value!r}")
        env = int(head[1])
        values = {}
        for tok in head[2:]:
            k, v = tok.split("=", 1)
            values[k] = float(v)
        T, d = (int(x) for x in chunks[1].split())
        x = np.array([float(v) for v in chunks[2].split()])
        x_inv = np.array([float(v) for v in chunks[3].split()]) if expect_inv else None
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc
    if T != meta.T or d != meta.d or x.size != T * d or (x_inv is not None and x_inv.size != T * d):
        raise SchemaError(f"{where}: state block size does not match T={meta.T}, d={meta.d}")
    if set(values) != set(PARAM_RANGES[meta.system]):
        raise SchemaError(f"{where}: parameter names {sorted(values)} do not match {meta.system.value}")
    grid = meta.grid
    X = Trajectory(x.reshape(d, T), grid)
    Xc = Trajectory(x_inv.reshape(d, T), grid) if x_inv is not None else None
    return Sample(X, env, ParamSet(values, X.states[:, 0].copy()), Xc)


def load_dataset(path) -> Dataset:
    with open(os.path.join(path, "meta.txt")) as fh:
        meta = parse_meta(fh.read())
    out = Dataset(meta)
    for split, expect_inv, n in (("train", False, meta.n_train), ("test", True, meta.n_test)):
        fname = os.path.join(path, f"{split}.ndrec")
        with open(fname) as fh:
            lines = [ln for ln in fh.read().split("\n") if ln.strip()]
        if len(lines) != n:
            raise SchemaError(f"{split}.ndrec: expected {n} records, found {len(lines)}")
        samples = [parse_sample(ln, meta, expect_inv, f"{split}.ndrec record {i}") for i, ln in enumerate(lines)]
        setattr(out, split, samples)
    return out
