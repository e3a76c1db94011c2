"""Training: derivative-fitting losses, adversarial disentanglement, IRM/VREx
baselines and the optimization loop.

Each DIF iteration makes two updates:

A. encoder, heads and decoder on ``L_full + lam_c*L_inv + lam_adv*L_adv``
   with the discriminator frozen;
B. discriminator, encoder and environment head on
   ``lam_dis*(L_disc_c + L_disc_e)`` with ``z_c`` detached.

The two updates keep separate Adam moments, so a zero-weight update B leaves
every parameter untouched.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import grad as G
from .dyn import numerical_derivative
from .grad import Array
from .hyper import DerivNetSpec, HyperExecutor
from .nets import DIFModel, DiscSpec, EncoderSpec, HeadSpec, ModelSpec, mlp_forward, save_checkpoint
from .systems import Dataset, default_tc, load_dataset

log = logging.getLogger(__name__)

METHODS = ("dif", "erm", "irm", "vrex")
LR_DECAYS = ("cosine", "none")


class TrainingDiverged(RuntimeError):
    def __init__(self, report):
        self.report = report
        super().__init__(f"non-finite loss at iteration {report.iteration if report else '?'}")


@dataclass(frozen=True)
class LossWeights:
    lam_c: float = 0.0
    lam_dis: float = 0.0
    lam_adv_prime: float = 0.0
    lam_irm: float = 0.0
    lam_vrex: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")

    @property
    def lam_adv(self) -> float:
        return self.lam_c * self.lam_adv_prime


# Desk-scale defaults per method; sweeps replace them with sampled values.
DEFAULT_WEIGHTS = {
    "dif": LossWeights(lam_c=1e-2, lam_dis=0.5, lam_adv_prime=1e2),
    "erm": LossWeights(),
    "irm": LossWeights(lam_irm=1.0),
    "vrex": LossWeights(lam_vrex=10.0),
}


@dataclass
class TrainConfig:
    dataset: str = ""
    method: str = "dif"
    iters: int = 5000
    batch: int = 32
    lr: float = 1e-3
    lr_decay: str = "cosine"
    lr_final_frac: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    lam_c: float | None = None
    lam_dis: float | None = None
    lam_adv_prime: float | None = None
    lam_irm: float | None = None
    lam_vrex: float | None = None
    disc_steps: int = 1
    clip_norm: float = 0.0
    envs: str = ""
    tc_factor: float = 0.0
    hypernet_mode: str = "reference_based"
    log_every: int = 50
    ckpt_every: int = 0
    # architecture
    enc_layers: int = 2
    enc_heads: int = 4
    enc_dim: int = 64
    enc_ffn: int = 128
    embed_dim: int = 32
    head_hidden: int = 64
    decoder_hidden: int = 64
    deriv_depth: int = 4
    deriv_width: int = 16
    disc_depth: int = 3
    disc_width: int = 64

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lr_decay not in LR_DECAYS:
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}; expected one of {LR_DECAYS}")

    def lr_at(self, it: int) -> float:
        """Learning rate for iteration ``it`` (0-based)."""
        if self.lr_decay == "none" or self.iters <= 1:
            return self.lr
        frac = min(it, self.iters - 1) / (self.iters - 1)
        f = self.lr_final_frac
        return self.lr * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * frac)))

    def weights(self) -> LossWeights:
        base = DEFAULT_WEIGHTS[self.method]
        kw = {f.name: getattr(self, f.name) for f in dataclasses.fields(LossWeights)
              if getattr(self, f.name) is not None}
        w = dataclasses.replace(base, **kw)
        if self.method == "erm":
            return LossWeights()
        if self.method in ("irm", "vrex"):
            return LossWeights(lam_irm=w.lam_irm if self.method == "irm" else 0.0,
                               lam_vrex=w.lam_vrex if self.method == "vrex" else 0.0)
        return dataclasses.replace(w, lam_irm=0.0, lam_vrex=0.0)

    def model_spec(self, d: int, n_envs: int = 4) -> ModelSpec:
        return ModelSpec(encoder=EncoderSpec(self.enc_layers, self.enc_heads, self.enc_dim, self.enc_ffn),
                         head=HeadSpec(self.embed_dim, self.head_hidden),
                         deriv=DerivNetSpec(d, self.deriv_depth, self.deriv_width),
                         disc=DiscSpec(self.disc_depth, self.disc_width),
                         decoder_hidden=self.decoder_hidden, n_envs=n_envs)

    def env_list(self) -> tuple[int, ...] | None:
        return tuple(int(e) for e in self.envs.split(",")) if self.envs else None


def _convert(f: dataclasses.Field, raw: str):
    typ = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if raw.lower() in ("none", "") and "None" in typ:
        return None
    if typ.startswith("int"):
        return int(raw)
    if typ.startswith("float"):
        return float(raw)
    return raw


def config_fields() -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key=value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    fields = config_fields()
    kw = dataclasses.asdict(base) if base else {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in fields:
            raise ValueError(f"config line {lineno}: unknown key {k!r}")
        kw[k] = _convert(fields[k], v)
    return TrainConfig(**kw)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k}={'' if v is None else v}\n" for k, v in dataclasses.asdict(cfg).items())


@dataclass
class StepReport:
    iteration: int
    loss_main: float
    loss_inv: float
    loss_disc_c: float
    loss_disc_e: float
    loss_adv: float
    disc_acc_e: float
    penalty: float
    env_risks: dict[int, float] = field(default_factory=dict)

    def finite(self) -> bool:
        """All computed losses are finite. Discriminator fields are NaN for methods
        without the adversarial game and are then skipped."""
        vals = [self.loss_main, self.loss_inv, self.penalty, *self.env_risks.values()]
        adv = [self.loss_disc_c, self.loss_disc_e, self.loss_adv, self.disc_acc_e]
        if not all(math.isnan(v) for v in adv):
            vals += adv
        return all(math.isfinite(v) for v in vals)

    def format(self) -> str:
        parts = [f"iter={self.iteration}"]
        for k in ("loss_main", "loss_inv", "loss_disc_c", "loss_disc_e", "loss_adv", "disc_acc_e", "penalty"):
            parts.append(f"{k}={getattr(self, k)!r}")
        parts += [f"risk_env{e}={r!r}" for e, r in sorted(self.env_risks.items())]
        return " ".join(parts)


# penalties ------------------------------------------------------------------------

def vrex_penalty(risks: Sequence) -> Array:
    """Population variance of per-environment mean risks."""
    if len(risks) < 2:
        raise ValueError("vrex_penalty needs at least two environments")
    r = G.concat([G.reshape(G.as_array(x), (1,)) for x in risks])
    return G.variance(r)


def irm_risk_grad(pred: Array, target) -> Array:
    """d/dw of mean_i sum ||target - w*pred||^2 at w = 1, for one environment."""
    pred = G.as_array(pred)
    target = G.as_array(target)
    n = pred.shape[0]
    return G.scale(G.sum_(G.mul(pred, G.sub(pred, target))), 2.0 / n)


def irm_penalty(per_env: Sequence[tuple]) -> Array:
    """Sum over environments of the squared risk gradient w.r.t. a scalar output multiplier.

    ``per_env``: (pred, target) pairs, arrays with the sample axis first.
    """
    total = None
    for pred, target in per_env:
        g = irm_risk_grad(pred, target)
        sq = G.mul(g, g)
        total = sq if total is None else G.add(total, sq)
    return total


def sample_hyperparams(method: str, rng: np.random.Generator, log_uniform: bool = True):
    """Random search draw: ``(LossWeights, lr)``."""
    def draw(lo, hi):
        if log_uniform:
            return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
        return float(rng.uniform(lo, hi))

    method = method.lower()
    lr = float(rng.uniform(1e-4, 1e-3))
    if method == "dif":
        w = LossWeights(lam_c=draw(1e-7, 1e-4), lam_dis=draw(1e-1, 1.0), lam_adv_prime=draw(1e2, 1e6))
    elif method == "irm":
        w = LossWeights(lam_irm=draw(1e-2, 1e2))
    elif method == "vrex":
        w = LossWeights(lam_vrex=draw(1e-1, 1e3))
    elif method == "erm":
        w = LossWeights()
    else:
        raise ValueError(f"unknown method {method!r}")
    return w, lr


# optimizer ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        gs = [grads.get(p) for p in self.params]
        if self.clip_norm > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in gs if g is not None))
            if norm > self.clip_norm:
                gs = [None if g is None else g * (self.clip_norm / norm) for g in gs]
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            if g is None:
                g = 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g if not np.isscalar(g) else 0.0)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# data ---------------------------------------------------------------------------------

@dataclass
class TrainData:
    """Normalized arrays for training, sample axis first, time before state."""

    xn: np.ndarray        # (N, T, d) normalized states
    targets: np.ndarray   # (N, T, d) derivatives divided by norm_std
    env: np.ndarray       # (N,)
    T_c: int


def derivative_targets(samples, meta) -> np.ndarray:
    """Finite-difference derivatives of every sample, per-dimension divided by ``norm_std``. (N, d, T)"""
    X = np.stack([s.x.states for s in samples])
    return numerical_derivative(X, meta.dt) / meta.norm_std[None, :, None]


def normalize_states(X: np.ndarray, meta) -> np.ndarray:
    """(N, d, T) raw states -> (N, T, d) normalized."""
    return ((X - meta.norm_mean[None, :, None]) / meta.norm_std[None, :, None]).transpose(0, 2, 1)


def prepare(ds: Dataset, split: str = "train", envs=None, T_c: int | None = None) -> TrainData:
    samples = getattr(ds, split)
    if envs is not None:
        samples = [s for s in samples if s.env in envs]
    if not samples:
        raise ValueError(f"no {split} samples to train on")
    X = np.stack([s.x.states for s in samples])
    return TrainData(xn=np.ascontiguousarray(normalize_states(X, ds.meta)),
                     targets=np.ascontiguousarray(derivative_targets(samples, ds.meta).transpose(0, 2, 1)),
                     env=np.array([s.env for s in samples]), T_c=T_c or ds.meta.T_c)


class BatchSampler:
    """Reshuffles every epoch; drops the trailing partial batch."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        if batch > n:
            raise ValueError(f"batch {batch} larger than dataset {n}")
        self.n, self.batch, self.rng = n, batch, rng
        self._perm = np.empty(0, dtype=int)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch > len(self._perm):
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return idx


# losses ---------------------------------------------------------------------------------

def _sq_err_per_sample(pred: Array, target) -> Array:
    diff = G.sub(pred, G.as_array(target))
    return G.sum_(G.mul(diff, diff), axis=(1, 2))


def main_losses(model: DIFModel, executor: HyperExecutor, xp, xn, targets):
    """(L_full, L_inv, per-sample full errors, f_hat outputs, z_c, z_e)."""
    F, Fc, z_c, z_e = model.function_vectors(xp)
    B = xn.shape[0]
    states = np.concatenate([xn, xn], axis=0)
    out = executor(G.concat([F, Fc], axis=0), Array(states))
    f_full = G.slice_(out, slice(0, B))
    f_inv = G.slice_(out, slice(B, 2 * B))
    per_full = _sq_err_per_sample(f_full, targets)
    L_full = G.mean(per_full)
    L_inv = G.mean(_sq_err_per_sample(f_inv, targets))
    return L_full, L_inv, per_full, f_full, z_c, z_e


def frozen(params: dict) -> dict:
    return {k: G.detach(v) for k, v in params.items()}


def discriminate_frozen(model: DIFModel, z) -> Array:
    return mlp_forward(frozen(model.groups["disc"]), "mlp", z, model.spec.disc.depth)


def adv_loss(model: DIFModel, z_c, labels) -> Array:
    """Negative discriminator cross-entropy on z_c; the discriminator is frozen."""
    return G.neg(G.cross_entropy(discriminate_frozen(model, z_c), labels))


def disc_losses(model: DIFModel, z_c, z_e, labels):
    """(L_disc_c, L_disc_e, logits_e). z_c is detached: L_disc_c only trains the discriminator."""
    L_c = G.cross_entropy(model.discriminate(G.detach(z_c)), labels)
    logits_e = model.discriminate(z_e)
    L_e = G.cross_entropy(logits_e, labels)
    return L_c, L_e, logits_e


def _grads(loss: Array, params) -> dict:
    G.zero_grad(params)
    out = G.backward(loss)
    G.zero_grad(params)
    return out


def _env_groups(env: np.ndarray):
    return [(int(e), np.flatnonzero(env == e)) for e in np.unique(env)]


# trainer --------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: DIFModel
    reports: list[StepReport]
    config: TrainConfig
    diverged: bool = False


class Trainer:
    def __init__(self, cfg: TrainConfig, ds: Dataset):
        self.cfg = cfg
        self.ds = ds
        self.w = cfg.weights()
        T_c = ds.meta.T_c
        if cfg.tc_factor:
            T_c = default_tc(ds.meta.system, ds.meta.T, cfg.tc_factor)
        self.data = prepare(ds, "train", cfg.env_list(), T_c)
        root = np.random.SeedSequence(cfg.seed)
        init_ss, batch_ss = root.spawn(2)
        self.model = DIFModel(cfg.model_spec(ds.meta.d, ds.meta.n_envs), ds.meta.d,
                              rng=np.random.default_rng(init_ss))
        self.executor = HyperExecutor(self.model.layout, cfg.hypernet_mode)
        self.sampler = BatchSampler(len(self.data.env), cfg.batch, np.random.default_rng(batch_ss))
        opt = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps, clip_norm=cfg.clip_norm)
        self.opt_main = Adam(self.model.theta, **opt)
        self.opt_disc = Adam(self.model.params("disc", "enc", "env"), **opt)
        self.iteration = 0
        self.adversarial = cfg.method == "dif"

    def step(self) -> StepReport:
        cfg, w, m = self.cfg, self.w, self.model
        self.opt_main.lr = self.opt_disc.lr = cfg.lr_at(self.iteration)
        idx = self.sampler.next()
        d = self.data
        xn, tg, env = d.xn[idx], d.targets[idx], d.env[idx]
        xp = xn[:, :d.T_c]

        L_full, L_inv, per_full, f_full, z_c, z_e = main_losses(m, self.executor, xp, xn, tg)
        loss = L_full
        L_adv = None
        if self.adversarial:
            L_adv = adv_loss(m, z_c, env)
            loss = G.add(G.add(loss, G.scale(L_inv, w.lam_c)), G.scale(L_adv, w.lam_adv))
        groups = _env_groups(env)
        penalty = None
        if w.lam_irm > 0:
            penalty = irm_penalty([(G.take(f_full, ix), tg[ix]) for _, ix in groups])
            loss = G.add(loss, G.scale(penalty, w.lam_irm))
        elif w.lam_vrex > 0 and len(groups) >= 2:
            penalty = vrex_penalty([G.mean(G.take(per_full, ix)) for _, ix in groups])
            loss = G.add(loss, G.scale(penalty, w.lam_vrex))
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(self._last)

        Lc = Le = acc = float("nan")
        if self.adversarial:
            # Both gradients are taken at the same parameters, then A and B are applied.
            L_dc, L_de, logits_e = disc_losses(m, z_c, z_e, env)
            grads_a = _grads(loss, self.opt_main.params)
            grads_b = _grads(G.scale(G.add(L_dc, L_de), w.lam_dis), self.opt_disc.params)
            self.opt_main.step(grads_a)
            self.opt_disc.step(grads_b)
            for _ in range(cfg.disc_steps - 1):
                z_c2, z_e2 = m.heads(m.encode(xp))
                L_dc, L_de, logits_e = disc_losses(m, z_c2, z_e2, env)
                self.opt_disc.step(_grads(G.scale(G.add(L_dc, L_de), w.lam_dis), self.opt_disc.params))
            Lc, Le = L_dc.item(), L_de.item()
            acc = float(np.mean(np.argmax(logits_e.data, axis=1) == env))
        else:
            self.opt_main.step(_grads(loss, self.opt_main.params))

        per = per_full.data
        report = StepReport(
            iteration=self.iteration, loss_main=L_full.item(), loss_inv=L_inv.item(),
            loss_disc_c=Lc, loss_disc_e=Le, loss_adv=L_adv.item() if L_adv is not None else float("nan"),
            disc_acc_e=acc, penalty=penalty.item() if penalty is not None else 0.0,
            env_risks={e: float(per[ix].mean()) for e, ix in groups})
        self._last = report
        self.iteration += 1
        return report

    _last = None

    def run(self, out_dir=None, log_file=None) -> TrainResult:
        cfg = self.cfg
        reports = []
        fh = open(log_file, "a") if log_file else None
        diverged = False
        try:
            for it in range(cfg.iters):
                try:
                    rep = self.step()
                except TrainingDiverged as exc:
                    log.warning("training diverged at iteration %d", it)
                    if exc.report is not None:
                        reports.append(exc.report)
                    diverged = True
                    break
                if it % cfg.log_every == 0 or it == cfg.iters - 1:
                    reports.append(rep)
                    if fh:
                        fh.write(rep.format() + "\n")
                        fh.flush()
                    log.debug(rep.format())
                if out_dir and cfg.ckpt_every and (it + 1) % cfg.ckpt_every == 0:
                    save_checkpoint(self.model, os.path.join(out_dir, f"ckpt_{it + 1:06d}.txt"),
                                    self.checkpoint_meta())
        finally:
            if fh:
                fh.close()
        if out_dir:
            save_checkpoint(self.model, os.path.join(out_dir, "model.ckpt"), self.checkpoint_meta())
        return TrainResult(self.model, reports, cfg, diverged)

    def checkpoint_meta(self) -> dict:
        return {"method": self.cfg.method, "iteration": self.iteration, "seed": self.cfg.seed,
                "T_c": self.data.T_c, "dataset": self.cfg.dataset}


def train(cfg: TrainConfig, ds: Dataset | None = None, out_dir=None) -> TrainResult:
    if ds is None:
        ds = load_dataset(cfg.dataset)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(format_config(cfg))
    trainer = Trainer(cfg, ds)
    log_file = os.path.join(out_dir, "steps.log") if out_dir else None
    if log_file and os.path.exists(log_file):
        os.remove(log_file)
    return trainer.run(out_dir, log_file)
