"""Hypernetwork architecture: trajectory encoder, invariant/environment heads,
function decoder and environment discriminator.

All MLPs put one LayerNorm in front of every ReLU. Parameters are plain
:class:`~difkit.grad.Array` leaves kept in named groups::

    enc   trajectory encoder
    inv   invariant head        (z -> z_c)
    env   environment head      (z -> z_e)
    dec   function decoder      (z_hat -> function vector)
    disc  discriminator         (z_c or z_e -> environment logits)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grad as G
from .grad import Array
from .hyper import DerivNetSpec, Layout, build_layout

CHECKPOINT_HEADER = "difkit-checkpoint v1"
GROUPS = ("enc", "inv", "env", "dec", "disc")


@dataclass(frozen=True)
class EncoderSpec:
    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 128

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.model_dim % 2:
            raise ValueError("model_dim must be even for the positional table")


@dataclass(frozen=True)
class HeadSpec:
    embed_dim: int = 32
    hidden: int = 64
    depth: int = 3


@dataclass(frozen=True)
class DiscSpec:
    depth: int = 3
    width: int = 64


@dataclass(frozen=True)
class ModelSpec:
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    head: HeadSpec = field(default_factory=HeadSpec)
    deriv: DerivNetSpec = field(default_factory=DerivNetSpec)
    disc: DiscSpec = field(default_factory=DiscSpec)
    decoder_hidden: int = 64
    n_envs: int = 4
    decoder_out_scale: float = 0.01

    def flat(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, dict):
                out.update({f"{k}.{kk}": vv for kk, vv in v.items()})
            else:
                out[k] = v
        return out

    @classmethod
    def from_flat(cls, kv: dict) -> "ModelSpec":
        parts: dict = {"encoder": {}, "head": {}, "deriv": {}, "disc": {}}
        top = {}
        for k, v in kv.items():
            if "." in k:
                g, name = k.split(".", 1)
                parts[g][name] = v
            else:
                top[k] = v
        return cls(encoder=EncoderSpec(**{k: int(v) for k, v in parts["encoder"].items()}),
                   head=HeadSpec(**{k: int(v) for k, v in parts["head"].items()}),
                   deriv=DerivNetSpec(**{k: int(v) for k, v in parts["deriv"].items()}),
                   disc=DiscSpec(**{k: int(v) for k, v in parts["disc"].items()}),
                   decoder_hidden=int(top.get("decoder_hidden", 64)), n_envs=int(top.get("n_envs", 4)),
                   decoder_out_scale=float(top.get("decoder_out_scale", 0.01)))


PAPER_SCALE = ModelSpec(encoder=EncoderSpec(6, 8, 256, 256), head=HeadSpec(64, 128),
                        deriv=DerivNetSpec(depth=5, width=32), disc=DiscSpec(4, 128), decoder_hidden=128)


def freq_positional_encoding(T_c: int, dim: int) -> np.ndarray:
    """Sinusoidal table: even columns sin(k / 10000^(2i/dim)), odd columns cos."""
    if dim % 2:
        raise ValueError("positional encoding dimension must be even")
    k = np.arange(T_c)[:, None]
    freq = 10000.0 ** (np.arange(0, dim, 2) / dim)
    pe = np.empty((T_c, dim))
    pe[:, 0::2] = np.sin(k / freq)
    pe[:, 1::2] = np.cos(k / freq)
    return pe


def _linear(params, name, n_in, n_out, rng, scale=1.0):
    bound = scale / math.sqrt(n_in)
    params[f"{name}.weight"] = Array(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
    params[f"{name}.bias"] = Array(rng.uniform(-bound, bound, n_out), requires_grad=True)


def _norm(params, name, n):
    params[f"{name}.scale"] = Array(np.ones(n), requires_grad=True)
    params[f"{name}.shift"] = Array(np.zeros(n), requires_grad=True)


def _mlp_init(params, prefix, dims, rng, last_scale=1.0):
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        _linear(params, f"{prefix}{i}", dims[i], dims[i + 1], rng, last_scale if last else 1.0)
        if not last:
            _norm(params, f"{prefix}{i}.norm", dims[i + 1])


def mlp_forward(params, prefix, x, n_layers):
    h = x
    for i in range(n_layers):
        h = G.affine(h, params[f"{prefix}{i}.weight"], params[f"{prefix}{i}.bias"])
        if i < n_layers - 1:
            h = G.relu(G.layer_norm(h, params[f"{prefix}{i}.norm.scale"], params[f"{prefix}{i}.norm.shift"]))
    return h


class DIFModel:
    """Parameter container plus the forward pieces of the hypernetwork."""

    def __init__(self, spec: ModelSpec, d: int, seed: int = 0, rng: np.random.Generator | None = None):
        if spec.deriv.d != d:
            spec = ModelSpec(spec.encoder, spec.head, DerivNetSpec(d, spec.deriv.depth, spec.deriv.width),
                             spec.disc, spec.decoder_hidden, spec.n_envs, spec.decoder_out_scale)
        self.spec = spec
        self.d = d
        self.layout: Layout = build_layout(spec.deriv)
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.groups: dict[str, dict[str, Array]] = {g: {} for g in GROUPS}
        self._init(rng)
        for g, params in self.groups.items():
            for k, p in params.items():
                p.name = f"{g}.{k}"
        self._pe_cache: dict[int, np.ndarray] = {}

    @property
    def m(self) -> int:
        return self.layout.m

    def _init(self, rng):
        e, h = self.spec.encoder, self.spec.head
        enc = self.groups["enc"]
        _linear(enc, "embed", self.d, e.model_dim, rng)
        for i in range(e.layers):
            _norm(enc, f"block{i}.ln1", e.model_dim)
            _linear(enc, f"block{i}.qkv", e.model_dim, 3 * e.model_dim, rng)
            _linear(enc, f"block{i}.proj", e.model_dim, e.model_dim, rng)
            _norm(enc, f"block{i}.ln2", e.model_dim)
            _linear(enc, f"block{i}.ff1", e.model_dim, e.ffn_dim, rng)
            _linear(enc, f"block{i}.ff2", e.ffn_dim, e.model_dim, rng)
        _norm(enc, "ln_out", e.model_dim)
        head_dims = [e.model_dim] + [h.hidden] * (h.depth - 1) + [h.embed_dim]
        _mlp_init(self.groups["inv"], "mlp", head_dims, rng)
        _mlp_init(self.groups["env"], "mlp", head_dims, rng)
        dec_dims = [h.embed_dim, self.spec.decoder_hidden, self.spec.decoder_hidden, self.m]
        _mlp_init(self.groups["dec"], "mlp", dec_dims, rng, last_scale=self.spec.decoder_out_scale)
        disc_dims = [h.embed_dim] + [self.spec.disc.width] * (self.spec.disc.depth - 1) + [self.spec.n_envs]
        _mlp_init(self.groups["disc"], "mlp", disc_dims, rng)

    # parameter groups -------------------------------------------------------

    def params(self, *groups) -> list[Array]:
        groups = groups or GROUPS
        return [p for g in groups for p in self.groups[g].values()]

    def param_ids(self, *groups) -> set[int]:
        return {id(p) for p in self.params(*groups)}

    @property
    def theta(self):
        return self.params("enc", "inv", "env", "dec")

    @property
    def theta_c(self):
        return self.params("enc", "inv", "dec")

    @property
    def theta_bar_e(self):
        return self.params("enc", "env")

    @property
    def theta_bar_c(self):
        return self.params("enc", "inv")

    @property
    def phi(self):
        return self.params("disc")

    def n_params(self, *groups) -> int:
        return sum(p.size for p in self.params(*groups))

    # forward ------------------------------------------------------------------

    def _pe(self, T_c):
        pe = self._pe_cache.get(T_c)
        if pe is None:
            pe = self._pe_cache[T_c] = freq_positional_encoding(T_c, self.spec.encoder.model_dim)
        return pe

    def encode(self, xp) -> Array:
        """``xp``: normalized past windows, (B, T_c, d). Returns z (B, model_dim)."""
        xp = G.as_array(xp)
        p, e = self.groups["enc"], self.spec.encoder
        B, T_c, _ = xp.shape
        D, H = e.model_dim, e.heads
        dh = D // H
        h = G.add(G.affine(xp, p["embed.weight"], p["embed.bias"]), G.table_lookup(self._pe(T_c), slice(0, T_c)))
        for i in range(e.layers):
            a = G.layer_norm(h, p[f"block{i}.ln1.scale"], p[f"block{i}.ln1.shift"])
            qkv = G.affine(a, p[f"block{i}.qkv.weight"], p[f"block{i}.qkv.bias"])
            qkv = G.transpose(G.reshape(qkv, (B, T_c, 3, H, dh)), (2, 0, 3, 1, 4))
            q = G.reshape(G.slice_(qkv, 0), (B * H, T_c, dh))
            k = G.reshape(G.slice_(qkv, 1), (B * H, T_c, dh))
            v = G.reshape(G.slice_(qkv, 2), (B * H, T_c, dh))
            att = G.softmax(G.scale(G.matmul(q, G.transpose(k)), 1.0 / math.sqrt(dh)))
            ctx = G.reshape(G.transpose(G.reshape(G.matmul(att, v), (B, H, T_c, dh)), (0, 2, 1, 3)), (B, T_c, D))
            h = G.add(h, G.affine(ctx, p[f"block{i}.proj.weight"], p[f"block{i}.proj.bias"]))
            a = G.layer_norm(h, p[f"block{i}.ln2.scale"], p[f"block{i}.ln2.shift"])
            f = G.affine(G.relu(G.affine(a, p[f"block{i}.ff1.weight"], p[f"block{i}.ff1.bias"])),
                         p[f"block{i}.ff2.weight"], p[f"block{i}.ff2.bias"])
            h = G.add(h, f)
        h = G.layer_norm(h, p["ln_out.scale"], p["ln_out.shift"])
        return G.mean(h, axis=1)

    def heads(self, z) -> tuple[Array, Array]:
        n = self.spec.head.depth
        return mlp_forward(self.groups["inv"], "mlp", z, n), mlp_forward(self.groups["env"], "mlp", z, n)

    @staticmethod
    def compose(z_c, z_e) -> Array:
        return G.add(z_c, z_e)

    def decode(self, z_hat) -> Array:
        return mlp_forward(self.groups["dec"], "mlp", z_hat, 3)

    def discriminate(self, z) -> Array:
        return mlp_forward(self.groups["disc"], "mlp", z, self.spec.disc.depth)

    def function_vectors(self, xp) -> tuple[Array, Array, Array, Array]:
        """Returns (F_full, F_inv, z_c, z_e) for normalized past windows."""
        z_c, z_e = self.heads(self.encode(xp))
        # Two decoder passes rather than one over the stacked batch: BLAS may round
        # a row differently depending on its position, and f_hat must equal f_hat_c
        # exactly whenever z_e is zero.
        return self.decode(self.compose(z_c, z_e)), self.decode(z_c), z_c, z_e

    # state ----------------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in state:
                raise KeyError(f"checkpoint lacks parameter {p.name}")
            if state[p.name].shape != p.shape:
                raise ValueError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.shape}")
            p.data[...] = state[p.name]

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state().items()}


def save_checkpoint(model: DIFModel, path, extra: dict | None = None) -> None:
    """Text checkpoint: header, ``spec.*``/``meta.*`` lines, then one ``param`` block per tensor."""
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        fh.write(f"d={model.d}\n")
        for k, v in model.spec.flat().items():
            fh.write(f"spec.{k}={v}\n")
        for k, v in (extra or {}).items():
            fh.write(f"meta.{k}={v}\n")
        for p in model.params():
            fh.write(f"param {p.name} {','.join(str(s) for s in p.shape)}\n")
            fh.write(" ".join(format(float(x), ".17g") for x in p.data.ravel()) + "\n")


def load_checkpoint(path) -> tuple[DIFModel, dict]:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a {CHECKPOINT_HEADER!r} file")
    spec_kv, extra, state = {}, {}, {}
    d = None
    i = 1
    while i < len(lines):
        line = lines[i]
        if line.startswith("param "):
            _, name, shape = line.split(" ")
            shp = tuple(int(s) for s in shape.split(",")) if shape else ()
            vals = np.array([float(x) for x in lines[i + 1].split()]) if lines[i + 1] else np.zeros(0)
            state[name] = vals.reshape(shp)
            i += 2
            continue
        if line.startswith("spec."):
            k, v = line[5:].split("=", 1)
            spec_kv[k] = v
        elif line.startswith("meta."):
            k, v = line[5:].split("=", 1)
            extra[k] = v
        elif line.startswith("d="):
            d = int(line[2:])
        i += 1
    model = DIFModel(ModelSpec.from_flat(spec_kv), d)
    model.load_state(state)
    return model, extra
