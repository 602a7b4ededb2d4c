"""HSRM (residual CNN), LSRM (attention encoder), the scalar gate, and their mixture.

All three networks consume a power-normalized [B, 2, L] I/Q batch and the
experts emit softmax probabilities. The mixture evaluates both experts on
every input and blends them with the gate output, which keeps the whole
graph differentiable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .sigsynth import IQFrame
from .tensorcore import Tensor

PATCH = 8
NORM_EPS = 1e-12
# expert output layers start at this fraction of their Xavier range, so an
# untrained classifier predicts close to uniform while every gradient path,
# gate included, is live from the first step
OUTPUT_INIT_SCALE = 0.01


@dataclass(frozen=True)
class HsrmConfig:
    n_classes: int = 8
    n_stacks: int = 4
    units_per_stack: int = 2
    channels: int = 32
    kernel: int = 3
    head_hidden: tuple = (128, 64)

    def __post_init__(self):
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))
        if self.n_stacks < 1 or self.units_per_stack < 1:
            raise ValueError("n_stacks and units_per_stack must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd to preserve length")


@dataclass(frozen=True)
class LsrmConfig:
    n_classes: int = 8
    d_model: int = 64
    n_heads: int = 4
    ffn_hidden: int = 128
    head_hidden: tuple = (128, 64)

    def __post_init__(self):
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class GateConfig:
    hidden: tuple = (64, 32)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))


# preprocessing ---------------------------------------------------------------


def normalize_power(iq: np.ndarray) -> np.ndarray:
    """Scale each [2, L] frame in a [..., 2, L] array to unit mean power."""
    iq = np.asarray(iq)
    p = np.mean(iq.astype(np.float64) ** 2, axis=-1).sum(axis=-1)
    scale = 1.0 / np.sqrt(np.maximum(p, NORM_EPS))
    return (iq * scale[..., None, None]).astype(iq.dtype if iq.dtype.kind == "f" else np.float64)


def preprocess(frame: IQFrame, input_len: int | None = None) -> Tensor:
    if input_len is not None and frame.length != input_len:
        raise ValueError(f"frame length {frame.length} != model input length {input_len}")
    return Tensor(normalize_power(np.stack([frame.i, frame.q])))


# parameter containers ----------------------------------------------------------


class Module:
    """Named parameters (trainable tensors) plus named buffers (running stats)."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data.copy() for k, p in self.params.items()}
        out.update({k: b.copy() for k, b in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = (set(self.params) | set(self.buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)
        for k, b in self.buffers.items():
            self.buffers[k] = np.array(state[k], dtype=b.dtype)

    def astype(self, dtype) -> "Module":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def _param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.forward(x, training)


def _he(rng, fan_in, shape, dtype):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


def _xavier(rng, fan_in, fan_out, shape, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape).astype(dtype)


def _add_linear(m: Module, name, n_in, n_out, rng, dtype, init="he"):
    if init == "he":
        w = _he(rng, n_in, (n_in, n_out), dtype)
    elif init == "small":
        w = (OUTPUT_INIT_SCALE * _xavier(rng, n_in, n_out, (n_in, n_out), np.float64)).astype(dtype)
    else:
        w = _xavier(rng, n_in, n_out, (n_in, n_out), dtype)
    m._param(f"{name}.w", w)
    m._param(f"{name}.b", np.zeros(n_out, dtype=dtype))


def _add_bn(m: Module, name, c, dtype):
    m._param(f"{name}.gamma", np.ones(c, dtype=dtype))
    m._param(f"{name}.beta", np.zeros(c, dtype=dtype))
    m.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=dtype)
    m.buffers[f"{name}.running_var"] = np.ones(c, dtype=dtype)


def _add_mlp_head(m: Module, name, n_in, hidden, n_out, rng, dtype, final_init="xavier"):
    dims = (n_in, *hidden)
    for j in range(len(hidden)):
        _add_linear(m, f"{name}.fc{j}", dims[j], dims[j + 1], rng, dtype, "he")
    _add_linear(m, f"{name}.fc{len(hidden)}", dims[-1], n_out, rng, dtype, final_init)


def _lin(p, name, x):
    return tc.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def mlp_head_forward(x: Tensor, p, name: str, n_layers: int) -> Tensor:
    """linear -> ReLU -> ... -> linear; no output activation."""
    for j in range(n_layers - 1):
        x = tc.relu(_lin(p, f"{name}.fc{j}", x))
    return _lin(p, f"{name}.fc{n_layers - 1}", x)


def _bn(x, p, buffers, name, training):
    return tc.batch_norm(
        x,
        p[f"{name}.gamma"],
        p[f"{name}.beta"],
        buffers[f"{name}.running_mean"],
        buffers[f"{name}.running_var"],
        training,
    )


# HSRM ------------------------------------------------------------------------


def residual_unit_forward(x: Tensor, p, buffers, name: str, training: bool = False) -> Tensor:
    """``x + g(x)`` with g = conv -> BN -> ReLU -> conv -> BN (length preserving)."""
    k = p[f"{name}.conv1.w"].shape[2]
    if x.shape[1] != p[f"{name}.conv1.w"].shape[1]:
        raise ValueError(f"{name}: input has {x.shape[1]} channels, unit expects {p[f'{name}.conv1.w'].shape[1]}")
    g = tc.conv1d(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], pad=k // 2)
    g = tc.relu(_bn(g, p, buffers, f"{name}.bn1", training))
    g = tc.conv1d(g, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], pad=k // 2)
    g = _bn(g, p, buffers, f"{name}.bn2", training)
    return x + g


class HSRM(Module):
    prefix = "hsrm"

    def __init__(self, cfg: HsrmConfig = HsrmConfig(), input_len: int = 128, rng=None, dtype=np.float32):
        super().__init__()
        if input_len % (2**cfg.n_stacks):
            raise ValueError(f"input_len {input_len} not divisible by 2**{cfg.n_stacks}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg, self.input_len = cfg, input_len
        C, k, P = cfg.channels, cfg.kernel, self.prefix
        self._param(f"{P}.stem.w", _he(rng, 2 * k, (C, 2, k), dtype))
        self._param(f"{P}.stem.b", np.zeros(C, dtype=dtype))
        for s in range(cfg.n_stacks):
            for u in range(cfg.units_per_stack):
                name = f"{P}.stack{s}.unit{u}"
                for c in (1, 2):
                    self._param(f"{name}.conv{c}.w", _he(rng, C * k, (C, C, k), dtype))
                    self._param(f"{name}.conv{c}.b", np.zeros(C, dtype=dtype))
                    _add_bn(self, f"{name}.bn{c}", C, dtype)
        flat = C * (input_len >> cfg.n_stacks)
        _add_mlp_head(self, f"{P}.head", flat, cfg.head_hidden, cfg.n_classes, rng, dtype, "small")

    def features(self, x: Tensor, training: bool = False) -> Tensor:
        cfg, p, P = self.cfg, self.params, self.prefix
        if x.ndim != 3 or x.shape[1] != 2 or x.shape[2] != self.input_len:
            raise ValueError(f"HSRM expects [B, 2, {self.input_len}], got {x.shape}")
        h = tc.conv1d(x, p[f"{P}.stem.w"], p[f"{P}.stem.b"], pad=cfg.kernel // 2)
        for s in range(cfg.n_stacks):
            for u in range(cfg.units_per_stack):
                h = residual_unit_forward(h, p, self.buffers, f"{P}.stack{s}.unit{u}", training)
            h = tc.max_pool1d(h, 2, 2)
        return h

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        h = tc.flatten(self.features(x, training))
        logits = mlp_head_forward(h, self.params, f"{self.prefix}.head", len(self.cfg.head_hidden) + 1)
        return tc.softmax(logits, axis=-1)


# LSRM ------------------------------------------------------------------------


def encoder_block_forward(x: Tensor, p, name: str, n_heads: int) -> Tensor:
    """Post-norm block: LN(x + MHA(x)) then LN(h + FFN(h))."""
    a = tc.multi_head_attention(
        x,
        p[f"{name}.attn.wq"],
        p[f"{name}.attn.wk"],
        p[f"{name}.attn.wv"],
        p[f"{name}.attn.wo"],
        n_heads,
        p[f"{name}.attn.bq"],
        p[f"{name}.attn.bk"],
        p[f"{name}.attn.bv"],
        p[f"{name}.attn.bo"],
    )
    h = tc.layer_norm(x + a, p[f"{name}.ln1.gamma"], p[f"{name}.ln1.beta"])
    f = _lin(p, f"{name}.ffn.fc1", tc.relu(_lin(p, f"{name}.ffn.fc0", h)))
    return tc.layer_norm(h + f, p[f"{name}.ln2.gamma"], p[f"{name}.ln2.beta"])


def patchify(x: Tensor, patch: int = PATCH) -> Tensor:
    """[B, 2, L] -> [B, L/patch, 2*patch]; each token holds one window of both channels."""
    B, C, L = x.shape
    if L % patch:
        raise ValueError(f"input length {L} not divisible by patch size {patch}")
    T = L // patch
    return x.reshape(B, C, T, patch).transpose(0, 2, 1, 3).reshape(B, T, C * patch)


class LSRM(Module):
    prefix = "lsrm"

    def __init__(self, cfg: LsrmConfig = LsrmConfig(), input_len: int = 128, rng=None, dtype=np.float32):
        super().__init__()
        if input_len % PATCH:
            raise ValueError(f"input_len {input_len} not divisible by patch size {PATCH}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg, self.input_len = cfg, input_len
        d, P = cfg.d_model, self.prefix
        _add_linear(self, f"{P}.embed", 2 * PATCH, d, rng, dtype, "xavier")
        enc = f"{P}.enc"
        for proj in ("q", "k", "v", "o"):
            self._param(f"{enc}.attn.w{proj}", _xavier(rng, d, d, (d, d), dtype))
            self._param(f"{enc}.attn.b{proj}", np.zeros(d, dtype=dtype))
        _add_linear(self, f"{enc}.ffn.fc0", d, cfg.ffn_hidden, rng, dtype, "he")
        _add_linear(self, f"{enc}.ffn.fc1", cfg.ffn_hidden, d, rng, dtype, "xavier")
        for ln in ("ln1", "ln2"):
            self._param(f"{enc}.{ln}.gamma", np.ones(d, dtype=dtype))
            self._param(f"{enc}.{ln}.beta", np.zeros(d, dtype=dtype))
        _add_mlp_head(self, f"{P}.head", d, cfg.head_hidden, cfg.n_classes, rng, dtype, "small")

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 3 or x.shape[1] != 2 or x.shape[2] != self.input_len:
            raise ValueError(f"LSRM expects [B, 2, {self.input_len}], got {x.shape}")
        p, P = self.params, self.prefix
        tokens = _lin(p, f"{P}.embed", patchify(x))
        h = encoder_block_forward(tokens, p, f"{P}.enc", self.cfg.n_heads)
        pooled = tc.global_avg_pool(h, axis=1)
        logits = mlp_head_forward(pooled, p, f"{P}.head", len(self.cfg.head_hidden) + 1)
        return tc.softmax(logits, axis=-1)


# gate and mixture ----------------------------------------------------------------


class Gate(Module):
    prefix = "gate"

    def __init__(self, cfg: GateConfig = GateConfig(), input_len: int = 128, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg, self.input_len = cfg, input_len
        _add_mlp_head(self, f"{self.prefix}.mlp", 2 * input_len, cfg.hidden, 1, rng, dtype)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        """Probability that each frame is high-SNR, shape [B]."""
        if x.ndim != 3 or x.shape[1:] != (2, self.input_len):
            raise ValueError(f"gate expects [B, 2, {self.input_len}], got {x.shape}")
        z = mlp_head_forward(tc.flatten(x), self.params, f"{self.prefix}.mlp", len(self.cfg.hidden) + 1)
        return tc.sigmoid(z).reshape(x.shape[0])


def mix_experts(y_high: Tensor, y_hsnr: Tensor, y_lsnr: Tensor) -> Tensor:
    """``y_high * y_hsnr + (1 - y_high) * y_lsnr`` with the gate broadcast over classes."""
    g = y_high.reshape(y_high.shape[0], 1)
    return g * y_hsnr + (1.0 - g) * y_lsnr


class MoEAMC(Module):
    """Gate + HSRM + LSRM; parameters are namespaced ``gate.*``, ``hsrm.*``, ``lsrm.*``."""

    def __init__(
        self,
        n_classes: int = 8,
        input_len: int = 128,
        gate_cfg: GateConfig | None = None,
        hsrm_cfg: HsrmConfig | None = None,
        lsrm_cfg: LsrmConfig | None = None,
        rng=None,
        dtype=np.float32,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        hsrm_cfg = hsrm_cfg or HsrmConfig(n_classes=n_classes)
        lsrm_cfg = lsrm_cfg or LsrmConfig(n_classes=n_classes)
        if hsrm_cfg.n_classes != n_classes or lsrm_cfg.n_classes != n_classes:
            raise ValueError("expert configs disagree on n_classes")
        self.n_classes, self.input_len = n_classes, input_len
        self.gate = Gate(gate_cfg or GateConfig(), input_len, rng, dtype)
        self.hsrm = HSRM(hsrm_cfg, input_len, rng, dtype)
        self.lsrm = LSRM(lsrm_cfg, input_len, rng, dtype)
        for sub in (self.gate, self.hsrm, self.lsrm):
            self.params.update(sub.params)
        self.buffers = _SharedBuffers(self.gate, self.hsrm, self.lsrm)

    @property
    def configs(self):
        return self.gate.cfg, self.hsrm.cfg, self.lsrm.cfg

    def astype(self, dtype):
        for sub in (self.gate, self.hsrm, self.lsrm):
            sub.astype(dtype)
        return self

    def forward(self, x: Tensor, training: bool = False) -> tuple[Tensor, Tensor]:
        y_high = self.gate(x, training)
        y_hsnr = self.hsrm(x, training)
        y_lsnr = self.lsrm(x, training)
        return mix_experts(y_high, y_hsnr, y_lsnr), y_high

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.forward(x, training)[0]

    def forward_all(self, x: Tensor, training: bool = False):
        """(y_final, y_high, y_hsnr, y_lsnr) for diagnostics."""
        y_high = self.gate(x, training)
        y_hsnr = self.hsrm(x, training)
        y_lsnr = self.lsrm(x, training)
        return mix_experts(y_high, y_hsnr, y_lsnr), y_high, y_hsnr, y_lsnr


ModelBundle = MoEAMC


class _SharedBuffers(dict):
    """Live view over the experts' buffer dicts so state I/O sees one namespace."""

    def __init__(self, *modules):
        super().__init__()
        self._modules = modules

    def _owner(self, key):
        for m in self._modules:
            if key in m.buffers:
                return m.buffers
        raise KeyError(key)

    def __getitem__(self, key):
        return self._owner(key)[key]

    def __setitem__(self, key, value):
        self._owner(key)[key] = value

    def __iter__(self):
        return (k for m in self._modules for k in m.buffers)

    def __len__(self):
        return sum(len(m.buffers) for m in self._modules)

    def __contains__(self, key):
        return any(key in m.buffers for m in self._modules)

    def keys(self):
        return list(iter(self))

    def items(self):
        return [(k, self[k]) for k in self]

    def values(self):
        return [self[k] for k in self]


def classify(y: Tensor | np.ndarray) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already resolves ties to the lowest index."""
    arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    return np.argmax(arr, axis=-1)


# construction and persistence ------------------------------------------------------

MODEL_KINDS = ("hsrm", "lsrm", "moe")


def build_model(kind: str, n_classes: int, input_len: int, seed: int = 0, dtype=np.float32, configs: dict | None = None):
    configs = configs or {}
    rng = np.random.default_rng(seed)
    hcfg = HsrmConfig(**{"n_classes": n_classes, **configs.get("hsrm", {})})
    lcfg = LsrmConfig(**{"n_classes": n_classes, **configs.get("lsrm", {})})
    gcfg = GateConfig(**configs.get("gate", {}))
    if kind == "hsrm":
        return HSRM(hcfg, input_len, rng, dtype)
    if kind == "lsrm":
        return LSRM(lcfg, input_len, rng, dtype)
    if kind == "moe":
        return MoEAMC(n_classes, input_len, gcfg, hcfg, lcfg, rng, dtype)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def model_kind(model) -> str:
    if isinstance(model, MoEAMC):
        return "moe"
    if isinstance(model, HSRM):
        return "hsrm"
    if isinstance(model, LSRM):
        return "lsrm"
    raise TypeError(f"not a model: {type(model).__name__}")


def architecture(model) -> dict:
    kind = model_kind(model)
    if kind == "moe":
        g, h, l = model.configs
        cfgs = {"gate": asdict(g), "hsrm": asdict(h), "lsrm": asdict(l)}
        n_classes = model.n_classes
    else:
        cfgs = {kind: asdict(model.cfg)}
        n_classes = model.cfg.n_classes
    for c in cfgs.values():
        c.pop("n_classes", None)
    return {"kind": kind, "n_classes": n_classes, "input_len": model.input_len, "configs": cfgs}


def save_model(model, path) -> None:
    """Write the parameter checkpoint plus a ``.json`` architecture sidecar."""
    arch = architecture(model)
    tc.save_checkpoint(model.state_dict(), path, extra={"architecture": arch})
    Path(path).with_suffix(".json").write_text(json.dumps(arch, indent=2, sort_keys=True) + "\n")


def load_model(path, dtype=np.float32):
    state, extra = tc.load_checkpoint(path)
    arch = extra["architecture"]
    model = build_model(arch["kind"], arch["n_classes"], arch["input_len"], dtype=dtype, configs=arch["configs"])
    model.load_state_dict(state)
    return model
