"""FUSE instance generator and parameter-complexity calculators."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .gradcore import ParamSet, Tensor

FREQ_KERNEL = 3
TIME_KERNEL = 3


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k_h: int
    k_w: int
    kind: str = "standard"

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k_h, self.k_w) < 1:
            raise ValueError(f"ConvSpec fields must be positive: {self}")
        if self.kind not in ("standard", "depthwise_separable", "spatially_separable"):
            raise ValueError(f"unknown conv kind {self.kind!r}")


def conv_param_count(spec: ConvSpec) -> int:
    if spec.kind == "standard":
        return spec.c_in * spec.c_out * spec.k_h * spec.k_w
    if spec.kind == "depthwise_separable":
        return spec.c_out * (spec.c_in + spec.k_h * spec.k_w)
    return spec.c_out * (spec.c_in + spec.k_h + spec.k_w)


@dataclass(frozen=True)
class FuseModuleSpec:
    n_blocks: int
    c_out: int
    pool: bool

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("a FUSE module needs at least one block")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the instance generator plus detector."""

    n_mels: int = 256
    channels: tuple[int, ...] = (32, 64, 128, 256)
    n_blocks: int = 3
    pools: tuple[bool, ...] = (True, True, True, False)
    n_classes: int = 10

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "pools", tuple(bool(p) for p in self.pools))
        if len(self.channels) != len(self.pools):
            raise ValueError("channels and pools must have the same length")
        if self.n_mels % self.time_reduction:
            raise ValueError(f"n_mels={self.n_mels} not divisible by pooling factor {self.time_reduction}")

    @property
    def modules(self) -> list[FuseModuleSpec]:
        return [FuseModuleSpec(self.n_blocks, c, p) for c, p in zip(self.channels, self.pools)]

    @property
    def time_reduction(self) -> int:
        return 2 ** sum(self.pools)

    @property
    def instance_dim(self) -> int:
        return self.channels[-1]

    @property
    def freq_after_extractor(self) -> int:
        return self.n_mels // self.time_reduction

    def n_instances(self, n_frames: int) -> int:
        n = n_frames
        for p in self.pools:
            if p:
                n //= 2
        return n

    def to_dict(self) -> dict:
        return {
            "n_mels": self.n_mels,
            "channels": list(self.channels),
            "n_blocks": self.n_blocks,
            "pools": list(self.pools),
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass
class BagOfInstances:
    vectors: np.ndarray  # (N, d)
    clip_id: str = ""

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"a bag needs an (N >= 1, d) matrix, got {self.vectors.shape}")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


# ----------------------------------------------------------------------------
# parameters


def _add_bn(params: ParamSet, prefix: str, c: int, dtype):
    params.add(f"{prefix}.gamma", np.ones(c, dtype=dtype))
    params.add(f"{prefix}.beta", np.zeros(c, dtype=dtype))
    params.add(f"{prefix}.running_mean", np.zeros(c, dtype=dtype), trainable=False)
    params.add(f"{prefix}.running_var", np.ones(c, dtype=dtype), trainable=False)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamSet:
    """He-normal convolution kernels, unit/zero batch-norm affine, small uniform detector."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    c_in = 1
    for i, mod in enumerate(cfg.modules):
        p = f"fe.m{i}"
        params.add(f"{p}.pw.w", rng.normal(0.0, np.sqrt(2.0 / c_in), (mod.c_out, c_in)).astype(dtype))
        _add_bn(params, f"{p}.pw.bn", mod.c_out, dtype)
        for k in range(mod.n_blocks):
            b = f"{p}.b{k}"
            params.add(f"{b}.fdw.w", rng.normal(0.0, np.sqrt(2.0 / FREQ_KERNEL), (mod.c_out, FREQ_KERNEL)).astype(dtype))
            _add_bn(params, f"{b}.fdw.bn", mod.c_out, dtype)
            params.add(f"{b}.tdw.w", rng.normal(0.0, np.sqrt(2.0 / TIME_KERNEL), (mod.c_out, TIME_KERNEL)).astype(dtype))
            _add_bn(params, f"{b}.tdw.bn", mod.c_out, dtype)
        c_in = mod.c_out
    d = cfg.instance_dim
    f = cfg.freq_after_extractor
    params.add("ivg.fdw.w", rng.normal(0.0, np.sqrt(1.0 / f), (d, f)).astype(dtype))
    params.add("ivg.pw.w", rng.normal(0.0, np.sqrt(1.0 / d), (d, d)).astype(dtype))
    bound = 1.0 / np.sqrt(d)
    params.add("det.w", rng.uniform(-bound, bound, (cfg.n_classes, d)).astype(dtype))
    params.add("det.b", np.zeros(cfg.n_classes, dtype=dtype))
    return params


# ----------------------------------------------------------------------------
# forward


def _conv_bn_relu(x: Tensor, conv, params: ParamSet, prefix: str, train: bool) -> Tensor:
    h = conv(x)
    h = gc.batchnorm(
        h,
        params[f"{prefix}.bn.gamma"],
        params[f"{prefix}.bn.beta"],
        params[f"{prefix}.bn.running_mean"].data,
        params[f"{prefix}.bn.running_var"].data,
        train,
        relu=True,
    )
    return h


def fuse_block_forward(x: Tensor, params: ParamSet, prefix: str, train: bool) -> Tensor:
    """FDW -> BN -> ReLU -> TDW -> BN -> ReLU."""
    h = _conv_bn_relu(x, lambda t: gc.axis_depthwise_conv(t, params[f"{prefix}.fdw.w"], "frequency", "same"),
                      params, f"{prefix}.fdw", train)
    return _conv_bn_relu(h, lambda t: gc.axis_depthwise_conv(t, params[f"{prefix}.tdw.w"], "time", "same"),
                         params, f"{prefix}.tdw", train)


def fuse_module_forward(x: Tensor, spec: FuseModuleSpec, params: ParamSet, prefix: str, train: bool = True) -> Tensor:
    w = params[f"{prefix}.pw.w"]
    if x.data.ndim != 4:
        raise gc.DimensionError(f"expected (B, C, H, W) input, got {x.shape}")
    if w.shape[1] != x.shape[1]:
        raise gc.DimensionError(f"{prefix}: input has {x.shape[1]} channels, module expects {w.shape[1]}")
    h = _conv_bn_relu(x, lambda t: gc.pointwise_conv(t, w), params, f"{prefix}.pw", train)
    terms = [h]
    for k in range(spec.n_blocks):
        h = fuse_block_forward(h, params, f"{prefix}.b{k}", train)
        terms.append(h)
    out = gc.add(*terms)
    return gc.maxpool2(out) if spec.pool else out


def feature_maps(x: Tensor, params: ParamSet, cfg: ModelConfig, train: bool = True, trace: list | None = None) -> Tensor:
    h = x
    for i, mod in enumerate(cfg.modules):
        h = fuse_module_forward(h, mod, params, f"fe.m{i}", train)
        if trace is not None:
            trace.append(h.shape)
    return h


def instance_generator_forward(x: Tensor, params: ParamSet, cfg: ModelConfig, train: bool = True,
                               trace: list | None = None) -> Tensor:
    """Map log-mel input ``(B, 1, F, T)`` to instance vectors ``(B, N, d)``."""
    if x.data.ndim == 3:
        x = gc.reshape(x, (1,) + x.shape)
    if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.n_mels:
        raise gc.DimensionError(f"expected input (B, 1, {cfg.n_mels}, T), got {x.shape}")
    if cfg.n_instances(x.shape[3]) < 1:
        raise gc.DimensionError(f"T={x.shape[3]} frames is too short for {cfg.time_reduction}x pooling")
    h = feature_maps(x, params, cfg, train, trace)
    h = gc.axis_depthwise_conv(h, params["ivg.fdw.w"], "frequency", "valid")
    if trace is not None:
        trace.append(h.shape)
    h = gc.pointwise_conv(h, params["ivg.pw.w"])
    if trace is not None:
        trace.append(h.shape)
    b, d, _, n = h.shape
    h = gc.reshape(h, (b, d, n))
    if trace is not None:
        trace.append(h.shape)
    h = gc.transpose(h, (0, 2, 1))
    if trace is not None:
        trace.append(h.shape)
    return h


def generate_bag(logmel_values: np.ndarray, params: ParamSet, cfg: ModelConfig, clip_id: str = "") -> BagOfInstances:
    """Eval-mode bag for a single ``(F, T)`` spectrogram."""
    dtype = params["det.w"].dtype
    x = Tensor(np.asarray(logmel_values, dtype=dtype)[None, None])
    inst = instance_generator_forward(x, params, cfg, train=False)
    return BagOfInstances(inst.data[0], clip_id)


# ----------------------------------------------------------------------------
# parameter accounting


def _stage(name: str) -> str:
    if name.startswith("fe."):
        return "feature_map_extractor." + name.split(".")[1]
    if name.startswith("ivg."):
        return "instance_vector_generator"
    if name.startswith("det."):
        return "instance_detector"
    return "other"


def model_param_report(params: ParamSet) -> dict:
    """Trainable parameter counts per tensor, per stage, and in total."""
    items = OrderedDict()
    stages: OrderedDict[str, int] = OrderedDict()
    for name, t in params.trainable():
        n = int(t.data.size)
        items[name] = n
        s = _stage(name)
        stages[s] = stages.get(s, 0) + n
    return {"items": items, "stages": stages, "total": sum(items.values())}


def format_param_report(report: dict) -> str:
    width = max(len(n) for n in report["items"]) + 2
    lines = [f"{'tensor':<{width}}{'params':>10}"]
    for name, n in report["items"].items():
        lines.append(f"{name:<{width}}{n:>10}")
    lines.append("")
    for stage, n in report["stages"].items():
        lines.append(f"{stage:<{width}}{n:>10}")
    lines.append(f"{'total':<{width}}{report['total']:>10}")
    return "\n".join(lines)
