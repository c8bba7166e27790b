"""Residual classifier with an ablatable stem.

Layout: fixed per-channel normalisation -> stem conv -> BN -> ReLU ->
identity (no max-pool) -> residual stages -> global average pool -> linear.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from ..gradcore import (
    BatchNormState,
    Parameter,
    Tensor,
    add_residual,
    batchnorm2d,
    channel_affine,
    conv2d,
    conv_output_size,
    global_avg_pool,
    linear,
    relu,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StemConfig:
    kernel: int = 7
    stride: int = 2
    padding: int = 3
    out_channels: int = 32

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"stem kernel must be odd and positive, got {self.kernel}")
        if self.stride < 1:
            raise ConfigError(f"stem stride must be >= 1, got {self.stride}")
        if self.padding < 0 or self.out_channels < 1:
            raise ConfigError("stem padding must be >= 0 and out_channels >= 1")


@dataclass(frozen=True)
class NetConfig:
    stem: StemConfig = field(default_factory=StemConfig)
    stages: tuple = ((2, 32), (2, 64))
    num_classes: int = 10
    in_channels: int = 3
    scale: str = "desk"

    def __post_init__(self):
        stages = tuple((int(b), int(w)) for b, w in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ConfigError("at least one residual stage is required")
        if any(b < 1 or w < 1 for b, w in stages):
            raise ConfigError(f"stage block counts and widths must be positive: {stages}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.scale not in ("desk", "full"):
            raise ConfigError(f"scale must be 'desk' or 'full', got {self.scale!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["stem"] = StemConfig(**d.get("stem", {}))
        d["stages"] = tuple(tuple(s) for s in d.get("stages", ((2, 32), (2, 64))))
        return cls(**d)


def desk_config(stride: int = 2, num_classes: int = 10, stem_channels: int = 32,
                stages: Sequence = ((2, 32), (2, 64))) -> NetConfig:
    return NetConfig(StemConfig(7, stride, 3, stem_channels), tuple(stages), num_classes, scale="desk")


def full_config(stride: int = 2, num_classes: int = 10) -> NetConfig:
    """ResNet-18 widths and depths."""
    return NetConfig(StemConfig(7, stride, 3, 64), ((2, 64), (2, 128), (2, 256), (2, 512)),
                     num_classes, scale="full")


def spatial_plan(config: NetConfig, height: int, width: int) -> list:
    """Feature-map sizes after the stem and after each stage; raises if one collapses."""
    st = config.stem
    if st.kernel > height + 2 * st.padding or st.kernel > width + 2 * st.padding:
        raise ConfigError(f"stem kernel {st.kernel} does not fit a {height}x{width} input")
    h = conv_output_size(height, st.kernel, st.stride, st.padding)
    w = conv_output_size(width, st.kernel, st.stride, st.padding)
    plan = [(h, w)]
    for si, _ in enumerate(config.stages):
        if si > 0:
            h = conv_output_size(h, 3, 2, 1)
            w = conv_output_size(w, 3, 2, 1)
        if h < 1 or w < 1:
            raise ConfigError(f"spatial size collapses to zero at stage {si + 1} for a {height}x{width} input")
        plan.append((h, w))
    return plan


class _Norm:
    def __init__(self, model: "Model", name: str, channels: int):
        self.gamma = model._param(f"{name}.gamma", np.ones(channels), decay=False)
        self.beta = model._param(f"{name}.beta", np.zeros(channels), decay=False)
        self.state = BatchNormState(channels, dtype=model.dtype)
        model.bn_states[name] = self.state

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(x, self.gamma, self.beta, self.state, training)


class _Block:
    def __init__(self, model: "Model", name: str, cin: int, cout: int, stride: int, rng):
        self.stride = stride
        self.w1 = model._conv(f"{name}.conv1.weight", cout, cin, 3, rng)
        self.bn1 = _Norm(model, f"{name}.bn1", cout)
        self.w2 = model._conv(f"{name}.conv2.weight", cout, cout, 3, rng)
        self.bn2 = _Norm(model, f"{name}.bn2", cout)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = model._conv(f"{name}.shortcut.weight", cout, cin, 1, rng)
            self.bn_proj = _Norm(model, f"{name}.shortcut.bn", cout)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.bn1(conv2d(x, self.w1, stride=self.stride, padding=1), training))
        out = self.bn2(conv2d(out, self.w2, stride=1, padding=1), training)
        if self.proj is None:
            short = x
        else:
            short = self.bn_proj(conv2d(x, self.proj, stride=self.stride, padding=0), training)
        return relu(add_residual(out, short))


class Model:
    """Parameters, batchnorm buffers and the forward pass of one classifier."""

    def __init__(self, config: NetConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict = {}
        self.decay: dict = {}
        self.bn_states: dict = {}
        self.training = True
        self.norm_mean = np.zeros(config.in_channels)
        self.norm_std = np.ones(config.in_channels)

        rng = np.random.default_rng(seed)
        st = config.stem
        self.stem_w = self._conv("stem.conv.weight", st.out_channels, config.in_channels, st.kernel, rng)
        self.stem_bn = _Norm(self, "stem.bn", st.out_channels)
        self.blocks = []
        cin = st.out_channels
        for si, (count, width) in enumerate(config.stages):
            for bi in range(count):
                stride = 2 if (si > 0 and bi == 0) else 1
                self.blocks.append(_Block(self, f"stage{si + 1}.block{bi}", cin, width, stride, rng))
                cin = width
        bound = 1.0 / np.sqrt(cin)
        self.fc_w = self._param("fc.weight", rng.normal(0.0, bound, size=(config.num_classes, cin)))
        self.fc_b = self._param("fc.bias", np.zeros(config.num_classes), decay=False)

    # -- construction helpers
    def _param(self, name: str, values, decay: bool = True) -> Parameter:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(np.asarray(values, dtype=self.dtype), name=name)
        self.params[name] = p
        self.decay[name] = decay
        return p

    def _conv(self, name: str, cout: int, cin: int, k: int, rng) -> Parameter:
        fan_in = cin * k * k
        return self._param(name, rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k)))

    # -- modes
    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @contextlib.contextmanager
    def frozen(self) -> Iterator["Model"]:
        """Temporarily stop parameter gradients (input-gradient-only passes)."""
        flags = {n: p.trainable for n, p in self.params.items()}
        for p in self.params.values():
            p.trainable = False
        try:
            yield self
        finally:
            for n, p in self.params.items():
                p.trainable = flags[n]

    def set_normalization(self, mean, std) -> None:
        mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        std = np.asarray(std, dtype=np.float64).reshape(-1)
        if mean.shape != (self.config.in_channels,) or std.shape != mean.shape or np.any(std <= 0):
            raise ConfigError("normalisation needs one mean and one positive std per input channel")
        self.norm_mean, self.norm_std = mean, std

    # -- forward
    def forward(self, x: Tensor) -> Tensor:
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), requires_grad=x.requires_grad)
        spatial_plan(self.config, x.shape[2], x.shape[3])
        t = self.training
        h = channel_affine(x, 1.0 / self.norm_std, -self.norm_mean / self.norm_std)
        h = relu(self.stem_bn(conv2d(h, self.stem_w, stride=self.config.stem.stride,
                                     padding=self.config.stem.padding), t))
        for block in self.blocks:
            h = block(h, t)
        return linear(global_avg_pool(h), self.fc_w, self.fc_b)

    __call__ = forward

    def logits(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        """Logits of a numpy batch in the current mode, without recording a tape."""
        outs = []
        for s in range(0, len(images), batch):
            outs.append(self.forward(Tensor(images[s:s + batch].astype(self.dtype, copy=False))).data)
        if not outs:
            return np.zeros((0, self.config.num_classes), dtype=self.dtype)
        return np.concatenate(outs)

    # -- state
    def state_dict(self) -> dict:
        state = {n: p.data.copy() for n, p in self.params.items()}
        for n, s in self.bn_states.items():
            state[f"{n}.running_mean"] = s.running_mean.copy()
            state[f"{n}.running_var"] = s.running_var.copy()
            state[f"{n}.initialized"] = np.array([s.initialized], dtype=np.uint8)
        state["normalization.mean"] = self.norm_mean.copy()
        state["normalization.std"] = self.norm_std.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        for n, p in self.params.items():
            if n not in state:
                raise KeyError(f"missing parameter {n!r}")
            if state[n].shape != p.shape:
                raise ValueError(f"parameter {n!r}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=self.dtype)
        for n, s in self.bn_states.items():
            s.running_mean = np.array(state[f"{n}.running_mean"], dtype=self.dtype)
            s.running_var = np.array(state[f"{n}.running_var"], dtype=self.dtype)
            s.initialized = bool(state[f"{n}.initialized"][0])
        self.set_normalization(state["normalization.mean"], state["normalization.std"])


def build_model(config: NetConfig, seed: int = 0, dtype=np.float32,
                input_hw: Optional[tuple] = None) -> Model:
    """Seeded model; ``input_hw`` validates the stem/stage plan against an input size."""
    if input_hw is not None:
        spatial_plan(config, *input_hw)
    return Model(config, seed=seed, dtype=dtype)
