"""
RDCNet Model
Strided stem, recurrent stacked-dilated-convolution (SSDC) residual block and
transposed-convolution heads producing foreground probabilities and
semi-convolutional embeddings after every iteration.

    Y^0 = 0
    Y^i = f(X, Y^{i-1}) + Y^{i-1}

The recurrence runs at 1/scale resolution; the heads bring each state back to
full resolution. Every convolution except the stem is preceded by a leaky ReLU
so the residual path stays an identity.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from rdcnet.errors import ConfigError, UsageError
from rdcnet.functional import conv2d, conv2d_transpose, leaky_relu, softmax, spatial_dropout
from rdcnet.optim import ParamGroup
from rdcnet.tensor import Tensor, concat, default_dtype, no_grad, zeros

logger = logging.getLogger(__name__)

FOREGROUND = 1


@dataclass
class RDCNetConfig:
    """Architecture hyperparameters."""
    groups: int = 8
    group_channels: int = 64
    dilation_rates: List[int] = field(default_factory=lambda: [1, 2, 4, 8])
    iterations: int = 5
    scale: int = 4
    stem_channels: int = 32
    embedding_dim: int = 2
    semantic_classes: int = 2
    in_channels: int = 3
    dropout_p: float = 0.1
    leaky_slope: float = 0.01

    @property
    def state_channels(self) -> int:
        """Width of the recurrent state Y."""
        return self.groups * self.group_channels

    def validate(self) -> "RDCNetConfig":
        for name in ('groups', 'group_channels', 'iterations', 'scale', 'stem_channels', 'in_channels'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", field=f"model.{name}")
        rates = list(self.dilation_rates)
        if not rates:
            raise ConfigError("needs at least one rate", field='model.dilation_rates')
        if any(not isinstance(r, int) for r in rates) or rates[0] < 1:
            raise ConfigError(f"rates must be integers >= 1, got {rates}", field='model.dilation_rates')
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"rates must be strictly increasing, got {rates}", field='model.dilation_rates')
        if self.embedding_dim != 2:
            raise ConfigError(f"only 2D embeddings are supported, got {self.embedding_dim}",
                              field='model.embedding_dim')
        if self.semantic_classes != 2:
            raise ConfigError(f"only foreground/background semantics are supported, got {self.semantic_classes}",
                              field='model.semantic_classes')
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.dropout_p}", field='model.dropout_p')
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"must lie in (0, 1), got {self.leaky_slope}", field='model.leaky_slope')
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RDCNetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) {unknown}", field='model')
        config = cls(**values)
        config.dilation_rates = list(config.dilation_rates)
        return config


class ModelParams(ParamGroup):
    """Learned weights of one RDCNet, keyed by layer name."""

    def __init__(self, config: RDCNetConfig, params: Optional[Dict[str, Tensor]] = None):
        super().__init__(params)
        self.config = config


# ============== Topology ==============

def parameter_shapes(config: RDCNetConfig) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name and shape; a pure function of the config."""
    s = config.scale
    width = config.state_channels
    stem = config.stem_channels
    out = config.semantic_classes + config.embedding_dim
    return {
        'stem.weight': (stem, config.in_channels, s, s),
        'stem.bias': (stem,),
        'mix.weight': (width, stem + width, 1, 1),
        'mix.bias': (width,),
        'ssdc.weight': (width, config.group_channels, 3, 3),
        'ssdc.bias': (width,),
        'ssdc_proj.weight': (width, width * len(config.dilation_rates), 1, 1),
        'ssdc_proj.bias': (width,),
        # transposed convolution layout: [in, out, kh, kw]
        'head.weight': (width, stem, 2 * s, 2 * s),
        'head.bias': (stem,),
        'output.weight': (out, stem, 1, 1),
        'output.bias': (out,),
    }


def parameter_count(config: RDCNetConfig) -> int:
    return sum(int(np.prod(shape)) for shape in parameter_shapes(config).values())


def _fan_in(name: str, shape: Tuple[int, ...], config: RDCNetConfig) -> float:
    if name == 'head.weight':
        # each output pixel of a stride-s transposed conv sees (k/s)^2 taps per input channel
        return shape[0] * shape[2] * shape[3] / float(config.scale ** 2)
    return float(shape[1] * shape[2] * shape[3])


def build(config: RDCNetConfig, rng: np.random.Generator) -> ModelParams:
    """He-initialised weights (fan-in, corrected for the leaky slope) and zero biases."""
    config.validate()
    gain = math.sqrt(2.0 / (1.0 + config.leaky_slope ** 2))
    params = ModelParams(config)
    for name, shape in parameter_shapes(config).items():
        if name.endswith('.bias'):
            values = np.zeros(shape)
        else:
            std = gain / math.sqrt(_fan_in(name, shape, config))
            values = rng.standard_normal(shape) * std
        params.add(name, Tensor(values.astype(default_dtype()), track_grad=True, name=name))
    logger.info(f"Built RDCNet: {params.count()} parameters, state width {config.state_channels}, "
                f"dilations {config.dilation_rates}")
    return params


# ============== Layers ==============

def coordinate_grid(height: int, width: int) -> Tensor:
    """[1, 2, H, W] grid: channel 0 holds the row, channel 1 the column of each pixel."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing='ij')
    return Tensor(np.stack([rows, cols])[None])


def stem(image: Tensor, params: ModelParams, config: RDCNetConfig) -> Tensor:
    """Strided s x s convolution; the only layer without pre-activation."""
    return conv2d(image, params['stem.weight'], params['stem.bias'], stride=config.scale)


def ssdc(x: Tensor, params: ModelParams, config: RDCNetConfig) -> Tensor:
    """Shared grouped 3x3 kernel at every dilation rate, concatenated and projected back."""
    if x.ndim != 4 or x.shape[1] != config.state_channels:
        raise UsageError(f"ssdc expects {config.state_channels} channels, got shape {x.shape}")
    act = leaky_relu(x, config.leaky_slope)
    branches = [
        conv2d(act, params['ssdc.weight'], params['ssdc.bias'], dilation=rate, padding=rate,
               groups=config.groups)
        for rate in config.dilation_rates
    ]
    stacked = concat(branches, axis=1)
    return conv2d(leaky_relu(stacked, config.leaky_slope), params['ssdc_proj.weight'], params['ssdc_proj.bias'])


def recurrent_step(x_feat: Tensor, y_prev: Tensor, params: ModelParams, config: RDCNetConfig,
                   training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Y^i = f(X, Y^{i-1}) + Y^{i-1}"""
    if x_feat.shape[0] != y_prev.shape[0] or x_feat.shape[2:] != y_prev.shape[2:]:
        raise UsageError(f"stem features {x_feat.shape} and state {y_prev.shape} differ in batch or extent")
    if y_prev.shape[1] != config.state_channels:
        raise UsageError(f"state must have {config.state_channels} channels, got {y_prev.shape[1]}")
    z = concat([x_feat, y_prev], axis=1)
    z = spatial_dropout(z, config.dropout_p, training, rng)
    z = conv2d(leaky_relu(z, config.leaky_slope), params['mix.weight'], params['mix.bias'])
    return ssdc(z, params, config) + y_prev


def heads(y: Tensor, params: ModelParams, config: RDCNetConfig) -> Tuple[Tensor, Tensor]:
    """Upsample the state and split it into semantic probabilities and a displacement field."""
    s = config.scale
    up = conv2d_transpose(leaky_relu(y, config.leaky_slope), params['head.weight'], params['head.bias'],
                          stride=s, padding=s // 2)
    if s % 2:
        up = up[:, :, :-1, :-1]
    out = conv2d(leaky_relu(up, config.leaky_slope), params['output.weight'], params['output.bias'])
    classes = config.semantic_classes
    semantic_probs = softmax(out[:, :classes], axis=1)
    displacement = out[:, classes:]
    return semantic_probs, displacement


def semi_conv(displacement: Tensor, coords: Tensor) -> Tensor:
    """Embeddings = displacement + own pixel coordinates."""
    if displacement.shape[1:] != coords.shape[1:]:
        raise UsageError(f"displacement {displacement.shape} and coordinates {coords.shape} differ")
    return displacement + coords


# ============== Forward ==============

def iterate(image: Tensor, params: ModelParams, config: RDCNetConfig, training: bool = False,
            rng: Optional[np.random.Generator] = None, iterations: Optional[int] = None,
            heads_every_iteration: bool = True) -> Iterator[Tuple[Tensor, Tensor]]:
    """
    Yield (semantic_probs, embeddings) after each iteration.

    Only the current state is held between iterations, so a consumer that
    keeps just the latest output runs in memory independent of `iterations`.
    With `heads_every_iteration=False` only the final iteration is yielded.
    """
    iterations = config.iterations if iterations is None else iterations
    if iterations < 1:
        raise UsageError(f"iterations must be >= 1, got {iterations}")
    if image.ndim != 4 or image.shape[1] != config.in_channels:
        raise UsageError(f"image must be N x {config.in_channels} x H x W, got shape {image.shape}")
    n, _, height, width = image.shape
    s = config.scale
    if height % s or width % s:
        raise UsageError(f"image extent {height}x{width} is not divisible by scale {s}; "
                         f"pad it to a multiple of {s}")

    x_feat = stem(image, params, config)
    coords = coordinate_grid(height, width)
    y = zeros((n, config.state_channels, height // s, width // s))
    for i in range(iterations):
        y = recurrent_step(x_feat, y, params, config, training=training, rng=rng)
        if heads_every_iteration or i == iterations - 1:
            semantic_probs, displacement = heads(y, params, config)
            yield semantic_probs, semi_conv(displacement, coords)


def forward(image: Tensor, params: ModelParams, config: RDCNetConfig, training: bool = False,
            rng: Optional[np.random.Generator] = None,
            iterations: Optional[int] = None) -> List[Tuple[Tensor, Tensor]]:
    """Predictions of every iteration, first to last."""
    return list(iterate(image, params, config, training=training, rng=rng, iterations=iterations))


def infer(image: Tensor, params: ModelParams, config: RDCNetConfig,
          iterations: Optional[int] = None) -> Tuple[Tensor, Tensor]:
    """Final-iteration prediction without recording a graph."""
    last = None
    with no_grad():
        for output in iterate(image, params, config, training=False, iterations=iterations):
            last = output
    return last
