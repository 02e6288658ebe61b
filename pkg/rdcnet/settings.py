"""
Run Settings
The TOML run config shared by every command: one section per component
plus `[trainer]` and `[data]`. Every hyperparameter has a named key whose
default is the published one.
"""

import logging
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 fallback with identical API
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

from rdcnet.augment import AugmentConfig
from rdcnet.decoder import DecoderConfig
from rdcnet.errors import ConfigError, DataIOError
from rdcnet.loss import LossConfig
from rdcnet.model import RDCNetConfig

logger = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    epochs: int = 30
    batch_size: int = 2
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    seed: int = 0
    checkpoint_dir: str = 'checkpoints'
    patch_size: Optional[int] = None  # None: whole image
    tune_window: bool = True  # pick decoder.window on val after training
    window_spread: int = 2

    def validate(self) -> "TrainerConfig":
        for name in ('epochs', 'batch_size'):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"must be a positive integer, got {value!r}", field=f"trainer.{name}")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}",
                              field='trainer.lr_min')
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"must be a non-negative integer, got {self.seed!r}", field='trainer.seed')
        if self.patch_size is not None and (not isinstance(self.patch_size, int) or self.patch_size < 1):
            raise ConfigError(f"must be a positive integer, got {self.patch_size!r}", field='trainer.patch_size')
        if not isinstance(self.window_spread, int) or self.window_spread < 0:
            raise ConfigError(f"must be a non-negative integer, got {self.window_spread!r}",
                              field='trainer.window_spread')
        return self


@dataclass
class DataConfig:
    image_size: int = 64
    min_instances: int = 3
    max_instances: int = 8
    radius_min: float = 4.0
    radius_max: float = 9.0
    overlap_fraction: float = 0.1
    noise_level: float = 0.02

    def validate(self) -> "DataConfig":
        if not isinstance(self.image_size, int) or self.image_size < 1:
            raise ConfigError(f"must be a positive integer, got {self.image_size!r}", field='data.image_size')
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError(f"need 1 <= min_instances <= max_instances, got "
                              f"{self.min_instances}..{self.max_instances}", field='data.min_instances')
        if not 0 < self.radius_min <= self.radius_max:
            raise ConfigError(f"need 0 < radius_min <= radius_max, got {self.radius_min}..{self.radius_max}",
                              field='data.radius_min')
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.overlap_fraction}", field='data.overlap_fraction')
        if self.noise_level < 0:
            raise ConfigError(f"must be >= 0, got {self.noise_level}", field='data.noise_level')
        return self


def _section(cls, values: Dict[str, Any], name: str):
    if not isinstance(values, dict):
        raise ConfigError(f"must be a table, got {type(values).__name__}", field=name)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", field=name)
    return cls(**values)


@dataclass
class RunConfig:
    model: RDCNetConfig = field(default_factory=RDCNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def patch_size(self) -> int:
        return self.trainer.patch_size or self.data.image_size

    def resolved_decoder(self) -> DecoderConfig:
        """Decoder settings with the voting window derived from the loss margin when unset."""
        return self.decoder.resolve(self.loss.margin)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.loss.validate()
        self.decoder.validate()
        self.augment.validate()
        self.trainer.validate()
        self.data.validate()
        self.resolved_decoder()

        scale = self.model.scale
        if self.patch_size % scale:
            raise ConfigError(f"patch_size {self.patch_size} is not divisible by model.scale {scale}",
                              field='trainer.patch_size')
        if self.data.image_size % scale:
            raise ConfigError(f"image_size {self.data.image_size} is not divisible by model.scale {scale} "
                              f"(patch_size must be a multiple of scale)", field='data.image_size')
        if self.patch_size > self.data.image_size:
            raise ConfigError(f"patch_size {self.patch_size} exceeds data.image_size {self.data.image_size}",
                              field='trainer.patch_size')
        return self

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RunConfig":
        sections = {'model', 'loss', 'decoder', 'augment', 'trainer', 'data'}
        unknown = sorted(set(values) - sections)
        if unknown:
            raise ConfigError(f"unknown section(s) {unknown}", field='config')
        try:
            return cls(
                model=RDCNetConfig.from_dict(values.get('model', {})),
                loss=_section(LossConfig, values.get('loss', {}), 'loss'),
                decoder=_section(DecoderConfig, values.get('decoder', {}), 'decoder'),
                augment=AugmentConfig.from_dict(values.get('augment', {})),
                trainer=_section(TrainerConfig, values.get('trainer', {}), 'trainer'),
                data=_section(DataConfig, values.get('data', {}), 'data'),
            )
        except TypeError as e:
            raise ConfigError(f"malformed section: {e}", field='config') from e

    def to_dict(self) -> Dict[str, Any]:
        values = {
            'model': self.model.to_dict(),
            'loss': self.loss.to_dict(),
            'decoder': self.decoder.to_dict(),
            'augment': self.augment.to_dict(),
            'trainer': asdict(self.trainer),
            'data': asdict(self.data),
        }
        if values['decoder']['window'] is None:
            del values['decoder']['window']
        if values['trainer']['patch_size'] is None:
            del values['trainer']['patch_size']
        return values


def load_run_config(path: Optional[Path] = None) -> RunConfig:
    """Parse and validate a run config; no path means all defaults."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    try:
        with path.open('rb') as f:
            values = tomllib.load(f)
    except FileNotFoundError as e:
        raise DataIOError("Run config not found", path=path) from e
    except OSError as e:
        raise DataIOError(f"Could not read run config: {e}", path=path) from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}", field='config') from e
    config = RunConfig.from_dict(values).validate()
    logger.debug(f"Loaded run config from {path}")
    return config
