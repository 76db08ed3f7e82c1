import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Tuple

from beamsight.pipeline import logs
from beamsight.pipeline.errors import ConfigError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SceneConfig:
    """Street, camera and rendering parameters of one synthetic scenario.

    Distances are metres, angles degrees, speeds metres per second.
    """
    width_px: int = 256
    height_px: int = 160
    focal_px: float = 120.0
    camera_height_m: float = 8.0
    pitch_deg: float = 8.0
    yaw_deg: float = 0.0
    lane_depths_m: Tuple[float, float] = (38.0, 58.0)
    speed_range_mps: Tuple[float, float] = (5.0, 9.0)
    vehicle_length_m: Tuple[float, float] = (4.0, 5.0)
    vehicle_width_m: Tuple[float, float] = (1.7, 2.0)
    vehicle_height_m: Tuple[float, float] = (1.4, 1.8)
    n_distractors: int = 3
    min_separation_deg: float = 15.0
    crossing: bool = False
    wrap: bool = True
    pole_xs_m: Tuple[float, ...] = (-60.0, -30.0, 30.0, 60.0)
    pole_depth_m: float = 70.0
    pole_height_m: float = 28.0
    pole_gray: int = 50
    background_gray: int = 30
    noise_std: float = 4.0
    segment_noise_px: float = 0.5
    dt_s: float = 0.1
    frames_per_sequence: int = 43
    sequences: int = 40

    def __post_init__(self):
        if self.width_px < 64 or self.height_px < 64:
            raise ConfigError('image must be at least 64x64, got {}x{}'.format(self.width_px, self.height_px))
        if not 0 <= self.pitch_deg < 90:
            raise ConfigError('pitch_deg must be in [0, 90), got {}'.format(self.pitch_deg))
        if self.dt_s <= 0:
            raise ConfigError('dt_s must be positive')
        if self.noise_std < 0:
            raise ConfigError('noise_std must be non-negative')
        if self.frames_per_sequence < 1 or self.sequences < 1:
            raise ConfigError('frames_per_sequence and sequences must be positive')


@dataclass(frozen=True)
class ChannelConfig:
    m_ant: int = 64
    spacing_wavelengths: float = 0.5
    q: int = 64
    sector_deg: Tuple[float, float] = (-45.0, 45.0)
    k_subcarriers: int = 4
    sigma_sq: float = 0.0
    signal_power: float = 1.0
    los_ratio_db: float = 10.0
    zero_phases: bool = False

    def __post_init__(self):
        if self.m_ant < 1 or self.q < 1 or self.k_subcarriers < 1:
            raise ConfigError('m_ant, q and k_subcarriers must be positive')
        lo, hi = self.sector_deg
        if not -90 <= lo <= hi <= 90:
            raise ConfigError('sector_deg must lie within [-90, 90], got {}'.format(self.sector_deg))
        if self.sigma_sq < 0 or self.signal_power <= 0:
            raise ConfigError('sigma_sq must be >= 0 and signal_power > 0')

    @property
    def sector(self):
        return math.radians(self.sector_deg[0]), math.radians(self.sector_deg[1])


@dataclass(frozen=True)
class IdConfig:
    """Identification stage settings: frame count m_id, IoU threshold Z and scorer training knobs."""
    m_id: int = 5
    m_id_values: Tuple[int, ...] = (1, 3, 5)
    iou_threshold: float = 0.5
    mode: str = 'method1'
    confidence: float = 0.5
    min_area: float = 25.0
    visual_threshold: int = 72
    power_threshold: float = 0.05
    power_scale: str = 'linear'
    crop_size: int = 24
    crop_margin: int = 6
    widths: Tuple[int, int, int] = (8, 16, 32)
    epochs: int = 8
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.m_id < 1:
            raise ConfigError('m_id must be positive')
        if not 0 < self.iou_threshold <= 1:
            raise ConfigError('iou_threshold must be in (0, 1]')
        if self.mode not in ('method1', 'method2', 'rgb'):
            raise ConfigError('unknown identification mode {!r}'.format(self.mode))
        if self.power_scale not in ('linear', 'db'):
            raise ConfigError('power_scale must be linear or db')


@dataclass(frozen=True)
class TrackerConfig:
    iou_gate: float = 0.3
    max_misses: int = 5
    process_noise: float = 1.0
    measurement_noise: float = 1.0
    initial_velocity_var: float = 100.0

    def __post_init__(self):
        if not 0 < self.iou_gate < 1:
            raise ConfigError('iou_gate must be in (0, 1), got {}'.format(self.iou_gate))
        if self.max_misses < 0:
            raise ConfigError('max_misses must be >= 0')
        if self.process_noise < 0 or self.measurement_noise < 0:
            raise ConfigError('noise scales must be >= 0')


@dataclass(frozen=True)
class GeometryConfig:
    variant: str = 'fan'
    fallback_all: bool = True

    def __post_init__(self):
        if self.variant not in ('fan', 'strip'):
            raise ConfigError('variant must be fan or strip, got {!r}'.format(self.variant))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    lr_after_decay: float = 1e-4
    decay_trigger_val_acc: float = 0.59
    batch_size: int = 32
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    input_size: int = 64
    widths: Tuple[int, int, int] = (16, 32, 64)
    search_widths: Tuple[int, int] = (32, 32)
    head_widths: Tuple[int, int] = (128, 64)
    use_search: bool = True

    def __post_init__(self):
        if not self.lr > self.lr_after_decay > 0:
            raise ConfigError('need lr > lr_after_decay > 0')
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError('epochs must be >= 0 and batch_size >= 1')


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    transfer_scene: SceneConfig = field(default_factory=lambda: scenario_b())
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    identify: IdConfig = field(default_factory=IdConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split_ratio: float = 0.7
    top_n: Tuple[int, ...] = (1, 3, 5)
    seed: int = 0
    out_dir: str = 'runs'

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ConfigError('split_ratio must be in (0, 1)')
        if any(n < 1 or n > self.channel.q for n in self.top_n):
            raise ConfigError('top_n entries must be within 1..{}'.format(self.channel.q))


def scenario_a():
    """Training scenario."""
    return SceneConfig()


def scenario_b():
    """Transfer scenario: a second street seen from a higher, slightly turned camera."""
    return SceneConfig(
        camera_height_m=9.0,
        pitch_deg=9.0,
        yaw_deg=4.0,
        lane_depths_m=(40.0, 60.0),
        speed_range_mps=(4.0, 8.0),
        pole_xs_m=(-58.0, -26.0, 30.0, 62.0),
        pole_depth_m=75.0,
        sequences=12,
    )


_SECTIONS = {
    'scene': SceneConfig,
    'transfer_scene': SceneConfig,
    'channel': ChannelConfig,
    'identify': IdConfig,
    'tracker': TrackerConfig,
    'geometry': GeometryConfig,
    'train': TrainConfig,
}


def _merge(default, overrides, where):
    if not isinstance(overrides, dict):
        raise ConfigError('{} must be an object'.format(where))
    known = {f.name: f for f in dataclasses.fields(default)}
    unknown = sorted(set(overrides) - set(known))
    if unknown:
        raise ConfigError('unknown keys in {}: {}'.format(where, ', '.join(unknown)))
    values = {}
    for key, value in overrides.items():
        current = getattr(default, key)
        if isinstance(current, tuple):
            value = tuple(value)
        values[key] = value
    try:
        return dataclasses.replace(default, **values)
    except TypeError as e:
        raise ConfigError('bad value in {}: {}'.format(where, e)) from e


def config_from_dict(data):
    """Build an :class:`ExperimentConfig` from a parsed JSON document.

    Args:
        data (dict): Must carry ``"schema_version": 1``. Every other key overrides a default.

    Returns:
        ExperimentConfig

    Raises:
        ConfigError: Unknown key, wrong schema version or a value of the wrong type or range.
    """
    data = dict(data)
    version = data.pop('schema_version', None)
    if version != SCHEMA_VERSION:
        raise ConfigError('schema_version must be {}, got {!r}'.format(SCHEMA_VERSION, version))

    base = ExperimentConfig()
    values = {}
    try:
        for key, value in data.items():
            if key in _SECTIONS:
                values[key] = _merge(getattr(base, key), value, key)
            elif key in ('split_ratio', 'seed', 'out_dir', 'top_n'):
                values[key] = tuple(value) if key == 'top_n' else value
            else:
                raise ConfigError('unknown top-level key {!r}'.format(key))
        return dataclasses.replace(base, **values)
    except TypeError as e:
        raise ConfigError('bad top-level value: {}'.format(e)) from e


def load_config(path=None):
    """Read an experiment configuration file.

    Args:
        path (:obj:`str`, optional): JSON file. ``None`` returns the defaults.

    Returns:
        ExperimentConfig

    Examples:
        >>> from beamsight.pipeline import config
        >>> cfg = config.load_config('experiment.json')
        >>> cfg.channel.q
        64
    """
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as source:
            data = json.load(source)
    except (OSError, ValueError) as e:
        raise ConfigError('cannot read config {}: {}'.format(path, e)) from e
    logs.client.logger.info('Loaded config from {}'.format(path))
    return config_from_dict(data)


def scene_config_from_dict(data):
    """Rebuild a :class:`SceneConfig` from its ``dataclasses.asdict`` form."""
    return _merge(SceneConfig(), data, 'scene')


def config_to_dict(cfg):
    data = dataclasses.asdict(cfg)
    data['schema_version'] = SCHEMA_VERSION
    return data


def dump_config(cfg, path):
    with open(path, 'w') as out:
        json.dump(config_to_dict(cfg), out, indent=2, sort_keys=True)
