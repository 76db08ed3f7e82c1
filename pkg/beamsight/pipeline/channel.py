"""mmWave downlink channel synthesis, beamforming codebook and the exhaustive beam-sweep oracle."""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd

from beamsight.pipeline import logs
from beamsight.pipeline._helper import seeded_rng
from beamsight.pipeline.errors import InvalidArgumentError, IOFailure

_HALF_PI = math.pi / 2 + 1e-12


@dataclass(frozen=True)
class AntennaArray:
    m_ant: int
    spacing_wavelengths: float = 0.5

    def __post_init__(self):
        if self.m_ant < 1:
            raise InvalidArgumentError('m_ant must be >= 1, got {}'.format(self.m_ant))
        if self.spacing_wavelengths <= 0:
            raise InvalidArgumentError('spacing_wavelengths must be > 0')


@dataclass(frozen=True, eq=False)
class Codebook:
    """Q unit-norm beams.

    ``vectors`` is ``(Q, m_ant)``; ``spans`` is ``(Q, 2)`` of half-open azimuth intervals
    (the last one closed at the sector edge).
    """
    vectors: np.ndarray
    steer_angles: np.ndarray
    spans: np.ndarray
    sector: Tuple[float, float]

    @property
    def q(self):
        return len(self.steer_angles)


@dataclass(frozen=True, eq=False)
class ChannelState:
    per_subcarrier: np.ndarray

    def __post_init__(self):
        if self.per_subcarrier.ndim != 2 or self.per_subcarrier.shape[0] < 1:
            raise InvalidArgumentError('channel needs K >= 1 subcarrier vectors')
        if not np.all(np.isfinite(self.per_subcarrier)):
            raise InvalidArgumentError('channel vectors must be finite')

    @property
    def k(self):
        return self.per_subcarrier.shape[0]


@dataclass(frozen=True)
class Path:
    azimuth: float
    gain: complex
    los: bool = False


@dataclass(frozen=True)
class PathSet:
    paths: Tuple[Path, ...]

    def __post_init__(self):
        if not self.paths:
            raise InvalidArgumentError('path set is empty')
        if sum(p.los for p in self.paths) != 1:
            raise InvalidArgumentError('exactly one path must be flagged LOS')
        if any(abs(p.azimuth) > _HALF_PI for p in self.paths):
            raise InvalidArgumentError('path azimuths must lie within [-pi/2, pi/2]')

    @property
    def los(self):
        return next(p for p in self.paths if p.los)


@dataclass(frozen=True)
class NoiseModel:
    sigma_sq: float = 0.0
    signal_power: float = 1.0

    def __post_init__(self):
        if self.sigma_sq < 0:
            raise InvalidArgumentError('sigma_sq must be >= 0')
        if self.signal_power <= 0:
            raise InvalidArgumentError('signal_power must be > 0')

    @property
    def snr_factor(self):
        """``E[|x|^2] / sigma^2``, or 1 when the model is noiseless (raw power)."""
        if self.sigma_sq == 0:
            return 1.0
        return self.signal_power / self.sigma_sq


@dataclass(frozen=True, eq=False)
class PowerProfile:
    powers: np.ndarray
    snr_linear: float = 1.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.powers)) or np.any(self.powers < 0):
            raise InvalidArgumentError('powers must be finite and >= 0')

    def __len__(self):
        return len(self.powers)


def steering_vector(array, azimuth):
    """ULA response toward ``azimuth`` (radians, broadside 0), normalised to unit norm.

    Args:
        array (AntennaArray): The array geometry.
        azimuth (float): Must satisfy ``|azimuth| <= pi/2``.

    Returns:
        numpy.ndarray: ``m_ant`` complex entries.

    Examples:
        >>> from beamsight.pipeline import channel
        >>> channel.steering_vector(channel.AntennaArray(4), 0.0)
        array([0.5+0.j, 0.5+0.j, 0.5+0.j, 0.5+0.j])
    """
    if abs(azimuth) > _HALF_PI:
        raise InvalidArgumentError('azimuth must be within [-pi/2, pi/2], got {}'.format(azimuth))
    m = np.arange(array.m_ant)
    phase = 2 * np.pi * array.spacing_wavelengths * m * np.sin(azimuth)
    return np.exp(1j * phase) / np.sqrt(array.m_ant)


def build_codebook(array, q, sector):
    """Oversampled codebook with steering sines evenly spread over the sector.

    The sine range of ``sector`` is cut into ``q`` equal cells; beam ``i`` steers at the center of
    cell ``i`` and its span is the cell mapped back to angles. Cell boundaries are therefore the
    sine-space midpoints between neighbouring steer directions.

    Args:
        array (AntennaArray): The array geometry.
        q (int): Number of beams.
        sector (tuple): ``(low, high)`` azimuths in radians within ``[-pi/2, pi/2]``.

    Returns:
        Codebook
    """
    if q < 1:
        raise InvalidArgumentError('q must be >= 1, got {}'.format(q))
    low, high = sector
    if not -_HALF_PI <= low <= high <= _HALF_PI:
        raise InvalidArgumentError('sector must satisfy -pi/2 <= low <= high <= pi/2, got {}'.format(sector))
    if q > 1 and low == high:
        raise InvalidArgumentError('a degenerate sector holds only one beam')

    s_lo, s_hi = np.sin(low), np.sin(high)
    step = (s_hi - s_lo) / q
    edges = np.clip(s_lo + step * np.arange(q + 1), -1.0, 1.0)
    sines = s_lo + step * (np.arange(q) + 0.5)

    steer = np.arcsin(sines)
    boundaries = np.arcsin(edges)
    boundaries[0], boundaries[-1] = low, high
    spans = np.stack([boundaries[:-1], boundaries[1:]], axis=1)
    vectors = np.stack([steering_vector(array, a) for a in steer])
    return Codebook(vectors=vectors, steer_angles=steer, spans=spans, sector=(float(low), float(high)))


def dft_codebook(array):
    """The orthogonal (critically sampled) DFT grid: ``m_ant`` beams over the full half-plane."""
    return build_codebook(array, array.m_ant, (-math.pi / 2, math.pi / 2))


def gram_matrix(cb):
    """Inner-product magnitudes ``|f_i^H f_j|`` between every pair of beams."""
    return np.abs(cb.vectors.conj() @ cb.vectors.T)


def _path_phases(seed, p, k, zero_phases):
    if zero_phases or p == 0:
        return np.zeros(k)
    rng = seeded_rng(seed, p)
    start = rng.uniform(0, 2 * np.pi)
    slope = rng.uniform(-0.5, 0.5)
    return start + 2 * np.pi * slope * np.arange(k)


def synth_channel(paths, array, k, rng_seed, zero_phases=False):
    """Sum of path contributions per subcarrier.

    ``h_k = sum_p gain_p * exp(i phi_{p,k}) * conj(a(azimuth_p))``. The LOS path keeps phase zero on
    every subcarrier; reflector phases follow a seeded random start and slope across subcarriers so
    they depend only on ``(rng_seed, p, k)``.

    Args:
        paths (PathSet): Paths, LOS first or anywhere.
        array (AntennaArray): The array geometry.
        k (int): Number of subcarriers K.
        rng_seed (int): Seed for the reflector phases.
        zero_phases (:obj:`bool`, optional): Use zero phase for every path and subcarrier.

    Returns:
        ChannelState
    """
    if not isinstance(paths, PathSet) or not paths.paths:
        raise InvalidArgumentError('path set is empty')
    if k < 1:
        raise InvalidArgumentError('k must be >= 1, got {}'.format(k))

    ordered = sorted(paths.paths, key=lambda p: not p.los)
    h = np.zeros((k, array.m_ant), dtype=np.complex128)
    for index, path in enumerate(ordered):
        phases = _path_phases(rng_seed, index, k, zero_phases)
        response = np.conj(steering_vector(array, path.azimuth))
        h += (path.gain * np.exp(1j * phases))[:, None] * response[None, :]
    return ChannelState(per_subcarrier=h)


def make_path_set(los_azimuth, reflector_azimuths=(), los_ratio_db=10.0, rng=None):
    """LOS path of unit gain plus one weaker reflector per azimuth.

    Reflector amplitudes are ``10^(-los_ratio_db/20) * U[0.5, 1]`` with a uniformly random phase.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    paths = [Path(azimuth=float(los_azimuth), gain=1.0 + 0j, los=True)]
    scale = 10 ** (-los_ratio_db / 20)
    for azimuth in reflector_azimuths:
        amplitude = scale * rng.uniform(0.5, 1.0)
        gain = amplitude * np.exp(1j * rng.uniform(0, 2 * np.pi))
        paths.append(Path(azimuth=float(np.clip(azimuth, -math.pi / 2, math.pi / 2)), gain=complex(gain)))
    return PathSet(paths=tuple(paths))


def received_symbol(h, f, x, noise, k, rng):
    """``y_k = h_k^T f x + v`` for subcarrier ``k`` (1-based), ``v ~ CN(0, sigma^2)``.

    The plain transpose is used, not the conjugate transpose.
    """
    if not 1 <= k <= h.k:
        raise InvalidArgumentError('k must be within 1..{}, got {}'.format(h.k, k))
    y = h.per_subcarrier[k - 1] @ np.asarray(f) * x
    if noise.sigma_sq > 0:
        scale = np.sqrt(noise.sigma_sq / 2)
        y = y + scale * (rng.standard_normal() + 1j * rng.standard_normal())
    return complex(y)


def avg_beam_power(h, f, noise):
    """``(1/K) sum_k |h_k^T f|^2`` times the SNR factor."""
    f = np.asarray(f)
    if f.shape[-1] != h.per_subcarrier.shape[1]:
        raise InvalidArgumentError('beam length {} does not match {} antennas'.format(
            f.shape[-1], h.per_subcarrier.shape[1]))
    gains = h.per_subcarrier @ f
    return float(np.mean(np.abs(gains) ** 2) * noise.snr_factor)


def power_profile(h, cb, noise):
    """Average received power of every codebook beam.

    Returns:
        PowerProfile: entry ``q`` equals ``avg_beam_power(h, cb.vectors[q], noise)``.
    """
    gains = h.per_subcarrier @ cb.vectors.T
    powers = np.mean(np.abs(gains) ** 2, axis=0) * noise.snr_factor
    return PowerProfile(powers=powers, snr_linear=noise.snr_factor)


def oracle_top_n(profile, n):
    """Indices of the ``n`` strongest beams, strongest first, ties to the lower index.

    Examples:
        >>> import numpy as np
        >>> from beamsight.pipeline import channel
        >>> channel.oracle_top_n(channel.PowerProfile(np.ones(8)), 3)
        [0, 1, 2]
    """
    powers = np.asarray(profile.powers)
    if not 1 <= n <= len(powers):
        raise InvalidArgumentError('n must be within 1..{}, got {}'.format(len(powers), n))
    order = np.argsort(-powers, kind='stable')
    return [int(i) for i in order[:n]]


def write_profiles(path, frame_ids, profiles):
    """Write one CSV row per frame: ``frame_id`` followed by Q powers at 6 significant digits."""
    if not profiles:
        raise InvalidArgumentError('no profiles to write')
    q = len(profiles[0])
    frame = pd.DataFrame(np.stack([p.powers for p in profiles]), columns=['p{}'.format(i) for i in range(q)])
    frame.insert(0, 'frame_id', list(frame_ids))
    try:
        frame.to_csv(path, index=False, float_format='%.6g')
    except OSError as e:
        logs.client.logger.error('Cannot write profiles to {}: {}'.format(path, e))
        raise IOFailure(str(e)) from e


def read_profiles(path):
    """Read a profile CSV back into ``{frame_id: PowerProfile}``."""
    frame = pd.read_csv(path, dtype={'frame_id': str})
    values = frame.drop(columns=['frame_id']).to_numpy(dtype=np.float64)
    return {fid: PowerProfile(powers=row) for fid, row in zip(frame['frame_id'], values)}


class Client:
    """
    Client bundling the array, codebook and noise model of one experiment.

    Args:
        config (ChannelConfig): Channel section of the experiment configuration.

    Examples:
        >>> from beamsight.pipeline import channel, config
        >>> client = channel.Client(config.ChannelConfig())
        >>> profile, best = client.sweep(0.1, seed=3)
    """

    def __init__(self, config):
        self.config = config
        self.array = AntennaArray(config.m_ant, config.spacing_wavelengths)
        self.codebook = build_codebook(self.array, config.q, config.sector)
        self.noise = NoiseModel(config.sigma_sq, config.signal_power)

    def sweep(self, los_azimuth, reflector_azimuths=(), seed=0):
        """Synthesize the channel for one frame and run the exhaustive sweep.

        Args:
            los_azimuth (float): TX azimuth relative to the array boresight.
            reflector_azimuths (:obj:`list`, optional): Azimuths of the reflecting objects.
            seed (int): Frame seed; drives reflector gains and subcarrier phases.

        Returns:
            tuple: ``(PowerProfile, ordered list of every beam index, strongest first)``.
        """
        paths = make_path_set(los_azimuth, reflector_azimuths, self.config.los_ratio_db, seeded_rng(seed, 1))
        h = synth_channel(paths, self.array, self.config.k_subcarriers, seed, self.config.zero_phases)
        profile = power_profile(h, self.codebook, self.noise)
        return profile, oracle_top_n(profile, self.codebook.q)

    def in_sector(self, azimuth):
        low, high = self.codebook.sector
        return low <= azimuth <= high
