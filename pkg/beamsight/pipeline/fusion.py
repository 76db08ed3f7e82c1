"""Three-plane detector input: visual plane, rasterized beam power, zero plane."""
import os
from dataclasses import dataclass

import numpy as np
import parse

from beamsight.pipeline import logs, scene
from beamsight.pipeline._helper import pgm_bytes, split_netpbm
from beamsight.pipeline.errors import InvalidArgumentError, IOFailure

MODES = ('method1', 'method2', 'rgb')
_HEADER = 'beamsight-fused mode={mode} width={width:d} height={height:d}'
DB_RANGE = 30.0


@dataclass(frozen=True, eq=False)
class FusedImage:
    """``plane1`` uint8 visual plane, ``plane2`` power raster in [0, 1] on a 1/255 grid, ``plane3`` zeros."""
    plane1: np.ndarray
    plane2: np.ndarray
    plane3: np.ndarray
    mode: str

    @property
    def shape(self):
        return self.plane1.shape

    def as_array(self):
        """``3 x H x W`` float32 array scaled to [0, 1]."""
        return np.stack([self.plane1 / 255.0, self.plane2, self.plane3]).astype(np.float32)


def beam_column_map(cb, camera):
    """Pixel-column interval of every beam along the bottom image row.

    Each span boundary azimuth is followed along the ground from the mast foot to the point that
    images onto the bottom row; the projected column, rounded, becomes the interval edge.

    Returns:
        numpy.ndarray: ``(Q, 2)`` int array of half-open ``[start, end)`` columns within ``[0, W]``.
    """
    width, row = camera.width_px, camera.height_px
    boundaries = np.append(cb.spans[:, 0], cb.spans[-1, 1])
    edges = []
    for azimuth in boundaries:
        point = scene.ground_point_at_row(camera, float(azimuth), row)
        if point is None:
            edges.append(-np.inf if azimuth < camera.yaw else np.inf)
            continue
        u, _ = scene.project(camera, point)
        edges.append(u)
    edges = np.clip(np.rint(np.asarray(edges, dtype=np.float64)), 0, width).astype(np.int64)
    edges = np.maximum.accumulate(edges)
    colmap = np.stack([edges[:-1], edges[1:]], axis=1)
    if np.all(colmap[:, 1] <= colmap[:, 0]):
        raise InvalidArgumentError('codebook sector does not overlap the camera view')
    return colmap


def rasterize_profile(profile, colmap, height, width, scale='linear'):
    """Paint each beam's normalised power over its full column interval.

    Args:
        profile (PowerProfile): Per-beam powers.
        colmap (numpy.ndarray): Output of :func:`beam_column_map`.
        scale (:obj:`str`, optional): ``linear`` divides by the frame maximum; ``db`` maps the last
          30 dB below the maximum onto [0, 1].

    Returns:
        numpy.ndarray: ``H x W`` float plane in [0, 1].
    """
    powers = np.asarray(profile.powers, dtype=np.float64)
    plane = np.zeros((height, width))
    peak = powers.max() if len(powers) else 0.0
    if peak <= 0:
        return plane
    if scale == 'db':
        with np.errstate(divide='ignore'):
            level = 10 * np.log10(powers / peak)
        values = np.clip(1 + level / DB_RANGE, 0, 1)
    elif scale == 'linear':
        values = powers / peak
    else:
        raise InvalidArgumentError('unknown power scale {!r}'.format(scale))
    for q, (start, end) in enumerate(colmap):
        if end > start:
            plane[:, start:end] = values[q]
    return plane


def fuse(visual_plane, power_plane, mode='method1'):
    """Stack the planes; the power plane is quantized to 1/255 steps, the third plane is zero."""
    visual_plane = np.asarray(visual_plane)
    power_plane = np.asarray(power_plane, dtype=np.float64)
    if visual_plane.shape != power_plane.shape or visual_plane.ndim != 2:
        raise InvalidArgumentError('plane shapes differ: {} vs {}'.format(visual_plane.shape, power_plane.shape))
    if mode not in MODES:
        raise InvalidArgumentError('unknown mode {!r}'.format(mode))
    plane2 = np.rint(np.clip(power_plane, 0, 1) * 255) / 255
    return FusedImage(
        plane1=np.clip(visual_plane, 0, 255).astype(np.uint8),
        plane2=plane2,
        plane3=np.zeros(visual_plane.shape, dtype=np.uint8),
        mode=mode,
    )


def fused_bytes(fused):
    height, width = fused.shape
    header = _HEADER.format(mode=fused.mode, width=width, height=height) + '\n'
    planes = (fused.plane1, np.rint(fused.plane2 * 255), fused.plane3)
    return header.encode('ascii') + b''.join(pgm_bytes(p) for p in planes)


def write_fused(path, fused):
    try:
        with open(path, 'wb') as out:
            out.write(fused_bytes(fused))
    except OSError as e:
        logs.client.logger.error('Cannot write {}: {}'.format(path, e))
        raise IOFailure(str(e)) from e


def read_fused(path):
    """Read a file written by :func:`write_fused`."""
    with open(path, 'rb') as source:
        line, data = source.read().split(b'\n', 1)
    header = parse.parse(_HEADER, line.decode('ascii'))
    if header is None:
        raise IOFailure('{} is not a fused image'.format(os.path.basename(path)))
    plane1, data = split_netpbm(data, 'P5')
    plane2, data = split_netpbm(data, 'P5')
    plane3, _ = split_netpbm(data, 'P5')
    if plane1.shape != (header['height'], header['width']):
        raise IOFailure('fused header does not match plane size')
    return FusedImage(plane1=plane1, plane2=plane2 / 255, plane3=plane3, mode=header['mode'])


class Client:
    """
    Client building detector inputs for one camera and codebook.

    Args:
        camera (Camera): Scene camera.
        codebook (Codebook): Beam codebook of the array.
        id_config (IdConfig): Supplies the visual threshold and the power scale.
    """

    def __init__(self, camera, codebook, id_config):
        self.camera = camera
        self.codebook = codebook
        self.config = id_config
        self.colmap = beam_column_map(codebook, camera)

    def build(self, record, mode=None, zero_power=False):
        """Fused input for one :class:`FrameRecord`.

        Args:
            mode (:obj:`str`, optional): Visual preprocessing, defaults to the configured mode.
            zero_power (:obj:`bool`, optional): Blank the power plane (zero-channel ablation).
        """
        mode = mode or self.config.mode
        height, width = self.camera.height_px, self.camera.width_px
        visual = scene.preprocess(record.image, record.boxes, mode, record.mask, self.config.visual_threshold)
        if zero_power:
            power = np.zeros((height, width))
        else:
            power = rasterize_profile(record.profile, self.colmap, height, width, self.config.power_scale)
        return fuse(visual, power, mode)
