"""Synthetic street scene, pinhole camera and frame rendering.

World axes: x to the right, y up, z forward along the array boresight. The camera and the
base-station array share the mast position ``(0, height_m, 0)``.
"""
import dataclasses
import math
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from beamsight.pipeline import logs
from beamsight.pipeline._helper import convex_polygon_mask, seeded_rng, write_pgm, write_ppm
from beamsight.pipeline.errors import InvalidArgumentError, InvalidStateError

VEHICLE_KINDS = ('tx', 'distractor')
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Camera:
    focal_px: float
    cx: float
    cy: float
    width_px: int
    height_px: int
    height_m: float
    pitch_down: float
    yaw: float = 0.0

    def __post_init__(self):
        if self.focal_px <= 0:
            raise InvalidArgumentError('focal_px must be > 0')
        # pitch 0 is accepted as the untilted limit
        if not 0 <= self.pitch_down < math.pi / 2:
            raise InvalidArgumentError('pitch_down must be in [0, pi/2), got {}'.format(self.pitch_down))
        if self.width_px < 64 or self.height_px < 64:
            raise InvalidArgumentError('image must be at least 64x64')

    @property
    def position(self):
        return np.array([0.0, self.height_m, 0.0])


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box by center ``(x, y)`` and extents ``(w, h)`` in pixels."""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidArgumentError('bbox extents must be positive, got {}x{}'.format(self.w, self.h))

    @classmethod
    def from_corners(cls, x0, y0, x1, y1):
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self):
        return self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2

    @property
    def area(self):
        return self.w * self.h

    def as_list(self):
        return [float(self.x), float(self.y), float(self.w), float(self.h)]


@dataclass(frozen=True)
class WorldObject:
    id: int
    kind: str
    position_m: Tuple[float, float, float]
    size_m: Tuple[float, float, float]
    velocity_mps: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    color: Tuple[int, int, int] = (200, 200, 200)

    def __post_init__(self):
        if self.kind not in VEHICLE_KINDS + ('pole',):
            raise InvalidArgumentError('unknown object kind {!r}'.format(self.kind))
        if any(s <= 0 for s in self.size_m):
            raise InvalidArgumentError('object sizes must be > 0')

    @property
    def is_vehicle(self):
        return self.kind in VEHICLE_KINDS

    def corners(self):
        center = np.asarray(self.position_m, dtype=np.float64)
        half = np.asarray(self.size_m, dtype=np.float64) / 2
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        return center + signs * half


@dataclass(frozen=True, eq=False)
class Rendered:
    """Output of :func:`render`: the image plus oracle by-products."""
    image: np.ndarray
    boxes: Tuple[Tuple[int, BBox], ...]
    mask: np.ndarray
    owner: np.ndarray


@dataclass(frozen=True, eq=False)
class FrameRecord:
    t: int
    image: np.ndarray
    boxes: Tuple[Tuple[int, BBox], ...]
    tx_id: int
    tx_azimuth: float
    profile: object
    oracle_beams: Tuple[int, ...]
    mask: Optional[np.ndarray] = None
    sequence: int = 0

    @property
    def frame_id(self):
        return '{:04d}_{:03d}'.format(self.sequence, self.t)

    @property
    def tx_box(self):
        return dict(self.boxes)[self.tx_id]

    @property
    def best_beam(self):
        return self.oracle_beams[0]


def camera_from_config(config):
    return Camera(
        focal_px=config.focal_px,
        cx=config.width_px / 2,
        cy=config.height_px / 2,
        width_px=config.width_px,
        height_px=config.height_px,
        height_m=config.camera_height_m,
        pitch_down=math.radians(config.pitch_deg),
        yaw=math.radians(config.yaw_deg),
    )


def to_camera(camera, world_point):
    """World point into camera coordinates ``(Xc, Yc, Zc)``: yaw about the mast, then pitch down."""
    x, y, z = (float(c) for c in world_point)
    y -= camera.height_m
    cos_y, sin_y = math.cos(camera.yaw), math.sin(camera.yaw)
    xr = cos_y * x - sin_y * z
    zr = sin_y * x + cos_y * z
    cos_p, sin_p = math.cos(camera.pitch_down), math.sin(camera.pitch_down)
    return xr, -y * cos_p - zr * sin_p, -y * sin_p + zr * cos_p


def project(camera, world_point):
    """Pinhole projection of a world point.

    Returns:
        tuple: ``(u, v)`` pixel coordinates, or ``None`` when the point is not in front of the camera.

    Examples:
        >>> from beamsight.pipeline import scene
        >>> cam = scene.Camera(120, 128, 80, 256, 160, 8.0, 0.0)
        >>> scene.project(cam, (0.0, 8.0, 10.0))
        (128.0, 80.0)
    """
    xc, yc, zc = to_camera(camera, world_point)
    if zc <= 1e-9:
        return None
    return camera.focal_px * xc / zc + camera.cx, camera.focal_px * yc / zc + camera.cy


def vertical_vanishing_point(camera):
    """Analytic image of the world-vertical direction; ``None`` for an untilted camera."""
    if camera.pitch_down == 0:
        return None
    return camera.cx, camera.cy + camera.focal_px / math.tan(camera.pitch_down)


def ground_point_at_row(camera, azimuth, row):
    """Ground point on the ray leaving the mast foot at ``azimuth`` that images onto ``row``.

    Returns:
        numpy.ndarray or None: ``None`` when that row lies above the horizon for this ray.
    """
    rel = azimuth - camera.yaw
    if math.cos(rel) <= 1e-9:
        return None
    k = (row - camera.cy) / camera.focal_px
    sin_p, cos_p = math.sin(camera.pitch_down), math.cos(camera.pitch_down)
    denom = sin_p + k * cos_p
    if denom <= 1e-12:
        return None
    forward = camera.height_m * (cos_p - k * sin_p) / denom
    if forward <= 0:
        return None
    distance = forward / math.cos(rel)
    return np.array([distance * math.sin(azimuth), 0.0, distance * math.cos(azimuth)])


def step_scene(objects, dt, street_half_length=None, wrap=True):
    """Advance every object by ``velocity * dt``.

    Args:
        objects (list): :class:`WorldObject` values.
        dt (float): Step in seconds, > 0.
        street_half_length (:obj:`float`, optional): Objects with ``|x|`` beyond this leave the street.
        wrap (:obj:`bool`, optional): Leaving objects re-enter at the other end; otherwise they despawn.

    Returns:
        list: The moved objects.
    """
    if dt <= 0:
        raise InvalidArgumentError('dt must be > 0, got {}'.format(dt))
    moved = []
    for obj in objects:
        position = np.asarray(obj.position_m) + np.asarray(obj.velocity_mps) * dt
        if street_half_length is not None and abs(position[0]) > street_half_length:
            if not wrap:
                continue
            position[0] -= math.copysign(2 * street_half_length, position[0])
        moved.append(dataclasses.replace(obj, position_m=tuple(float(p) for p in position)))
    return moved


def render(camera, objects, noise_std, rng=None, background=30):
    """Flat-shade every object back to front.

    Each object is drawn as the convex hull of its eight projected corners. Boxes are produced for
    vehicles only, as the tight bound of the projected footprint clipped to the image.

    Args:
        camera (Camera): Viewing camera.
        objects (list): :class:`WorldObject` values.
        noise_std (float): Std of the additive pixel noise (>= 0).
        rng (:obj:`numpy.random.Generator`, optional): Noise source.
        background (:obj:`int`, optional): Background gray level.

    Returns:
        Rendered
    """
    if noise_std < 0:
        raise InvalidArgumentError('noise_std must be >= 0')
    height, width = camera.height_px, camera.width_px
    canvas = np.full((height, width, 3), float(background))
    owner = np.full((height, width), -1, dtype=np.int64)
    boxes = []

    origin = camera.position
    ordered = sorted(objects, key=lambda o: -float(np.linalg.norm(np.asarray(o.position_m) - origin)))
    for obj in ordered:
        projected = [project(camera, c) for c in obj.corners()]
        if any(p is None for p in projected):
            continue
        points = np.asarray(projected)
        try:
            hull = points[ConvexHull(points).vertices]
        except QhullError:
            continue
        fill = convex_polygon_mask(hull, height, width)
        canvas[fill] = obj.color
        owner[fill] = obj.id

        if obj.is_vehicle:
            x0, y0 = np.maximum(points.min(axis=0), 0)
            x1, y1 = points.max(axis=0)
            x1, y1 = min(x1, width), min(y1, height)
            if x1 > x0 and y1 > y0:
                boxes.append((obj.id, BBox.from_corners(x0, y0, x1, y1)))

    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        canvas = canvas + rng.normal(0.0, noise_std, canvas.shape)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)

    vehicle_ids = [o.id for o in objects if o.is_vehicle]
    mask = np.isin(owner, vehicle_ids)
    boxes.sort(key=lambda item: item[0])
    return Rendered(image=image, boxes=tuple(boxes), mask=mask, owner=owner)


def tx_azimuth(objects, bs_pose=((0.0, 0.0, 0.0), 0.0)):
    """Azimuth of the TX centroid seen from the array, relative to its boresight.

    Args:
        objects (list): Scene objects, one of kind ``tx``.
        bs_pose (tuple): ``(position, boresight)``; boresight in radians from +z toward +x.
    """
    tx = [o for o in objects if o.kind == 'tx']
    if not tx:
        raise InvalidStateError('scene has no TX')
    position, boresight = bs_pose
    dx = tx[0].position_m[0] - position[0]
    dz = tx[0].position_m[2] - position[2]
    return math.atan2(dx, dz) - boresight


def object_azimuth(obj):
    return math.atan2(obj.position_m[0], obj.position_m[2])


def grayscale(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) @ _LUMA), 0, 255).astype(np.uint8)


def preprocess(image, boxes, mode, mask=None, threshold=72):
    """Visual plane of the detector input.

    Args:
        image (numpy.ndarray): ``H x W x 3`` frame.
        boxes (list): ``(id, BBox)`` pairs; used only by ``method1`` without an oracle mask.
        mode (str): ``rgb`` keeps a grayscale copy, ``method1`` keeps object silhouettes only
          (background and color removed), ``method2`` removes everything.
        mask (:obj:`numpy.ndarray`, optional): Oracle object mask from :func:`render`.
        threshold (:obj:`int`, optional): Gray level separating objects from background when no mask is given.

    Returns:
        numpy.ndarray: ``H x W`` uint8 plane.
    """
    height, width = image.shape[:2]
    if mode == 'method2':
        return np.zeros((height, width), dtype=np.uint8)
    if mode == 'rgb':
        return grayscale(image)
    if mode != 'method1':
        raise InvalidArgumentError('unknown preprocessing mode {!r}'.format(mode))

    if mask is None:
        bright = grayscale(image) > threshold
        mask = np.zeros((height, width), dtype=bool)
        for _, box in boxes:
            x0, y0, x1, y1 = box.corners()
            r0, c0 = max(0, int(math.floor(y0))), max(0, int(math.floor(x0)))
            r1, c1 = min(height, int(math.ceil(y1))), min(width, int(math.ceil(x1)))
            mask[r0:r1, c0:c1] |= bright[r0:r1, c0:c1]
    return np.where(mask, 255, 0).astype(np.uint8)


def pole_segments(camera, objects, noise_px=0.0, rng=None):
    """Image segments of every pole axis, from the foot to the top.

    Args:
        noise_px (:obj:`float`, optional): Std of Gaussian noise added to each endpoint.

    Returns:
        list: ``((u0, v0), (u1, v1))`` tuples.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    segments = []
    for obj in objects:
        if obj.kind != 'pole':
            continue
        x, _, z = obj.position_m
        foot = project(camera, (x, 0.0, z))
        top = project(camera, (x, obj.size_m[1], z))
        if foot is None or top is None:
            continue
        ends = np.array([foot, top], dtype=np.float64)
        if noise_px > 0:
            ends = ends + rng.normal(0.0, noise_px, ends.shape)
        segments.append((tuple(ends[0]), tuple(ends[1])))
    return segments


def annotation(record):
    return {
        'frame_id': record.frame_id,
        't': int(record.t),
        'sequence': int(record.sequence),
        'boxes': [{'id': int(i), 'x': b.x, 'y': b.y, 'w': b.w, 'h': b.h} for i, b in record.boxes],
        'tx_id': int(record.tx_id),
        'tx_azimuth': float(record.tx_azimuth),
    }


def boxes_from_annotation(row):
    return tuple((int(b['id']), BBox(b['x'], b['y'], b['w'], b['h'])) for b in row['boxes'])


def frame_seed(seed, sequence, t):
    """One integer seed per ``(seed, sequence, t)`` frame."""
    return int(np.random.SeedSequence([int(seed), int(sequence), int(t)]).generate_state(1)[0])


class Client:
    """
    Client generating the street sequences of one scenario.

    Args:
        config (SceneConfig): Scenario parameters.
        channel_client (beamsight.pipeline.channel.Client): Provides the codebook sector and the beam sweep.

    Examples:
        >>> from beamsight.pipeline import channel, config, scene
        >>> cfg = config.ExperimentConfig()
        >>> client = scene.Client(cfg.scene, channel.Client(cfg.channel))
        >>> frames = client.sequence(seed=0, sequence=0)
    """

    def __init__(self, config, channel_client):
        self.config = config
        self.channel = channel_client
        self.camera = camera_from_config(config)
        self.bs_pose = ((0.0, config.camera_height_m, 0.0), 0.0)

    def _lane_limits(self, depth):
        low, high = self.channel.codebook.sector
        return depth * math.tan(low) * 0.8, depth * math.tan(high) * 0.8

    @property
    def street_half_length(self):
        return 1.5 * max(abs(x) for d in self.config.lane_depths_m for x in self._lane_limits(d))

    def _trajectory(self, obj):
        states = [obj]
        for _ in range(self.config.frames_per_sequence - 1):
            moved = step_scene(states[-1:], self.config.dt_s, self.street_half_length, self.config.wrap)
            if not moved:
                break
            states.append(moved[0])
        return states

    def _vehicle(self, rng, obj_id, kind, lane, velocity, x):
        cfg = self.config
        length = rng.uniform(*cfg.vehicle_length_m)
        width = rng.uniform(*cfg.vehicle_width_m)
        height = rng.uniform(*cfg.vehicle_height_m)
        color = tuple(int(c) for c in rng.integers(100, 256, size=3))
        return WorldObject(
            id=obj_id, kind=kind,
            position_m=(float(x), height / 2, cfg.lane_depths_m[lane]),
            size_m=(length, height, width),
            velocity_mps=(velocity, 0.0, 0.0),
            color=color,
        )

    def _compatible(self, candidate, lane, placed, tx_path):
        min_sep = math.radians(self.config.min_separation_deg)
        path = self._trajectory(candidate)
        for other, other_lane, other_path in placed:
            if other_lane != lane:
                continue
            gap = (candidate.size_m[0] + other.size_m[0]) / 2 + 2.0
            for a, b in zip(path, other_path):
                if abs(a.position_m[0] - b.position_m[0]) < gap:
                    return False
        if self.config.crossing and candidate.velocity_mps[0] != tx_path[0].velocity_mps[0]:
            return True
        for a, b in zip(path, tx_path):
            if abs(object_azimuth(a) - object_azimuth(b)) < min_sep:
                return False
        return True

    def spawn(self, seed, sequence):
        """Deterministic initial objects of one sequence: the TX, distractors and static poles."""
        cfg = self.config
        rng = seeded_rng(seed, sequence, 7)
        frames = cfg.frames_per_sequence
        ids = [int(i) + 1 for i in rng.permutation(cfg.n_distractors + 1)]

        directions = (1.0, -1.0)
        speeds, travels = [], []
        for lane in range(2):
            low, high = self._lane_limits(cfg.lane_depths_m[lane])
            speed = rng.uniform(*cfg.speed_range_mps)
            travel = speed * cfg.dt_s * (frames - 1)
            if travel > 0.9 * (high - low):
                speed *= 0.9 * (high - low) / travel
                travel = 0.9 * (high - low)
            speeds.append(directions[lane] * speed)
            travels.append(travel)

        def start_x(lane):
            # every vehicle stays within the lane limits for the whole sequence
            low, high = self._lane_limits(cfg.lane_depths_m[lane])
            start = rng.uniform(low, high - travels[lane])
            return start + travels[lane] if speeds[lane] < 0 else start

        tx_lane = int(rng.integers(0, 2))
        tx = self._vehicle(rng, ids[0], 'tx', tx_lane, speeds[tx_lane], start_x(tx_lane))
        tx_path = self._trajectory(tx)
        placed = [(tx, tx_lane, tx_path)]

        for obj_id in ids[1:]:
            for _ in range(200):
                lane = int(rng.integers(0, 2))
                x = start_x(lane)
                if cfg.crossing and lane != tx_lane:
                    # start ahead of the TX so the two pass each other
                    ahead = math.copysign(1.0, speeds[tx_lane])
                    x = tx.position_m[0] + ahead * rng.uniform(0.3, 1.0) * travels[tx_lane] * 2
                candidate = self._vehicle(rng, obj_id, 'distractor', lane, speeds[lane], x)
                if self._compatible(candidate, lane, placed, tx_path):
                    placed.append((candidate, lane, self._trajectory(candidate)))
                    break
            else:
                logs.client.logger.debug('Sequence {}: no room for distractor {}'.format(sequence, obj_id))

        poles = [
            WorldObject(
                id=100 + i, kind='pole',
                position_m=(x, cfg.pole_height_m / 2, cfg.pole_depth_m),
                size_m=(0.4, cfg.pole_height_m, 0.4),
                color=(cfg.pole_gray,) * 3,
            )
            for i, x in enumerate(cfg.pole_xs_m)
        ]
        return [item[0] for item in placed] + poles

    def frame(self, objects, t, seed, sequence=0):
        """Render one frame and run the beam sweep for it."""
        fseed = frame_seed(seed, sequence, t)
        rendered = render(self.camera, objects, self.config.noise_std, seeded_rng(fseed, 2),
                          self.config.background_gray)
        tx = next(o for o in objects if o.kind == 'tx')
        azimuth = tx_azimuth(objects, self.bs_pose)
        if not self.channel.in_sector(azimuth):
            raise InvalidStateError('TX azimuth {:.3f} outside the codebook sector'.format(azimuth))
        if tx.id not in dict(rendered.boxes):
            raise InvalidStateError('TX is not visible in frame {} of sequence {}'.format(t, sequence))

        reflectors = [object_azimuth(o) for o in objects if o.kind == 'distractor' and o.position_m[2] > 0]
        profile, oracle = self.channel.sweep(azimuth, reflectors, fseed)
        return FrameRecord(
            t=t, image=rendered.image, boxes=rendered.boxes, tx_id=tx.id, tx_azimuth=azimuth,
            profile=profile, oracle_beams=tuple(oracle), mask=rendered.mask, sequence=sequence,
        )

    def sequence(self, seed, sequence):
        """All frames of one sequence.

        Returns:
            tuple: ``(list of FrameRecord, list of pole segments)``; every frame contributes one noisy
            segment per pole.
        """
        objects = self.spawn(seed, sequence)
        records, segments = [], []
        for t in range(self.config.frames_per_sequence):
            if t:
                objects = step_scene(objects, self.config.dt_s, self.street_half_length, self.config.wrap)
            records.append(self.frame(objects, t, seed, sequence))
            rng = seeded_rng(frame_seed(seed, sequence, t), 3)
            segments.extend(pole_segments(self.camera, objects, self.config.segment_noise_px, rng))
        return records, segments


def write_frame(directory, record):
    """Write the PPM frame and the PGM object mask of one record; return its annotation row."""
    write_ppm(os.path.join(directory, 'frames', '{}.ppm'.format(record.frame_id)), record.image)
    if record.mask is not None:
        write_pgm(os.path.join(directory, 'masks', '{}.pgm'.format(record.frame_id)),
                  np.where(record.mask, 255, 0))
    return annotation(record)
