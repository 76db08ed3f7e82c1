"""Constant-velocity Kalman box tracker with greedy IoU association."""
import numpy as np
from filterpy.kalman import KalmanFilter

from beamsight.pipeline import logs
from beamsight.pipeline._helper import iou
from beamsight.pipeline.errors import TrackingLost
from beamsight.pipeline.scene import BBox

MIN_EXTENT = 1e-3


class Track:
    """
    One tracked box. State is ``(cx, cy, w, h, vx, vy)`` with velocities in pixels per frame.

    Args:
        track_id (int): Identifier, unique within a tracker.
        bbox (BBox): First detection.
        config (TrackerConfig): Noise scales.
        is_tx (:obj:`bool`, optional): Whether this track carries the TX label.
    """

    def __init__(self, track_id, bbox, config, is_tx=False):
        self.id = track_id
        self.is_tx = is_tx
        self.age = 0
        self.hits = 1
        self.misses = 0

        kf = KalmanFilter(dim_x=6, dim_z=4)
        kf.F = np.eye(6)
        kf.F[0, 4] = kf.F[1, 5] = 1.0
        kf.H = np.eye(4, 6)
        kf.R = np.eye(4) * config.measurement_noise
        kf.Q = np.diag([1.0, 1.0, 0.25, 0.25, 0.1, 0.1]) * config.process_noise
        kf.P = np.diag([10.0, 10.0, 10.0, 10.0, config.initial_velocity_var, config.initial_velocity_var])
        kf.x = np.array([[bbox.x], [bbox.y], [bbox.w], [bbox.h], [0.0], [0.0]])
        self.kf = kf

    @property
    def state(self):
        return self.kf.x.reshape(-1).copy()

    @property
    def covariance(self):
        return self.kf.P.copy()

    @property
    def bbox(self):
        cx, cy, w, h = self.kf.x[:4, 0]
        return BBox(float(cx), float(cy), max(float(w), MIN_EXTENT), max(float(h), MIN_EXTENT))

    def _settle(self):
        self.kf.P = (self.kf.P + self.kf.P.T) / 2
        self.kf.x[2:4, 0] = np.maximum(self.kf.x[2:4, 0], MIN_EXTENT)


def predict(track):
    """Advance one frame: ``cx += vx``, ``cy += vy``; covariance through the linear model.

    Returns:
        BBox: The predicted box.
    """
    track.kf.predict()
    track._settle()
    track.age += 1
    return track.bbox


def update(track, detection):
    """Kalman measurement update with a matched detection box."""
    track.kf.update(np.array([[detection.x], [detection.y], [detection.w], [detection.h]]))
    track._settle()
    track.hits += 1
    track.misses = 0
    return track


def associate(tracks, detections, gate):
    """Greedy one-to-one matching in descending IoU.

    Ties are broken by the lower track id, then the lower detection index. Pairs with IoU below
    ``gate`` are never matched.

    Returns:
        tuple: ``(matches, unmatched_track_indices, unmatched_detection_indices)`` where ``matches`` is
        a list of ``(track_index, detection_index)``.
    """
    pairs = []
    for ti, track in enumerate(tracks):
        box = track.bbox
        for di, det in enumerate(detections):
            score = iou(box, det)
            if score > 0 and score >= gate:
                pairs.append((-score, track.id, di, ti))
    pairs.sort()

    matches, used_tracks, used_dets = [], set(), set()
    for _, _, di, ti in pairs:
        if ti in used_tracks or di in used_dets:
            continue
        matches.append((ti, di))
        used_tracks.add(ti)
        used_dets.add(di)
    unmatched_tracks = [i for i in range(len(tracks)) if i not in used_tracks]
    unmatched_dets = [i for i in range(len(detections)) if i not in used_dets]
    return matches, unmatched_tracks, unmatched_dets


class Client:
    """
    Multi-object tracker for one sequence.

    Args:
        config (TrackerConfig): Gate, miss budget and noise scales.

    Examples:
        >>> from beamsight.pipeline import config, track
        >>> tracker = track.Client(config.TrackerConfig())
        >>> ids = tracker.step(detections)
    """

    def __init__(self, config):
        self.config = config
        self.tracks = []
        self._next_id = 0

    def _spawn(self, bbox, is_tx=False):
        trk = Track(self._next_id, bbox, self.config, is_tx=is_tx)
        self._next_id += 1
        self.tracks.append(trk)
        return trk

    def step(self, detections):
        """Consume one frame of detections.

        Returns:
            list: The id of the track each detection was assigned to (existing or newly spawned).
        """
        for trk in self.tracks:
            predict(trk)
        matches, unmatched_tracks, unmatched_dets = associate(self.tracks, detections, self.config.iou_gate)

        assigned = [None] * len(detections)
        for ti, di in matches:
            update(self.tracks[ti], detections[di])
            assigned[di] = self.tracks[ti].id
        for ti in unmatched_tracks:
            self.tracks[ti].misses += 1
        survivors = [t for t in self.tracks if t.misses <= self.config.max_misses]
        self.tracks = survivors
        for di in unmatched_dets:
            assigned[di] = self._spawn(detections[di]).id
        return assigned

    def seed(self, detections, tx_bbox):
        """Start tracks from one frame and flag the one best overlapping ``tx_bbox`` as TX."""
        self.tracks = []
        best, best_iou = None, 0.0
        for det in detections:
            trk = self._spawn(det)
            score = iou(det, tx_bbox)
            if score > best_iou:
                best, best_iou = trk, score
        if best is None:
            best = self._spawn(tx_bbox)
        best.is_tx = True
        return best

    @property
    def tx_track(self):
        return next((t for t in self.tracks if t.is_tx), None)

    def rows(self, t):
        """JSON-lines rows describing the live tracks at frame ``t``."""
        return [{'t': int(t), 'track_id': trk.id, 'is_tx': trk.is_tx, 'bbox': trk.bbox.as_list()}
                for trk in self.tracks]


def track_sequence(detections_per_frame, tx_seed_bbox, config, start_frame=0, log_rows=None):
    """Follow the TX from an identified box through the remaining frames.

    Args:
        detections_per_frame (list): Detection boxes per frame; entry 0 is the frame where the TX was identified.
        tx_seed_bbox (BBox): TX box produced by identification.
        config (TrackerConfig): Tracker settings.
        start_frame (:obj:`int`, optional): Frame index of entry 0, used in logs and errors.
        log_rows (:obj:`list`, optional): Receives the JSON-lines track rows of every frame.

    Returns:
        list: TX box for every frame after the seed frame.

    Raises:
        TrackingLost: The TX track exceeded ``max_misses``; carries the boxes produced so far.
    """
    tracker = Client(config)
    tracker.seed(detections_per_frame[0] if detections_per_frame else [], tx_seed_bbox)
    boxes = []
    for offset, detections in enumerate(detections_per_frame[1:], start=1):
        tracker.step(list(detections))
        tx = tracker.tx_track
        if tx is None:
            frame = start_frame + offset
            logs.client.logger.info('TX track lost at frame {}'.format(frame))
            raise TrackingLost(frame, boxes)
        boxes.append(tx.bbox)
        if log_rows is not None:
            log_rows.extend(tracker.rows(start_frame + offset))
    return boxes
