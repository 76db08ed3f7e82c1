import itertools
import unittest
from dataclasses import replace

import numpy as np

from beamsight.pipeline import track
from beamsight.pipeline._helper import iou
from beamsight.pipeline.config import TrackerConfig
from beamsight.pipeline.errors import TrackingLost
from beamsight.pipeline.scene import BBox
from tests.setup import setup


def tearDownModule():
    setup.cleanup()


class TestKalman(unittest.TestCase):

    def setUp(self):
        self.config = TrackerConfig()

    def test_static_predict(self):
        trk = track.Track(0, BBox(40, 30, 10, 6), self.config)
        self.assertEqual(track.predict(trk), BBox(40, 30, 10, 6))
        self.assertEqual(trk.age, 1)

    def test_velocity(self):
        trk = track.Track(0, BBox(40, 30, 10, 6), self.config)
        trk.kf.x[4, 0] = 3.0
        box = track.predict(trk)
        self.assertAlmostEqual(box.x, 43.0)
        self.assertAlmostEqual(box.y, 30.0)
        self.assertEqual((box.w, box.h), (10.0, 6.0))

    def test_update_with_prediction(self):
        trk = track.Track(0, BBox(40, 30, 10, 6), self.config)
        trk.kf.x[4, 0] = 2.0
        predicted = track.predict(trk)
        before = trk.state
        track.update(trk, predicted)
        np.testing.assert_allclose(trk.state, before, atol=1e-12)
        self.assertEqual(trk.hits, 2)
        self.assertEqual(trk.misses, 0)

    def test_zero_measurement_noise(self):
        trk = track.Track(0, BBox(40, 30, 10, 6), replace(self.config, measurement_noise=0.0))
        track.predict(trk)
        track.update(trk, BBox(47, 33, 12, 7))
        np.testing.assert_allclose(trk.state[:4], [47, 33, 12, 7], atol=1e-9)

    def test_hand_recursion(self):
        config = replace(self.config, process_noise=0.5, measurement_noise=2.0)
        trk = track.Track(0, BBox(10, 20, 8, 5), config)
        f = np.eye(6)
        f[0, 4] = f[1, 5] = 1.0
        h = np.eye(4, 6)
        q = np.diag([1.0, 1.0, 0.25, 0.25, 0.1, 0.1]) * 0.5
        r = np.eye(4) * 2.0
        x = np.array([10.0, 20.0, 8.0, 5.0, 0.0, 0.0])
        p = np.diag([10.0, 10.0, 10.0, 10.0, 100.0, 100.0])
        rng = np.random.default_rng(0)
        for step in range(1, 11):
            z = np.array([10 + 2.5 * step, 20 - step, 8, 5]) + rng.normal(0, 0.3, 4)
            x = f @ x
            p = f @ p @ f.T + q
            s = h @ p @ h.T + r
            gain = p @ h.T @ np.linalg.inv(s)
            x = x + gain @ (z - h @ x)
            p = (np.eye(6) - gain @ h) @ p
            track.predict(trk)
            track.update(trk, BBox(*z))
        np.testing.assert_allclose(trk.state, x, atol=1e-9)

    def test_covariance_stays_psd(self):
        trk = track.Track(0, BBox(50, 50, 10, 10), self.config)
        rng = np.random.default_rng(1)
        for step in range(10000):
            track.predict(trk)
            if step % 7:
                track.update(trk, BBox(50 + rng.normal(0, 1), 50 + rng.normal(0, 1), 10, 10))
        covariance = trk.covariance
        np.testing.assert_allclose(covariance, covariance.T, atol=1e-12)
        self.assertGreaterEqual(np.linalg.eigvalsh(covariance).min(), -1e-9)

    def test_extents_stay_positive(self):
        trk = track.Track(0, BBox(50, 50, 2, 2), self.config)
        trk.kf.x[2, 0] = -5.0
        box = track.predict(trk)
        self.assertGreater(box.w, 0)
        self.assertGreater(box.h, 0)


class TestAssociate(unittest.TestCase):

    def test_single_match(self):
        tracks = [track.Track(0, BBox(20, 20, 10, 10), TrackerConfig())]
        self.assertEqual(track.associate(tracks, [BBox(21, 20, 10, 10)], 0.3), ([(0, 0)], [], []))

    def test_below_gate(self):
        tracks = [track.Track(0, BBox(20, 20, 10, 10), TrackerConfig())]
        self.assertEqual(track.associate(tracks, [BBox(28, 20, 10, 10)], 0.3), ([], [0], [0]))

    def test_greedy_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            tracks = [track.Track(i, BBox(*rng.uniform(10, 30, 2), *rng.uniform(5, 15, 2)), TrackerConfig())
                      for i in range(4)]
            detections = [BBox(*rng.uniform(10, 30, 2), *rng.uniform(5, 15, 2)) for _ in range(4)]
            candidates = []
            for ti, di in itertools.product(range(4), range(4)):
                score = iou(tracks[ti].bbox, detections[di])
                if score > 0 and score >= 0.2:
                    candidates.append((ti, di, score))
            expected = []
            while candidates:
                ti, di, _ = max(candidates, key=lambda c: (c[2], -tracks[c[0]].id, -c[1]))
                expected.append((ti, di))
                candidates = [c for c in candidates if c[0] != ti and c[1] != di]
            matches, lone_tracks, lone_dets = track.associate(tracks, detections, 0.2)
            self.assertEqual(matches, expected)
            self.assertEqual(sorted(lone_tracks + [m[0] for m in matches]), list(range(4)))
            self.assertEqual(sorted(lone_dets + [m[1] for m in matches]), list(range(4)))


class TestTracker(unittest.TestCase):

    def test_ids_not_reused(self):
        tracker = track.Client(replace(TrackerConfig(), max_misses=0))
        first = tracker.step([BBox(20, 20, 10, 10)])
        tracker.step([])
        second = tracker.step([BBox(20, 20, 10, 10)])
        self.assertEqual(first, [0])
        self.assertEqual(second, [1])

    def test_seed_flags_tx(self):
        tracker = track.Client(TrackerConfig())
        tx = tracker.seed([BBox(20, 20, 10, 10), BBox(60, 20, 10, 10)], BBox(61, 21, 10, 10))
        self.assertEqual(tx.id, 1)
        self.assertIs(tracker.tx_track, tx)
        rows = tracker.rows(4)
        self.assertEqual([r['is_tx'] for r in rows], [False, True])
        self.assertEqual(rows[1], {'t': 4, 'track_id': 1, 'is_tx': True, 'bbox': [60.0, 20.0, 10.0, 10.0]})

    def test_seed_without_detections(self):
        tracker = track.Client(TrackerConfig())
        tx = tracker.seed([], BBox(5, 5, 4, 4))
        self.assertEqual(tx.bbox, BBox(5, 5, 4, 4))

    def test_static_sequence(self):
        box = BBox(40, 40, 12, 8)
        boxes = track.track_sequence([[box]] * 6, box, TrackerConfig())
        self.assertEqual(len(boxes), 5)
        for out in boxes:
            self.assertAlmostEqual(out.x, 40.0)
            self.assertAlmostEqual(out.w, 12.0)

    def test_crossing_distractors(self):
        preserved = total = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            speeds = rng.uniform(1.0, 3.0, 4) * np.array([1, -1, -1, -1])
            starts = np.array([20.0, 110.0, 100.0, 120.0]) + rng.uniform(-5, 5, 4)
            rows = np.array([60.0, 62.0, 58.0, 61.0])
            frames = []
            for t in range(60):
                frames.append([BBox(starts[i] + speeds[i] * t, rows[i], 12, 8) for i in range(4)])
            overlap = max(iou(frame[0], other) for frame in frames for other in frame[1:])
            self.assertGreaterEqual(overlap, 0.3, 'seed {}'.format(seed))
            log = []
            boxes = track.track_sequence(frames, frames[0][0], TrackerConfig(), log_rows=log)
            for t, out in enumerate(boxes, start=1):
                total += 1
                preserved += iou(out, frames[t][0]) >= 0.5
            self.assertTrue(all(r['t'] >= 1 for r in log))
        self.assertGreaterEqual(preserved / total, 0.99)

    def test_lost(self):
        box = BBox(40, 40, 12, 8)
        frames = [[box]] + [[]] * 4
        with self.assertRaises(TrackingLost) as ctx:
            track.track_sequence(frames, box, replace(TrackerConfig(), max_misses=2), start_frame=10)
        self.assertEqual(ctx.exception.frame_index, 13)
        self.assertEqual(len(ctx.exception.boxes), 2)
