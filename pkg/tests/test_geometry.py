import math
import unittest
import xml.etree.ElementTree as ET
from dataclasses import replace

import numpy as np

from beamsight.pipeline import channel, fusion, geometry, harness, scene
from beamsight.pipeline.config import GeometryConfig
from beamsight.pipeline.errors import (DegenerateGeometryError, EmptySearchSpaceError, InvalidArgumentError,
                                       NoVanishingPointError)
from beamsight.pipeline.scene import BBox
from tests.setup import setup


def tearDownModule():
    setup.cleanup()


def _poles(xs, depth, height):
    return [scene.WorldObject(100 + i, 'pole', (x, height / 2, depth), (0.4, height, 0.4)) for i, x in enumerate(xs)]


def _inside(polygon, u, v):
    """Sign-of-cross-product membership of point ``(u, v)`` in a convex polygon, edges included."""
    signs = []
    for (ax, ay), (bx, by) in zip(polygon, polygon[1:] + polygon[:1]):
        signs.append((bx - ax) * (v - ay) - (by - ay) * (u - ax))
    return all(s >= -1e-9 for s in signs) or all(s <= 1e-9 for s in signs)


class TestVanishingPoint(unittest.TestCase):

    def test_exact_intersection(self):
        vp = geometry.estimate_vp([((50, -100), (50, 100)), ((0, 0), (100, -400))])
        self.assertAlmostEqual(vp.x, 50.0, places=9)
        self.assertAlmostEqual(vp.y, -200.0, places=9)
        self.assertAlmostEqual(vp.residual, 0.0, places=12)

    def test_camera_pitch(self):
        camera = setup.camera(pitch_deg=10.0)
        segments = scene.pole_segments(camera, _poles((-60, -30, 30, 60), 70.0, 28.0))
        vp = geometry.estimate_vp(segments)
        expected = scene.vertical_vanishing_point(camera)
        self.assertLess(math.hypot(vp.x - expected[0], vp.y - expected[1]), 2.0)

    def test_noisy_segments(self):
        camera = setup.camera(pitch_deg=25.0)
        poles = _poles(np.linspace(-24, 24, 8), 30.0, 12.0)
        ex, ey = scene.vertical_vanishing_point(camera)
        for seed in range(100):
            rng = np.random.default_rng(seed)
            segments = []
            for _ in range(20):
                segments += scene.pole_segments(camera, poles, noise_px=0.5, rng=rng)
            vp = geometry.estimate_vp(segments)
            self.assertLess(math.hypot(vp.x - ex, vp.y - ey), 10.0, 'seed {}'.format(seed))

    def test_translation_equivariance(self):
        rng = np.random.default_rng(3)
        segments = [((rng.uniform(0, 200), rng.uniform(0, 100)), (rng.uniform(0, 200), rng.uniform(0, 100)))
                    for _ in range(6)]
        shifted = [((a + 13.5, b - 7.25), (c + 13.5, d - 7.25)) for (a, b), (c, d) in segments]
        vp, moved = geometry.estimate_vp(segments), geometry.estimate_vp(shifted)
        self.assertAlmostEqual(moved.x - vp.x, 13.5, places=6)
        self.assertAlmostEqual(moved.y - vp.y, -7.25, places=6)
        self.assertGreaterEqual(vp.residual, 0.0)

    def test_parallel(self):
        with self.assertRaises(NoVanishingPointError):
            geometry.estimate_vp([((10, 0), (10, 50)), ((40, 0), (40, 80)), ((90, 5), (90, 60))])

    def test_too_few(self):
        with self.assertRaises(InvalidArgumentError):
            geometry.estimate_vp([((10, 0), (10, 50)), ((3, 3), (3, 3))])


class TestRegions(unittest.TestCase):

    def setUp(self):
        self.camera = setup.camera()
        cb = channel.build_codebook(channel.AntennaArray(64), 64, (-math.pi / 4, math.pi / 4))
        self.colmap = fusion.beam_column_map(cb, self.camera)
        self.vp = geometry.VanishingPoint(*scene.vertical_vanishing_point(self.camera), residual=0.0)
        self.height, self.width = self.camera.height_px, self.camera.width_px

    def test_strip(self):
        region = geometry.beam_region_strip(0, np.array([[10, 20]]), 160)
        self.assertEqual(region.polygon, ((10.0, 0.0), (20.0, 0.0), (20.0, 160.0), (10.0, 160.0)))
        mask = geometry.region_mask(region, 160, 256)
        self.assertEqual(set(np.flatnonzero(mask.any(axis=0))), set(range(10, 20)))
        self.assertTrue(mask[:, 10].all())

    def test_strip_partition(self):
        regions = [geometry.beam_region_strip(q, self.colmap, self.height) for q in range(64)]
        for left, right in zip(regions, regions[1:]):
            self.assertEqual(left.polygon[1], right.polygon[0])
            self.assertEqual(left.polygon[2], right.polygon[3])
        masks = [geometry.region_mask(r, self.height, self.width) for r in regions]
        union = np.logical_or.reduce(masks)
        self.assertEqual(int(union.sum()), int(sum(m.sum() for m in masks)))
        self.assertEqual(int(union.sum()), int((self.colmap[-1, 1] - self.colmap[0, 0]) * self.height))

    def test_fan_limit(self):
        distances = []
        for far in (1e3, 1e5, 1e7, 1e9):
            fan = geometry.beam_region_fan(20, self.colmap, (self.camera.cx, far), self.height)
            strip = geometry.beam_region_strip(20, self.colmap, self.height)
            distances.append(max(math.hypot(a[0] - b[0], a[1] - b[1])
                                 for a, b in zip(fan.polygon, strip.polygon[::-1])))
        self.assertTrue(all(b < a for a, b in zip(distances, distances[1:])))
        self.assertLess(distances[-1], 1e-4)

    def test_fan_without_vp(self):
        self.assertEqual(geometry.beam_region_fan(3, self.colmap, None, self.height).variant, 'strip')

    def test_degenerate(self):
        with self.assertRaises(DegenerateGeometryError):
            geometry.beam_region_fan(3, self.colmap, (128.0, 90.0), self.height)

    def test_adjacent_fans(self):
        left = geometry.beam_region_fan(30, self.colmap, self.vp, self.height)
        right = geometry.beam_region_fan(31, self.colmap, self.vp, self.height)
        self.assertEqual(left.polygon[1], right.polygon[0])
        self.assertEqual(left.polygon[2], right.polygon[3])
        overlap = geometry.region_mask(left, self.height, self.width) & geometry.region_mask(right, self.height,
                                                                                            self.width)
        self.assertLessEqual(int(overlap.sum()), self.height)

    def test_membership_oracle(self):
        rng = np.random.default_rng(7)
        for q in (0, 17, 40, 63):
            region = geometry.beam_region_fan(q, self.colmap, self.vp, self.height)
            mask = geometry.region_mask(region, self.height, self.width)
            for _ in range(300):
                i, j = int(rng.integers(0, self.height)), int(rng.integers(0, self.width))
                self.assertEqual(bool(mask[i, j]), _inside(list(region.polygon), j + 0.5, i + 0.5), (q, i, j))


class TestIsolate(unittest.TestCase):

    def test_full_image(self):
        image = np.random.default_rng(0).integers(1, 256, size=(64, 80, 3), dtype=np.uint8)
        np.testing.assert_array_equal(geometry.isolate_tx(image, BBox(40, 32, 80, 64)), image)

    def test_outside(self):
        with self.assertRaises(InvalidArgumentError):
            geometry.isolate_tx(np.ones((64, 80, 3), np.uint8), BBox(200, 200, 10, 10))

    def test_pixel_oracle(self):
        rng = np.random.default_rng(1)
        image = np.full((64, 80, 3), 9, np.uint8)
        for _ in range(50):
            box = BBox(rng.uniform(-10, 90), rng.uniform(-10, 70), rng.uniform(2, 40), rng.uniform(2, 40))
            x0, y0, x1, y1 = box.corners()
            cols, rows = np.arange(80) + 0.5, np.arange(64) + 0.5
            expected = ((rows >= y0) & (rows <= y1))[:, None] & ((cols >= x0) & (cols <= x1))[None, :]
            if not expected.any():
                continue
            isolated = geometry.isolate_tx(image, box)
            np.testing.assert_array_equal(isolated.any(axis=2), expected)


class TestReduce(unittest.TestCase):

    def setUp(self):
        camera = setup.camera()
        cb = channel.build_codebook(channel.AntennaArray(64), 64, (-math.pi / 4, math.pi / 4))
        self.colmap = fusion.beam_column_map(cb, camera)
        vp = geometry.VanishingPoint(*scene.vertical_vanishing_point(camera), residual=0.0)
        self.height, self.width = camera.height_px, camera.width_px
        self.regions = [geometry.beam_region_fan(q, self.colmap, vp, self.height) for q in range(64)]
        self.wide = int(np.argmax(self.colmap[:63, 1] - self.colmap[:63, 0]))

    def test_inside_one_fan(self):
        start, end = self.colmap[self.wide]
        isolated = np.zeros((self.height, self.width), np.uint8)
        isolated[self.height - 1, (start + end) // 2] = 200
        space = geometry.reduce_search_space(isolated, self.regions, t=3)
        self.assertEqual(space.popcount, 1)
        self.assertTrue(space.bits[self.wide])
        self.assertEqual(space.t, 3)

    def test_straddling(self):
        _, end = self.colmap[self.wide]
        isolated = np.zeros((self.height, self.width, 3), np.uint8)
        isolated[self.height - 1, end - 1:end + 1] = 50
        space = geometry.reduce_search_space(isolated, self.regions)
        self.assertEqual(np.flatnonzero(space.bits).tolist(), [self.wide, self.wide + 1])

    def test_empty(self):
        with self.assertRaises(EmptySearchSpaceError):
            geometry.reduce_search_space(np.zeros((self.height, self.width), np.uint8), self.regions)

    def test_brute_force(self):
        rng = np.random.default_rng(11)
        checked = 0
        for _ in range(500):
            isolated = np.zeros((self.height, self.width), np.uint8)
            r, c = int(rng.integers(0, self.height - 8)), int(rng.integers(0, self.width - 12))
            isolated[r:r + int(rng.integers(1, 8)), c:c + int(rng.integers(1, 12))] = 1
            rows, cols = np.nonzero(isolated)
            expected = np.array([any(_inside(list(region.polygon), j + 0.5, i + 0.5) for i, j in zip(rows, cols))
                                 for region in self.regions])
            if not expected.any():
                with self.assertRaises(EmptySearchSpaceError):
                    geometry.reduce_search_space(isolated, self.regions)
                continue
            np.testing.assert_array_equal(geometry.reduce_search_space(isolated, self.regions).bits, expected)
            checked += 1
        self.assertGreater(checked, 250)

    def test_rates(self):
        spaces = [geometry.SearchSpace(np.array([True, False, False, False])),
                  geometry.SearchSpace(np.array([True, True, False, False]))]
        self.assertEqual(geometry.containment_rate(spaces, [0, 3]), 0.5)
        self.assertEqual(geometry.reduction_factor(spaces), 0.375)
        with self.assertRaises(InvalidArgumentError):
            geometry.containment_rate([], [])
        with self.assertRaises(InvalidArgumentError):
            geometry.reduction_factor([])

    def test_row(self):
        space = geometry.SearchSpace(np.array([False, True, True, False]), t=7)
        self.assertEqual(geometry.search_space_row(space), {'t': 7, 'bits': '0110'})
        self.assertEqual(geometry.search_space_row(space, '0001_007')['frame_id'], '0001_007')

    def test_overlay(self):
        vp = geometry.VanishingPoint(128.0, 200.0, 0.0)
        svg = geometry.overlay_svg(self.regions[:8], self.width, self.height, BBox(60, 120, 10, 8), vp)
        root = ET.fromstring(svg)
        self.assertTrue(root.tag.endswith('svg'))
        polygons = [e for e in root.iter() if e.tag.endswith('polygon')]
        self.assertEqual(len(polygons), 8)
        self.assertEqual(len([e for e in root.iter() if e.tag.endswith('circle')]), 1)


class TestClient(unittest.TestCase):

    def setUp(self):
        self.camera = setup.camera()
        cb = channel.build_codebook(channel.AntennaArray(16), 16, (-math.pi / 4, math.pi / 4))
        self.colmap = fusion.beam_column_map(cb, self.camera)
        self.client = geometry.Client(self.camera, self.colmap, GeometryConfig())

    def test_calibrate(self):
        segments = scene.pole_segments(self.camera, _poles((-60, -30, 30, 60), 70.0, 28.0))
        vp = self.client.calibrate(segments)
        expected = scene.vertical_vanishing_point(self.camera)
        self.assertLess(math.hypot(vp.x - expected[0], vp.y - expected[1]), 2.0)
        self.assertEqual({r.variant for r in self.client.regions()}, {'fan'})
        self.assertEqual({r.variant for r in self.client.regions('strip')}, {'strip'})

    def test_untilted_falls_back(self):
        level = setup.camera(pitch_deg=0.0)
        self.assertIsNone(self.client.calibrate(scene.pole_segments(level, _poles((-30, 30), 70.0, 28.0))))
        self.assertEqual({r.variant for r in self.client.regions('fan')}, {'strip'})

    def test_unknown_variant(self):
        with self.assertRaises(InvalidArgumentError):
            self.client.regions('cone')

    def test_search_space(self):
        image = np.zeros((self.camera.height_px, self.camera.width_px, 3), np.uint8)
        start, end = self.colmap[8]
        image[150:158, start:end] = 180
        space = self.client.search_space(image, BBox.from_corners(start, 150, end, 158), t=2, variant='strip')
        self.assertTrue(space.bits[8])
        self.assertEqual(space.t, 2)

    def test_fallback(self):
        image = np.zeros((self.camera.height_px, self.camera.width_px, 3), np.uint8)
        space = self.client.search_space(image, BBox(100, 100, 10, 10))
        self.assertTrue(space.bits.all())
        strict = geometry.Client(self.camera, self.colmap, replace(GeometryConfig(), fallback_all=False))
        with self.assertRaises(EmptySearchSpaceError):
            strict.search_space(image, BBox(100, 100, 10, 10))


class TestContainment(unittest.TestCase):

    def test_fan_on_tilted_camera(self):
        dataset = setup.dataset('b')
        stages = harness.build_stages(dataset, setup.experiment)
        self.assertIsNotNone(stages.geometry.vp)
        records = dataset.records
        rates = {}
        for variant in geometry.VARIANTS:
            _, spaces = harness.beam_inputs(stages, records, [r.tx_box for r in records], variant)
            rates[variant] = geometry.containment_rate(spaces, [r.best_beam for r in records])
        self.assertGreaterEqual(rates['fan'], 0.99)
        self.assertGreaterEqual(rates['fan'], rates['strip'])
