import math
import os
import time
import unittest

import numpy as np

from beamsight.pipeline import channel
from beamsight.pipeline.config import ChannelConfig
from beamsight.pipeline.errors import InvalidArgumentError
from tests.setup import setup


def tearDownModule():
    setup.cleanup()


class TestSteering(unittest.TestCase):

    def test_broadside(self):
        a = channel.steering_vector(channel.AntennaArray(4), 0.0)
        np.testing.assert_allclose(a, 0.5 * np.ones(4))

    def test_sine_half(self):
        a = channel.steering_vector(channel.AntennaArray(2), math.pi / 6)
        np.testing.assert_allclose(a, np.array([1, 1j]) / math.sqrt(2), atol=1e-12)

    def test_elementwise(self):
        array = channel.AntennaArray(8)
        a = channel.steering_vector(array, 0.3)
        for m in range(8):
            expected = complex(math.cos(math.pi * m * math.sin(0.3)), math.sin(math.pi * m * math.sin(0.3)))
            self.assertAlmostEqual(a[m], expected / math.sqrt(8), places=12)

    def test_unit_norm(self):
        array = channel.AntennaArray(16, 0.5)
        for azimuth in np.linspace(-math.pi / 2, math.pi / 2, 41):
            self.assertAlmostEqual(np.linalg.norm(channel.steering_vector(array, azimuth)), 1.0, places=12)

    def test_out_of_range(self):
        with self.assertRaises(InvalidArgumentError):
            channel.steering_vector(channel.AntennaArray(4), 2.0)


class TestCodebook(unittest.TestCase):

    def test_partition(self):
        sector = (-math.pi / 3, math.pi / 3)
        cb = channel.build_codebook(channel.AntennaArray(64), 64, sector)
        self.assertEqual(cb.q, 64)
        np.testing.assert_allclose(np.linalg.norm(cb.vectors, axis=1), 1.0, atol=1e-12)
        self.assertTrue(np.all(np.diff(cb.steer_angles) > 0))
        self.assertAlmostEqual(cb.spans[0, 0], sector[0])
        self.assertAlmostEqual(cb.spans[-1, 1], sector[1])
        np.testing.assert_array_equal(cb.spans[1:, 0], cb.spans[:-1, 1])
        self.assertTrue(np.all((cb.spans[:, 0] <= cb.steer_angles) & (cb.steer_angles < cb.spans[:, 1])))

    def test_sine_spacing(self):
        cb = channel.build_codebook(channel.AntennaArray(8), 8, (-math.pi / 4, math.pi / 4))
        steps = np.diff(np.sin(cb.steer_angles))
        np.testing.assert_allclose(steps, steps[0], atol=1e-12)

    def test_single_beam(self):
        cb = channel.build_codebook(channel.AntennaArray(2), 1, (0.0, 0.0))
        self.assertEqual(cb.q, 1)
        self.assertEqual(cb.steer_angles[0], 0.0)
        np.testing.assert_allclose(cb.vectors[0], np.ones(2) / math.sqrt(2))

    def test_zero_beams(self):
        with self.assertRaises(InvalidArgumentError):
            channel.build_codebook(channel.AntennaArray(4), 0, (-1.0, 1.0))

    def test_oversampled_neighbours(self):
        array = channel.AntennaArray(8)
        oversampled = channel.gram_matrix(channel.build_codebook(array, 16, (-math.pi / 2, math.pi / 2)))
        orthogonal = channel.gram_matrix(channel.dft_codebook(array))
        self.assertTrue(np.all(np.diag(oversampled, 1) > np.max(np.diag(orthogonal, 1))))
        np.testing.assert_allclose(orthogonal, np.eye(8), atol=1e-12)


class TestChannel(unittest.TestCase):

    def setUp(self):
        self.array = channel.AntennaArray(8)

    def test_single_los(self):
        paths = channel.make_path_set(0.2)
        h = channel.synth_channel(paths, self.array, 1, rng_seed=0)
        np.testing.assert_allclose(h.per_subcarrier[0], np.conj(channel.steering_vector(self.array, 0.2)))

    def test_linearity(self):
        paths = channel.PathSet((channel.Path(0.1, 0.7, los=True), channel.Path(0.1, 0.2)))
        h = channel.synth_channel(paths, self.array, 3, rng_seed=4, zero_phases=True)
        expected = 0.9 * np.conj(channel.steering_vector(self.array, 0.1))
        for row in h.per_subcarrier:
            np.testing.assert_allclose(row, expected, atol=1e-12)

    def test_deterministic_phases(self):
        paths = channel.make_path_set(0.0, (0.4, -0.3), rng=np.random.default_rng(1))
        a = channel.synth_channel(paths, self.array, 4, rng_seed=9)
        b = channel.synth_channel(paths, self.array, 4, rng_seed=9)
        c = channel.synth_channel(paths, self.array, 4, rng_seed=10)
        np.testing.assert_array_equal(a.per_subcarrier, b.per_subcarrier)
        self.assertFalse(np.allclose(a.per_subcarrier, c.per_subcarrier))

    def test_reflector_profile_matches_summation(self):
        paths = channel.make_path_set(0.1, (-0.5,), rng=np.random.default_rng(3))
        h = channel.synth_channel(paths, self.array, 4, rng_seed=5)
        cb = channel.build_codebook(self.array, 16, (-math.pi / 4, math.pi / 4))
        profile = channel.power_profile(h, cb, channel.NoiseModel())
        for q in range(cb.q):
            total = 0.0
            for k in range(4):
                total += abs(sum(h.per_subcarrier[k, m] * cb.vectors[q, m] for m in range(8))) ** 2
            self.assertAlmostEqual(profile.powers[q], total / 4, places=12)

    def test_empty_paths(self):
        with self.assertRaises(InvalidArgumentError):
            channel.PathSet(())

    def test_received_symbol(self):
        f = channel.steering_vector(self.array, 0.3)
        h = channel.ChannelState(np.conj(f)[None, :])
        noiseless = channel.NoiseModel(0.0)
        rng = np.random.default_rng(0)
        self.assertAlmostEqual(channel.received_symbol(h, f, 1.0, noiseless, 1, rng), 1.0, places=12)
        self.assertEqual(channel.received_symbol(h, f, 0.0, noiseless, 1, rng), 0.0)
        with self.assertRaises(InvalidArgumentError):
            channel.received_symbol(h, f, 1.0, noiseless, 2, rng)

    def test_received_noise_variance(self):
        f = channel.steering_vector(self.array, 0.0)
        h = channel.ChannelState(np.conj(f)[None, :])
        noise = channel.NoiseModel(sigma_sq=0.25)
        rng = np.random.default_rng(11)
        errors = [abs(channel.received_symbol(h, f, 1.0, noise, 1, rng) - 1.0) ** 2 for _ in range(100000)]
        self.assertAlmostEqual(np.mean(errors) / 0.25, 1.0, delta=0.03)

    def test_avg_beam_power(self):
        f = channel.steering_vector(self.array, 0.2)
        h = channel.ChannelState(np.tile(np.conj(f), (3, 1)))
        self.assertAlmostEqual(channel.avg_beam_power(h, f, channel.NoiseModel()), 1.0, places=12)
        cb = channel.dft_codebook(self.array)
        h = channel.ChannelState(np.tile(np.conj(cb.vectors[2]), (2, 1)))
        self.assertAlmostEqual(channel.avg_beam_power(h, cb.vectors[5], channel.NoiseModel()), 0.0, places=12)

    def test_avg_beam_power_loop(self):
        rng = np.random.default_rng(2)
        h = channel.ChannelState(rng.normal(size=(4, 8)) + 1j * rng.normal(size=(4, 8)))
        f = rng.normal(size=8) + 1j * rng.normal(size=8)
        noise = channel.NoiseModel(sigma_sq=0.5, signal_power=2.0)
        expected = sum(abs(sum(h.per_subcarrier[k, m] * f[m] for m in range(8))) ** 2 for k in range(4)) / 4 * 4.0
        self.assertAlmostEqual(channel.avg_beam_power(h, f, noise), expected, delta=1e-12 * expected)

    def test_indicator_profile(self):
        cb = channel.dft_codebook(self.array)
        h = channel.ChannelState(np.conj(cb.vectors[3])[None, :])
        profile = channel.power_profile(h, cb, channel.NoiseModel())
        expected = np.zeros(8)
        expected[3] = 1.0
        np.testing.assert_allclose(profile.powers, expected, atol=1e-12)

    def test_zero_channel(self):
        cb = channel.dft_codebook(self.array)
        profile = channel.power_profile(channel.ChannelState(np.zeros((2, 8), dtype=complex)), cb,
                                        channel.NoiseModel())
        self.assertEqual(profile.powers.sum(), 0.0)


class TestOracle(unittest.TestCase):

    def test_indicator(self):
        powers = np.zeros(16)
        powers[9] = 1.0
        self.assertEqual(channel.oracle_top_n(channel.PowerProfile(powers), 1), [9])

    def test_ties(self):
        self.assertEqual(channel.oracle_top_n(channel.PowerProfile(np.ones(8)), 3), [0, 1, 2])

    def test_sort_oracle(self):
        powers = np.random.default_rng(5).random(64)
        expected = sorted(range(64), key=lambda i: (-powers[i], i))[:5]
        self.assertEqual(channel.oracle_top_n(channel.PowerProfile(powers), 5), expected)

    def test_scale_invariance(self):
        powers = np.random.default_rng(6).random(32)
        self.assertEqual(channel.oracle_top_n(channel.PowerProfile(powers), 5),
                         channel.oracle_top_n(channel.PowerProfile(powers * 37.5), 5))

    def test_range(self):
        with self.assertRaises(InvalidArgumentError):
            channel.oracle_top_n(channel.PowerProfile(np.ones(4)), 5)
        with self.assertRaises(InvalidArgumentError):
            channel.oracle_top_n(channel.PowerProfile(np.ones(4)), 0)

    def test_nearest_steer_angle(self):
        client = channel.Client(ChannelConfig())
        sines = np.sin(client.codebook.steer_angles)
        low, high = client.codebook.sector
        rng = np.random.default_rng(0)
        started = time.perf_counter()
        for trial in range(1000):
            azimuth = rng.uniform(low, high)
            _, order = client.sweep(azimuth, seed=trial)
            distance = np.abs(sines - math.sin(azimuth))
            nearest = np.argsort(distance, kind='stable')
            if abs(distance[nearest[0]] - distance[nearest[1]]) < 1e-12:
                continue
            self.assertEqual(order[0], nearest[0])
        self.assertLess(time.perf_counter() - started, 5.0)


class TestProfilesFile(unittest.TestCase):

    def test_write_and_read(self):
        path = os.path.join(setup.scratch('channel'), 'profiles.csv')
        profiles = [channel.PowerProfile(np.array([0.5, 0.25, 1.0 / 3])), channel.PowerProfile(np.zeros(3))]
        channel.write_profiles(path, ['0000_000', '0000_001'], profiles)
        with open(path) as source:
            self.assertEqual(source.readline().strip(), 'frame_id,p0,p1,p2')
            self.assertEqual(source.readline().strip(), '0000_000,0.5,0.25,0.333333')
        read = channel.read_profiles(path)
        self.assertEqual(sorted(read), ['0000_000', '0000_001'])
        np.testing.assert_allclose(read['0000_000'].powers, [0.5, 0.25, 0.333333])

    def test_write_empty(self):
        with self.assertRaises(InvalidArgumentError):
            channel.write_profiles(os.path.join(setup.scratch('channel'), 'empty.csv'), [], [])
