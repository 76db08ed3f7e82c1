"""Dataset generation, experiment orchestration, end-to-end evaluation, ablations and reports."""
import dataclasses
import json
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Tuple

import ndjson
import numpy as np
import pandas as pd
from jinja2 import Template
from scipy import stats

from beamsight.pipeline import beamnet, channel, fusion, geometry, identify, logs, scene, track
from beamsight.pipeline._helper import iou, read_pgm, read_ppm, seeded_rng, worker_count
from beamsight.pipeline.config import SceneConfig, scene_config_from_dict
from beamsight.pipeline.errors import (EmptySearchSpaceError, IdentificationFailure, InvalidArgumentError,
                                       InvalidStateError, IOFailure, TrackingLost)

SCENARIOS = ('a', 'b')
ABLATIONS = ('1', '2', '3', 'id-rgb', 'id-zero')
_TOP = re.compile(r'^(?P<head>.*)top(?P<n>\d+)(?P<tail>.*)$')

_BARS = Template("""<svg xmlns="http://www.w3.org/2000/svg" width="{{ width }}" height="{{ height }}" \
viewBox="0 0 {{ width }} {{ height }}">
  <rect x="0" y="0" width="{{ width }}" height="{{ height }}" fill="#ffffff"/>
  <text x="8" y="18" font-family="sans-serif" font-size="13">{{ title }}</text>
{%- for bar in bars %}
  <text x="8" y="{{ bar.y + 10 }}" font-family="sans-serif" font-size="10">{{ bar.label }}</text>
  <rect x="{{ left }}" y="{{ bar.y }}" width="{{ bar.w }}" height="12" fill="{{ bar.fill }}"/>
  <text x="{{ left + bar.w + 4 }}" y="{{ bar.y + 10 }}" font-family="sans-serif" font-size="10">{{ bar.text }}</text>
{%- endfor %}
</svg>
""")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Frames of one scenario with their split assignment.

    Args:
        directory (str): Where the dataset lives on disk.
        scenario (str): ``a`` (training street) or ``b`` (transfer street).
        scene_config (SceneConfig): Scene the frames were rendered from.
        records (tuple): :class:`FrameRecord` values ordered by ``(sequence, t)``.
        split (dict): ``{frame_id: 'train' | 'test'}``.
        segments (tuple): Pole axis segments for vanishing-point calibration.
    """
    directory: str
    scenario: str
    scene_config: SceneConfig
    records: Tuple[scene.FrameRecord, ...]
    split: Dict[str, str]
    segments: Tuple = ()

    def frames(self, split=None):
        return [r for r in self.records if split is None or self.split[r.frame_id] == split]

    def sequences(self):
        grouped = {}
        for record in self.records:
            grouped.setdefault(record.sequence, []).append(record)
        return [sorted(frames, key=lambda r: r.t) for _, frames in sorted(grouped.items())]


@dataclass(frozen=True, eq=False)
class Stages:
    """Camera-bound stage clients shared by every evaluation of one dataset."""
    camera: scene.Camera
    fusion: fusion.Client
    geometry: geometry.Client


@dataclass(frozen=True, eq=False)
class Models:
    identifier: object
    beam: object


@dataclass
class MetricsReport:
    """Evaluation results.

    ``rates`` hold fractions in [0, 1], ``values`` hold counts and other unbounded figures and
    ``ablations`` maps an ablation name to its own rates.
    """
    rates: Dict[str, float] = field(default_factory=dict)
    values: Dict[str, float] = field(default_factory=dict)
    ablations: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def validate(self):
        """Reject rates outside [0, 1] and top-N rates that shrink as N grows."""
        groups = [('', self.rates)] + [('ablation {} '.format(k), v) for k, v in sorted(self.ablations.items())]
        for where, rates in groups:
            series = {}
            for name, value in rates.items():
                if not (isinstance(value, (int, float)) and 0.0 <= value <= 1.0):
                    raise InvalidArgumentError('{}rate {} = {!r} is outside [0, 1]'.format(where, name, value))
                match = _TOP.match(name)
                if match:
                    series.setdefault((match['head'], match['tail']), []).append((int(match['n']), value))
            for (head, tail), points in series.items():
                ordered = [v for _, v in sorted(points)]
                if any(b < a for a, b in zip(ordered, ordered[1:])):
                    raise InvalidArgumentError('{}{}topN{} is not monotone in N'.format(where, head, tail))
        return self

    def merged(self, other, prefix=''):
        """A new report holding this report's entries plus ``other``'s, whose keys get ``prefix``."""
        rates = dict(self.rates)
        rates.update({prefix + k: v for k, v in other.rates.items()})
        values = dict(self.values)
        values.update({prefix + k: v for k, v in other.values.items()})
        ablations = dict(self.ablations)
        ablations.update(other.ablations)
        return MetricsReport(rates=rates, values=values, ablations=ablations)

    def as_dict(self):
        return {
            'rates': dict(sorted(self.rates.items())),
            'values': dict(sorted(self.values.items())),
            'ablations': {k: dict(sorted(v.items())) for k, v in sorted(self.ablations.items())},
        }

    @classmethod
    def from_dict(cls, data):
        return cls(rates=dict(data.get('rates', {})), values=dict(data.get('values', {})),
                   ablations={k: dict(v) for k, v in data.get('ablations', {}).items()})

    def rows(self):
        rows = [{'section': 'rates', 'name': k, 'value': v} for k, v in sorted(self.rates.items())]
        rows += [{'section': 'values', 'name': k, 'value': v} for k, v in sorted(self.values.items())]
        for which, rates in sorted(self.ablations.items()):
            rows += [{'section': 'ablation:' + which, 'name': k, 'value': v} for k, v in sorted(rates.items())]
        return rows


def scenario_config(config, scenario):
    if scenario == 'a':
        return config.scene
    if scenario == 'b':
        return config.transfer_scene
    raise InvalidArgumentError('unknown scenario {!r}'.format(scenario))


def split_by_beam(records, ratio, seed):
    """Per-best-beam train/test assignment.

    Every beam class is split at ``ratio`` with the largest-remainder rule so the overall training
    count is ``round(ratio * N)``; classes holding a single frame send it to training first.

    Returns:
        dict: ``{frame_id: 'train' | 'test'}``.
    """
    by_beam = {}
    for record in records:
        by_beam.setdefault(int(record.best_beam), []).append(record.frame_id)
    classes = sorted(by_beam)
    exact = {c: ratio * len(by_beam[c]) for c in classes}
    quota = {c: int(math.floor(exact[c])) for c in classes}
    leftover = int(round(ratio * len(records))) - sum(quota.values())
    for c in sorted(classes, key=lambda c: (quota[c] > 0, -(exact[c] - quota[c]), c))[:max(leftover, 0)]:
        quota[c] += 1
    for c in classes:
        if quota[c] == 0:
            donor = max(classes, key=lambda d: (quota[d], -d))
            if quota[donor] > 1:
                quota[donor] -= 1
                quota[c] += 1

    rng = seeded_rng(seed, 11)
    split = {}
    for c in classes:
        ids = sorted(by_beam[c])
        for i, index in enumerate(rng.permutation(len(ids))):
            split[ids[index]] = 'train' if i < quota[c] else 'test'
    return split


def _write_jsonl(path, rows):
    try:
        with open(path, 'w') as out:
            ndjson.dump(rows, out)
    except OSError as e:
        logs.client.logger.error('Cannot write {}: {}'.format(path, e))
        raise IOFailure(str(e)) from e


def _read_jsonl(path):
    with open(path) as source:
        return ndjson.load(source)


def generate_dataset(config, seed, out, scenario='a'):
    """Render every sequence of one scenario and write it under ``out/<scenario>``.

    Layout: ``frames/<id>.ppm``, ``masks/<id>.pgm``, ``annotations.jsonl``, ``oracle.jsonl`` (full beam
    order per frame), ``profiles.csv``, ``segments.jsonl``, ``manifest.csv`` (``frame_id, sequence,
    t, best_beam, split``) and ``dataset.json``. Sequences are rendered in parallel and merged in
    sequence order.

    Args:
        config (ExperimentConfig): Experiment configuration.
        seed (int): Dataset seed.
        out (str): Parent output directory.
        scenario (:obj:`str`, optional): ``a`` or ``b``.

    Returns:
        Dataset

    Raises:
        IOFailure: The output directory is not writable.
    """
    scene_cfg = scenario_config(config, scenario)
    directory = os.path.join(out, scenario)
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        logs.client.logger.error('Cannot create {}: {}'.format(directory, e))
        raise IOFailure(str(e)) from e

    scene_client = scene.Client(scene_cfg, channel.Client(config.channel))

    def build(sequence):
        records, segments = scene_client.sequence(seed, sequence)
        rows = [scene.write_frame(directory, r) for r in records]
        return records, segments, rows

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(build, range(scene_cfg.sequences)))

    records, annotations, segment_rows = [], [], []
    for sequence, (recs, segments, rows) in enumerate(results):
        records += recs
        annotations += rows
        segment_rows += [{'sequence': sequence, 'segment': [list(a), list(b)]} for a, b in segments]
    split = split_by_beam(records, config.split_ratio, seed)

    _write_jsonl(os.path.join(directory, 'annotations.jsonl'), annotations)
    _write_jsonl(os.path.join(directory, 'oracle.jsonl'),
                 [{'frame_id': r.frame_id, 'oracle': list(r.oracle_beams)} for r in records])
    _write_jsonl(os.path.join(directory, 'segments.jsonl'), segment_rows)
    channel.write_profiles(os.path.join(directory, 'profiles.csv'), [r.frame_id for r in records],
                           [r.profile for r in records])
    manifest = pd.DataFrame([{'frame_id': r.frame_id, 'sequence': r.sequence, 't': r.t, 'best_beam': r.best_beam,
                              'split': split[r.frame_id]} for r in records])
    try:
        manifest.to_csv(os.path.join(directory, 'manifest.csv'), index=False)
        with open(os.path.join(directory, 'dataset.json'), 'w') as out_file:
            json.dump({'scenario': scenario, 'seed': int(seed), 'q': config.channel.q,
                       'scene': dataclasses.asdict(scene_cfg)}, out_file, indent=2, sort_keys=True)
    except OSError as e:
        logs.client.logger.error('Cannot write dataset metadata in {}: {}'.format(directory, e))
        raise IOFailure(str(e)) from e

    train_count = sum(1 for s in split.values() if s == 'train')
    logs.client.logger.info('Scenario {}: wrote {} frames to {} ({} train / {} test)'.format(
        scenario, len(records), directory, train_count, len(records) - train_count))
    return Dataset(directory=directory, scenario=scenario, scene_config=scene_cfg, records=tuple(records),
                   split=split, segments=tuple(tuple(tuple(p) for p in row['segment']) for row in segment_rows))


def load_dataset(directory):
    """Read a directory written by :func:`generate_dataset` back into a :class:`Dataset`."""
    try:
        with open(os.path.join(directory, 'dataset.json')) as source:
            meta = json.load(source)
        annotations = _read_jsonl(os.path.join(directory, 'annotations.jsonl'))
        oracle = {row['frame_id']: row['oracle'] for row in _read_jsonl(os.path.join(directory, 'oracle.jsonl'))}
        segment_rows = _read_jsonl(os.path.join(directory, 'segments.jsonl'))
        profiles = channel.read_profiles(os.path.join(directory, 'profiles.csv'))
        manifest = pd.read_csv(os.path.join(directory, 'manifest.csv'), dtype={'frame_id': str})

        records = []
        for row in annotations:
            frame_id = row['frame_id']
            mask_path = os.path.join(directory, 'masks', '{}.pgm'.format(frame_id))
            records.append(scene.FrameRecord(
                t=int(row['t']),
                image=read_ppm(os.path.join(directory, 'frames', '{}.ppm'.format(frame_id))),
                boxes=scene.boxes_from_annotation(row),
                tx_id=int(row['tx_id']),
                tx_azimuth=float(row['tx_azimuth']),
                profile=profiles[frame_id],
                oracle_beams=tuple(int(b) for b in oracle[frame_id]),
                mask=read_pgm(mask_path) > 0 if os.path.exists(mask_path) else None,
                sequence=int(row['sequence']),
            ))
    except (OSError, KeyError) as e:
        logs.client.logger.error('Cannot read dataset {}: {}'.format(directory, e))
        raise IOFailure('incomplete dataset {}: {}'.format(directory, e)) from e

    logs.client.logger.info('Loaded {} frames from {}'.format(len(records), directory))
    return Dataset(
        directory=directory,
        scenario=meta['scenario'],
        scene_config=scene_config_from_dict(meta['scene']),
        records=tuple(records),
        split=dict(zip(manifest['frame_id'], manifest['split'])),
        segments=tuple(tuple(tuple(p) for p in row['segment']) for row in segment_rows),
    )


def build_stages(dataset, config):
    """Fusion and geometry clients for the dataset's camera, with the vanishing point calibrated."""
    camera = scene.camera_from_config(dataset.scene_config)
    codebook = channel.Client(config.channel).codebook
    fusion_client = fusion.Client(camera, codebook, config.identify)
    geometry_client = geometry.Client(camera, fusion_client.colmap, config.geometry)
    geometry_client.calibrate(list(dataset.segments))
    return Stages(camera=camera, fusion=fusion_client, geometry=geometry_client)


def beam_inputs(stages, records, boxes, variant=None, isolate=True):
    """Images and reduced search spaces for beam prediction, one box per frame.

    Args:
        isolate (:obj:`bool`, optional): ``False`` feeds the full frame to both pathways.

    Returns:
        tuple: ``(list of images, list of SearchSpace)``.
    """
    images, spaces = [], []
    for record, box in zip(records, boxes):
        spaces.append(stages.geometry.search_space(record.image, box, record.t, variant, isolate))
        images.append(geometry.isolate_tx(record.image, box) if isolate else record.image)
    return images, spaces


def beam_dataset(dataset, stages, split, config, variant=None, isolate=True):
    """Ground-truth-box beam samples of one split.

    Returns:
        tuple: ``(BeamDataset, list of SearchSpace)``.
    """
    records = dataset.frames(split)
    images, spaces = beam_inputs(stages, records, [r.tx_box for r in records], variant, isolate)
    data = beamnet.build_dataset(images, [s.bits for s in spaces], [r.best_beam for r in records],
                                 config.train.input_size)
    return data, spaces


def train_beam(dataset, stages, config, train_config=None, variant=None, isolate=True):
    """Fit a beam predictor on the training split, validating on the test split.

    Returns:
        tuple: ``(beamnet.Client, history DataFrame)``.
    """
    train_config = train_config or config.train
    train_set, _ = beam_dataset(dataset, stages, 'train', config, variant, isolate)
    test_set, _ = beam_dataset(dataset, stages, 'test', config, variant, isolate)
    client = beamnet.Client(train_config, config.channel.q)
    history = client.train(train_set, test_set)
    return client, history


def train_identification(dataset, stages, config, mode=None, zero_power=False):
    """Fit a TX scorer on the training split.

    Args:
        mode (:obj:`str`, optional): Detector input variant; defaults to the configured mode.
        zero_power (:obj:`bool`, optional): Blank the power plane.

    Returns:
        identify.Client
    """
    id_config = replace(config.identify, mode=mode) if mode else config.identify
    client = identify.Client(id_config, config.tracker, stages.fusion, zero_power=zero_power)
    accuracy = client.train(dataset.frames('train'))
    logs.client.logger.info('TX scorer ({}{}) crop accuracy {:.4f}'.format(
        id_config.mode, ', zero power' if zero_power else '', accuracy))
    return client


@dataclass(frozen=True)
class IdEvaluation:
    """Identification accuracy per window length, with the uniform-proposal baseline."""
    accuracy: Dict[int, float]
    hits: Dict[int, int]
    frames: int
    chance_hits: float


def evaluate_identification(identifier, dataset, config, m_values=None):
    """Identification accuracy on test frames for each window length ``m``.

    Every target frame is a test frame at least ``max(m_values) - 1`` frames into its sequence, so
    all window lengths are scored on the same frames. The window for ``m`` ends at the target. The
    uniform baseline draws from the same candidates the detector ranks.

    Returns:
        IdEvaluation
    """
    m_values = tuple(m_values or config.identify.m_id_values)
    longest = max(m_values)
    z = config.identify.iou_threshold
    predictions = {m: [] for m in m_values}
    truths, chance = [], 0.0
    for frames in dataset.sequences():
        fused = [identifier.fused(r) for r in frames]
        candidates = [identifier.proposals(r, f) for r, f in zip(frames, fused)]
        for i, record in enumerate(frames):
            if i < longest - 1 or dataset.split[record.frame_id] != 'test':
                continue
            truth = record.tx_box
            truths.append(truth)
            proposals = candidates[i]
            if proposals:
                chance += sum(iou(p.bbox, truth) >= z for p in proposals) / len(proposals)
            for m in m_values:
                try:
                    found = identify.identify_multiframe(identifier.model, fused[i - m + 1:i + 1], identifier.config,
                                                         identifier.tracker_config, candidates[i - m + 1:i + 1])
                    predictions[m].append(found.bbox)
                except IdentificationFailure:
                    predictions[m].append(None)
    if not truths:
        raise InvalidStateError('no test frames at least {} frames into a sequence'.format(longest))

    accuracy = {m: identify.id_accuracy(predictions[m], truths, z) for m in m_values}
    hits = {m: int(round(accuracy[m] * len(truths))) for m in m_values}
    logs.client.logger.info('Identification accuracy {}'.format(
        ', '.join('m={}: {:.4f}'.format(m, accuracy[m]) for m in m_values)))
    return IdEvaluation(accuracy=accuracy, hits=hits, frames=len(truths), chance_hits=float(chance))


def chance_test(hits, frames, chance_hits):
    """Chi-square goodness of fit of ``hits`` against the uniform-proposal expectation.

    Returns:
        tuple: ``(statistic, p-value)``.
    """
    expected = np.array([chance_hits, frames - chance_hits], dtype=np.float64)
    observed = np.array([hits, frames - hits], dtype=np.float64)
    if expected.min() <= 0:
        return (0.0, 1.0) if np.allclose(observed, expected) else (math.inf, 0.0)
    result = stats.chisquare(observed, expected)
    return float(result.statistic), float(result.pvalue)


def follow_tx(identifier, frames, config, log_rows=None, prediction_rows=None):
    """Identify the TX on the first ``m_id`` frames of a sequence, then track it.

    A lost track triggers re-identification over the ``m_id`` frames ending at the loss; when that
    fails too the rest of the sequence gets no box.

    Args:
        log_rows (:obj:`list`, optional): Receives the tracker rows.
        prediction_rows (:obj:`list`, optional): Receives one identification row per identification attempt.

    Returns:
        tuple: ``({frame index: BBox}, number of re-identifications)``.
    """
    m = config.identify.m_id
    detections = [identifier.detections(r) for r in frames]

    def attempt(window):
        try:
            found = identifier.identify(window)
        except IdentificationFailure:
            if prediction_rows is not None:
                prediction_rows.append(identify.prediction_row(window[-1].t, None, 0.0))
            raise
        if prediction_rows is not None:
            prediction_rows.append(identify.prediction_row(window[-1].t, found.bbox, found.score))
        return found

    try:
        found = attempt(frames[:m])
    except IdentificationFailure as e:
        logs.client.logger.warning('Sequence {}: {}'.format(frames[0].sequence, e))
        return {}, 0

    boxes = {m - 1: found.bbox}
    anchor, events = m - 1, 0
    while anchor < len(frames) - 1:
        try:
            tracked = track.track_sequence(detections[anchor:], boxes[anchor], config.tracker, anchor, log_rows)
        except TrackingLost as lost:
            boxes.update({anchor + k: b for k, b in enumerate(lost.boxes, start=1)})
            frame = lost.frame_index
            events += 1
            logs.client.logger.info('Sequence {}: re-identifying the TX at frame {}'.format(frames[0].sequence, frame))
            try:
                found = attempt(frames[max(0, frame - m + 1):frame + 1])
            except IdentificationFailure:
                logs.client.logger.warning('Sequence {}: re-identification failed at frame {}'.format(
                    frames[0].sequence, frame))
                break
            boxes[frame] = found.bbox
            anchor = frame
        else:
            boxes.update({anchor + k: b for k, b in enumerate(tracked, start=1)})
            break
    return boxes, events


def ground_truth_metrics(models, dataset, stages, config, variant=None, isolate=True):
    """Beam top-N, containment and overhead on test frames isolated with the annotated TX box."""
    test_set, spaces = beam_dataset(dataset, stages, 'test', config, variant, isolate)
    best = test_set.labels.tolist()
    predictions = models.beam.predict(test_set.images, test_set.bits, max(config.top_n))
    rates = {'gt_top{}'.format(n): beamnet.top_n_accuracy(predictions, best, n) for n in config.top_n}
    rates['containment'] = geometry.containment_rate(spaces, best)
    mean_size = float(np.mean([s.popcount for s in spaces]))
    rates['overhead_reduction'] = 1.0 - mean_size / config.channel.q
    return rates, {'mean_search_space': mean_size, 'gt_frames': len(best)}, spaces


def run_end_to_end(dataset, models, config, stages=None, log_dir=None):
    """Identify, track, reduce and predict on every test frame from the identification frame on.

    Frames without a usable TX box count as wrong in ``e2e_top{n}`` and are left out of
    ``e2e_top{n}_excluded``. Ground-truth-box figures over all test frames are reported alongside.

    Args:
        dataset (Dataset): Evaluation data.
        models (Models): Trained identifier and beam predictor.
        config (ExperimentConfig): Experiment configuration.
        stages (:obj:`Stages`, optional): Prebuilt camera-bound clients.
        log_dir (:obj:`str`, optional): Receives ``search_spaces.jsonl``, ``tracks.jsonl`` and ``predictions.jsonl``.

    Returns:
        MetricsReport
    """
    stages = stages or build_stages(dataset, config)
    m = config.identify.m_id
    counted = {n: [] for n in config.top_n}
    excluded = {n: [] for n in config.top_n}
    failures = reidentifications = 0
    track_rows, space_rows, prediction_rows = [], [], []

    for frames in dataset.sequences():
        if len(frames) < m:
            logs.client.logger.warning('Sequence {} is shorter than m_id={}'.format(frames[0].sequence, m))
            continue
        rows, attempts = [], []
        boxes, events = follow_tx(models.identifier, frames, config, rows, attempts)
        track_rows += [dict(row, sequence=frames[0].sequence) for row in rows]
        prediction_rows += [dict(row, sequence=frames[0].sequence) for row in attempts]
        reidentifications += events

        usable = []
        for i, record in enumerate(frames):
            if i < m - 1 or dataset.split[record.frame_id] != 'test':
                continue
            box = boxes.get(i)
            if box is not None:
                try:
                    space = stages.geometry.search_space(record.image, box, record.t)
                    usable.append((record, geometry.isolate_tx(record.image, box), space))
                    continue
                except (InvalidArgumentError, EmptySearchSpaceError) as e:
                    logs.client.logger.warning('Frame {}: {}'.format(record.frame_id, e))
            failures += 1
            for n in config.top_n:
                counted[n].append(False)
        if not usable:
            continue
        batch = beamnet.build_dataset([u[1] for u in usable], [u[2].bits for u in usable],
                                      [u[0].best_beam for u in usable], config.train.input_size)
        predictions = models.beam.predict(batch.images, batch.bits, max(config.top_n))
        for (record, _, space), prediction in zip(usable, predictions):
            for n in config.top_n:
                hit = record.best_beam in prediction.top_n[:n]
                counted[n].append(hit)
                excluded[n].append(hit)
            space_rows.append(geometry.search_space_row(space, record.frame_id))

    if not counted[config.top_n[0]]:
        raise InvalidStateError('no test frames to evaluate in {}'.format(dataset.directory))
    rates = {}
    for n in config.top_n:
        rates['e2e_top{}'.format(n)] = float(np.mean(counted[n]))
        rates['e2e_top{}_excluded'.format(n)] = float(np.mean(excluded[n])) if excluded[n] else 0.0
    if space_rows:
        rates['e2e_overhead_reduction'] = 1.0 - float(np.mean([row['bits'].count('1') for row in space_rows])) / \
            config.channel.q

    gt_rates, gt_values, _ = ground_truth_metrics(models, dataset, stages, config)
    rates.update(gt_rates)
    test = dataset.frames('test')
    _, strip_spaces = beam_inputs(stages, test, [r.tx_box for r in test], variant='strip')
    rates['containment_strip'] = geometry.containment_rate(strip_spaces, [r.best_beam for r in test])
    values = dict(gt_values, e2e_frames=len(counted[config.top_n[0]]), identification_failures=failures,
                  reidentifications=reidentifications)

    if log_dir is not None:
        os.makedirs(log_dir, exist_ok=True)
        _write_jsonl(os.path.join(log_dir, 'search_spaces.jsonl'), space_rows)
        _write_jsonl(os.path.join(log_dir, 'tracks.jsonl'), track_rows)
        _write_jsonl(os.path.join(log_dir, 'predictions.jsonl'), prediction_rows)
    logs.client.logger.info('Scenario {}: end-to-end top-{} {:.4f}, ground-truth box top-{} {:.4f}'.format(
        dataset.scenario, max(config.top_n), rates['e2e_top{}'.format(max(config.top_n))],
        max(config.top_n), rates['gt_top{}'.format(max(config.top_n))]))
    return MetricsReport(rates=rates, values=values)


def overhead_from_log(path, q):
    """``1 - mean(popcount) / q`` recomputed from a ``search_spaces.jsonl`` log."""
    rows = _read_jsonl(path)
    if not rows:
        raise InvalidArgumentError('{} holds no search spaces'.format(path))
    return 1.0 - float(np.mean([row['bits'].count('1') for row in rows])) / q


def run_ablation(dataset, which, config, stages=None):
    """Retrain one variant and measure it on the test split.

    ``1`` feeds the full frame instead of the isolated TX, ``2`` drops the search pathway and the
    mask, ``3`` uses strip regions, ``id-rgb`` gives the detector a grayscale frame and ``id-zero``
    runs method2 with a blank power plane, scored against uniform choice over the same visual proposals.

    Returns:
        MetricsReport: rates under ``ablations[which]``.
    """
    if which not in ABLATIONS:
        raise InvalidArgumentError('unknown ablation {!r}; expected one of {}'.format(which, ', '.join(ABLATIONS)))
    stages = stages or build_stages(dataset, config)
    logs.client.logger.info('Running ablation {} on scenario {}'.format(which, dataset.scenario))
    values = {}

    if which in ('1', '2', '3'):
        options = {
            '1': {'isolate': False},
            '2': {'train_config': replace(config.train, use_search=False)},
            '3': {'variant': 'strip'},
        }[which]
        beam, _ = train_beam(dataset, stages, config, **options)
        rates, _, _ = ground_truth_metrics(Models(identifier=None, beam=beam), dataset, stages, config,
                                           options.get('variant'), options.get('isolate', True))
        rates = {k: v for k, v in rates.items() if k.startswith('gt_top') or k == 'containment'}
    elif which == 'id-rgb':
        evaluation = evaluate_identification(train_identification(dataset, stages, config, mode='rgb'), dataset, config)
        rates = {'id_m{}'.format(m): acc for m, acc in evaluation.accuracy.items()}
    else:
        identifier = train_identification(dataset, stages, config, mode='method2', zero_power=True)
        evaluation = evaluate_identification(identifier, dataset, config, m_values=(1,))
        statistic, pvalue = chance_test(evaluation.hits[1], evaluation.frames, evaluation.chance_hits)
        rates = {'id_m1': evaluation.accuracy[1], 'chance_rate': evaluation.chance_hits / evaluation.frames,
                 'chance_pvalue': pvalue}
        values['id-zero_chi2'] = statistic
    return MetricsReport(values=values, ablations={which: rates})


def oracle_sweep(config, trials=1000, seed=0):
    """Check that the exhaustive sweep picks the steer angle nearest in sine to a single LOS path.

    Geometries whose two nearest steer sines are equally close are skipped.

    Returns:
        dict: ``trials``, ``ties``, ``agreement`` (over non-tied trials) and ``seconds``.
    """
    client = channel.Client(config.channel)
    low, high = client.codebook.sector
    sines = np.sin(client.codebook.steer_angles)
    rng = seeded_rng(seed, 13)
    started = time.perf_counter()
    agree = ties = 0
    for trial in range(trials):
        azimuth = float(rng.uniform(low, high))
        _, order = client.sweep(azimuth, (), seed=trial)
        distance = np.abs(sines - math.sin(azimuth))
        nearest = np.argsort(distance, kind='stable')
        if len(nearest) > 1 and abs(distance[nearest[0]] - distance[nearest[1]]) < 1e-12:
            ties += 1
            continue
        agree += int(order[0] == nearest[0])
    scored = trials - ties
    result = {'trials': trials, 'ties': ties, 'agreement': agree / scored if scored else 1.0,
              'seconds': time.perf_counter() - started}
    logs.client.logger.info('Oracle sweep: {agreement:.4f} agreement over {trials} trials ({ties} ties)'.format(
        **result))
    return result


def acceptance_failures(report, transfer_gap=0.06):
    """Acceptance thresholds the report misses, as readable messages (empty when all pass)."""
    rates, ablations = report.rates, report.ablations
    failures = []

    def check(ok, message):
        if not ok:
            failures.append(message)

    def at_least(name, threshold):
        value = rates.get(name)
        check(value is not None and value >= threshold, '{} = {} < {}'.format(name, value, threshold))

    at_least('a_e2e_top5', 0.95)
    at_least('a_e2e_top1', 0.55)
    at_least('a_containment', 0.99)
    at_least('a_id_m1', 0.95)
    if 'a_containment_strip' in rates:
        at_least('a_containment', rates['a_containment_strip'])
    if 'a_id_m5' in rates:
        at_least('a_id_m5', rates.get('a_id_m1', 1.0))
    if 'b_e2e_top5' in rates and 'a_e2e_top5' in rates:
        at_least('b_e2e_top5', rates['a_e2e_top5'] - transfer_gap)
    overhead = rates.get('a_overhead_reduction')
    check(overhead is not None and overhead > 0.85, 'a_overhead_reduction = {} <= 0.85'.format(overhead))

    if all(k in ablations for k in ('1', '2', '3')):
        chain = [rates.get('a_gt_top5', 0.0)] + [ablations[k].get('gt_top5', 0.0) for k in ('2', '3', '1')]
        check(all(a >= b for a, b in zip(chain, chain[1:])),
              'top-5 ordering full >= 2 >= 3 >= 1 violated: {}'.format(chain))
        check(ablations['1'].get('gt_top5', 1.0) < 0.5, 'ablation 1 top-5 is not below 0.5')
    if 'id-zero' in ablations:
        pvalue = ablations['id-zero'].get('chance_pvalue', 0.0)
        check(pvalue > 0.01, 'zero-power identification differs from chance (p = {})'.format(pvalue))
    return failures


def bar_chart_svg(title, items, width=480):
    """Horizontal bar chart of ``(label, rate)`` items."""
    left, span, step = 170, width - 230, 16
    bars = []
    for i, (label, value) in enumerate(items):
        bars.append({'label': label, 'y': 30 + i * step, 'w': round(span * value, 2), 'text': '{:.4f}'.format(value),
                     'fill': '#c05030' if label.startswith('abl') else '#3070c0'})
    return _BARS.render(title=title, bars=bars, left=left, width=width, height=40 + step * len(items))


def _chart_items(report):
    items = [(name, value) for name, value in sorted(report.rates.items()) if _TOP.match(name)]
    for which, rates in sorted(report.ablations.items()):
        items += [('abl {} {}'.format(which, name), value) for name, value in sorted(rates.items())
                  if _TOP.match(name) or name.startswith('id_m')]
    return items


def emit_report(report, directory, overlays=None):
    """Write ``metrics.json``, ``metrics.csv``, ``top_n.svg`` and one ``overlay_<name>.svg`` per overlay.

    Raises:
        InvalidArgumentError: A rate lies outside [0, 1] or a top-N series is not monotone.
        IOFailure: ``directory`` is not writable.

    Returns:
        list: Paths written.
    """
    report.validate()
    paths = [os.path.join(directory, name) for name in ('metrics.json', 'metrics.csv', 'top_n.svg')]
    try:
        os.makedirs(directory, exist_ok=True)
        with open(paths[0], 'w') as out:
            json.dump(report.as_dict(), out, indent=2, sort_keys=True)
            out.write('\n')
        pd.DataFrame(report.rows(), columns=['section', 'name', 'value']).to_csv(paths[1], index=False)
        with open(paths[2], 'w') as out:
            out.write(bar_chart_svg('Top-N beam prediction and identification', _chart_items(report)))
        for name, svg in sorted((overlays or {}).items()):
            path = os.path.join(directory, 'overlay_{}.svg'.format(name))
            with open(path, 'w') as out:
                out.write(svg)
            paths.append(path)
    except OSError as e:
        logs.client.logger.error('Cannot write report to {}: {}'.format(directory, e))
        raise IOFailure(str(e)) from e
    logs.client.logger.info('Report written to {}'.format(directory))
    return paths


def read_report(path):
    with open(path) as source:
        return MetricsReport.from_dict(json.load(source))


class Client:
    """
    Client running whole experiments: datasets, training, evaluation, ablations and reports.

    Outputs land under ``out_dir``: ``data/<scenario>``, ``models``, ``eval/<scenario>``,
    ``ablations`` and ``report``.

    Args:
        config (ExperimentConfig): Experiment configuration.
        out_dir (:obj:`str`, optional): Overrides ``config.out_dir``.

    Examples:
        >>> from beamsight.pipeline import config, harness
        >>> client = harness.Client(config.load_config())
        >>> datasets = client.generate()
        >>> models = client.train(datasets['a'])
        >>> report = client.evaluate(datasets, models)
    """

    def __init__(self, config, out_dir=None):
        self.config = config
        self.out_dir = out_dir or config.out_dir
        self._stages = {}

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    def generate(self, scenarios=SCENARIOS):
        return {s: generate_dataset(self.config, self.config.seed, self.path('data'), s) for s in scenarios}

    def load(self, scenario='a'):
        return load_dataset(self.path('data', scenario))

    def stages(self, dataset):
        if dataset.directory not in self._stages:
            self._stages[dataset.directory] = build_stages(dataset, self.config)
        return self._stages[dataset.directory]

    def train_identification(self, dataset):
        identifier = train_identification(dataset, self.stages(dataset), self.config)
        os.makedirs(self.path('models'), exist_ok=True)
        identifier.save(self.path('models', 'identify.bsnp'))
        return identifier

    def train_beam(self, dataset):
        beam, history = train_beam(dataset, self.stages(dataset), self.config)
        os.makedirs(self.path('models'), exist_ok=True)
        beam.save(self.path('models', 'beamnet.bsnp'))
        beamnet.write_history(self.path('models', 'beamnet_history.csv'), history)
        return beam

    def train(self, dataset):
        return Models(identifier=self.train_identification(dataset), beam=self.train_beam(dataset))

    def load_models(self, dataset):
        identifier = identify.Client(self.config.identify, self.config.tracker, self.stages(dataset).fusion)
        beam = beamnet.Client(self.config.train, self.config.channel.q)
        try:
            identifier.load(self.path('models', 'identify.bsnp'))
            beam.load(self.path('models', 'beamnet.bsnp'))
        except OSError as e:
            raise IOFailure('trained models missing under {}: {}'.format(self.path('models'), e)) from e
        return Models(identifier=identifier, beam=beam)

    def evaluate(self, datasets, models):
        """End-to-end and ground-truth-box metrics per scenario, plus identification accuracy on ``a``.

        Keys are prefixed with the scenario, e.g. ``a_e2e_top5`` or ``b_gt_top1``.
        """
        report = MetricsReport()
        for scenario, dataset in sorted(datasets.items()):
            stages = self.stages(dataset)
            identifier = models.identifier.with_fusion(stages.fusion)
            scenario_models = Models(identifier=identifier, beam=models.beam)
            result = run_end_to_end(dataset, scenario_models, self.config, stages, self.path('eval', scenario))
            report = report.merged(result, prefix=scenario + '_')
            if scenario == 'a':
                evaluation = evaluate_identification(identifier, dataset, self.config)
                report = report.merged(MetricsReport(rates={'id_m{}'.format(m): v
                                                            for m, v in evaluation.accuracy.items()}), 'a_')
        return report

    def ablate(self, dataset, which):
        report = run_ablation(dataset, which, self.config, self.stages(dataset))
        os.makedirs(self.path('ablations'), exist_ok=True)
        with open(self.path('ablations', '{}.json'.format(which)), 'w') as out:
            json.dump(report.as_dict(), out, indent=2, sort_keys=True)
        return report

    def ablations(self):
        """Every ablation result written so far, merged into one report."""
        report = MetricsReport()
        for which in ABLATIONS:
            path = self.path('ablations', '{}.json'.format(which))
            if os.path.exists(path):
                report = report.merged(read_report(path))
        return report

    def overlays(self, dataset):
        """Beam-region drawings over the first test frame, for both region variants."""
        stages = self.stages(dataset)
        record = dataset.frames('test')[0]
        width, height = stages.camera.width_px, stages.camera.height_px
        return {
            '{}_{}'.format(dataset.scenario, variant): geometry.overlay_svg(
                stages.geometry.regions(variant), width, height, record.tx_box, stages.geometry.vp)
            for variant in geometry.VARIANTS
        }

    def report(self, report, overlays=None):
        return emit_report(report, self.path('report'), overlays)
