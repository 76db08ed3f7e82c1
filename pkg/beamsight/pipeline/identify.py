"""TX identification: proposals over the fused input, a small scorer, multi-frame voting and IoU accuracy."""
import copy
import json
import os
from collections import Counter
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from beamsight.pipeline import logs, scene, track
from beamsight.pipeline._helper import iou
from beamsight.pipeline.beamnet import ConvStack, load_params, save_params
from beamsight.pipeline.errors import IdentificationFailure, InvalidArgumentError
from beamsight.pipeline.scene import BBox


@dataclass(frozen=True)
class Proposal:
    bbox: BBox
    score: float = 0.0
    band: bool = False

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise InvalidArgumentError('proposal score must be finite')


@dataclass(frozen=True)
class Identification:
    identity: int
    bbox: BBox
    score: float
    votes: Tuple[int, ...] = ()


class Scorer(nn.Module):
    """Reduced-width conv stack over a fused crop, plus the crop's horizontal position.

    With ``use_position`` off the position input is held at zero.
    """

    def __init__(self, crop_size, widths, use_position=True):
        super().__init__()
        self.use_position = use_position
        self.conv = ConvStack(widths)
        self.fc = nn.Linear(self.conv.output_size(crop_size) + 1, 32)
        self.out = nn.Linear(32, 1)

    def forward(self, crops, positions):
        positions = positions.reshape(-1, 1)
        if not self.use_position:
            positions = torch.zeros_like(positions)
        x = torch.cat([self.conv(crops), positions], dim=1)
        return self.out(F.relu(self.fc(x))).reshape(-1)


class IdModel:
    """
    Trainable TX scorer.

    Args:
        config (IdConfig): Crop size, margin and widths.
        use_position (:obj:`bool`, optional): Feed the crop's horizontal position to the scorer.
    """

    def __init__(self, config, use_position=True):
        torch.manual_seed(config.seed)
        self.config = config
        self.crop_size = config.crop_size
        self.net = Scorer(config.crop_size, config.widths, use_position)
        self.street_prior: Optional[dict] = None
        # equal top scores are broken uniformly at random
        self.rng = np.random.default_rng(config.seed)

    @property
    def parameter_count(self):
        return sum(p.numel() for p in self.net.parameters())

    def state(self):
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}


def visual_proposals(plane, config):
    """Connected components of a visual plane above ``visual_threshold``, at least ``min_area`` px², left to right.

    Returns:
        list: :class:`Proposal` values.
    """
    labels, _ = ndimage.label(np.asarray(plane) > config.visual_threshold)
    boxes = [BBox.from_corners(cols.start, rows.start, cols.stop, rows.stop)
             for rows, cols in ndimage.find_objects(labels)]
    boxes = [b for b in boxes if b.area >= config.min_area]
    boxes.sort(key=lambda b: (b.x, b.y))
    return [Proposal(bbox=b) for b in boxes]


def propose(fused, config):
    """Unscored candidate boxes.

    ``method1``/``rgb``: :func:`visual_proposals` of the visual plane.
    ``method2``: runs of columns whose power reaches ``power_threshold``, as full-height band boxes.
    Boxes smaller than ``min_area`` are dropped.

    Returns:
        list: :class:`Proposal` values, left to right.
    """
    if fused.mode != 'method2':
        return visual_proposals(fused.plane1, config)
    height = fused.shape[0]
    boxes = []
    if fused.plane2.max() > 0:
        labels, _ = ndimage.label(fused.plane2.max(axis=0) >= config.power_threshold)
        for (cols,) in ndimage.find_objects(labels):
            boxes.append(BBox.from_corners(cols.start, 0, cols.stop, height))
    boxes = [b for b in boxes if b.area >= config.min_area]
    boxes.sort(key=lambda b: (b.x, b.y))
    return [Proposal(bbox=b, band=True) for b in boxes]


def crop(fused, bbox, crop_size, margin):
    """Fused planes around ``bbox`` (grown by ``margin`` px, zero beyond the image), resized to ``crop_size``.

    Returns:
        tuple: ``(3 x crop_size x crop_size tensor, normalised horizontal center in [0, 1])``.
    """
    height, width = fused.shape
    x0, y0, x1, y1 = bbox.corners()
    c0, r0 = int(np.floor(x0)) - margin, int(np.floor(y0)) - margin
    c1, r1 = int(np.ceil(x1)) + margin, int(np.ceil(y1)) + margin
    planes = fused.as_array()
    window = np.zeros((3, r1 - r0, c1 - c0), dtype=np.float32)
    sr0, sr1, sc0, sc1 = max(r0, 0), min(r1, height), max(c0, 0), min(c1, width)
    if sr1 > sr0 and sc1 > sc0:
        window[:, sr0 - r0:sr1 - r0, sc0 - c0:sc1 - c0] = planes[:, sr0:sr1, sc0:sc1]
    resized = F.interpolate(torch.from_numpy(window)[None], size=(crop_size, crop_size), mode='nearest')[0]
    return resized, float(bbox.x / width)


def _crops(model, fused, proposals):
    pairs = [crop(fused, p.bbox, model.crop_size, model.config.crop_margin) for p in proposals]
    return torch.stack([c for c, _ in pairs]), torch.tensor([x for _, x in pairs], dtype=torch.float32)


def score(model, fused_crop, position=0.5):
    """Probability that a crop shows the TX."""
    model.net.eval()
    with torch.no_grad():
        logit = model.net(fused_crop[None], torch.tensor([position], dtype=torch.float32))
    return float(torch.sigmoid(logit.double())[0])


def score_proposals(model, fused, proposals):
    if not proposals:
        return []
    crops, positions = _crops(model, fused, proposals)
    model.net.eval()
    with torch.no_grad():
        probs = torch.sigmoid(model.net(crops, positions).double()).numpy()
    return [replace(p, score=float(s)) for p, s in zip(proposals, probs)]


def refine_band(model, bbox):
    """Replace a full-height method-2 band by a box from the learned street-band prior."""
    prior = model.street_prior
    if not prior:
        return bbox
    return BBox(bbox.x, prior['cy'], max(bbox.w * prior['width_ratio'], 1.0), prior['h'])


def detect_tx(model, fused, config, proposals=None):
    """Highest-scoring proposal at or above the confidence threshold.

    Equal top scores are broken uniformly at random with the model's seeded generator. Band
    proposals are narrowed with :func:`refine_band`.

    Returns:
        tuple: ``(BBox or None, score, index into the scored proposals)``.
    """
    scored = score_proposals(model, fused, proposals if proposals is not None else propose(fused, config))
    if not scored:
        return None, 0.0, None
    scores = np.array([p.score for p in scored])
    tied = np.flatnonzero(scores >= scores.max() - 1e-6)
    best = int(tied[0]) if len(tied) == 1 else int(model.rng.choice(tied))
    if scored[best].score < config.confidence:
        return None, scored[best].score, None
    box = scored[best].bbox
    if scored[best].band:
        box = refine_band(model, box)
    return box, scored[best].score, best


def majority_vote(labels, scores):
    """Most frequent label; ties go to the label with the highest mean score."""
    votes = [(label, s) for label, s in zip(labels, scores) if label is not None]
    if not votes:
        raise IdentificationFailure('no TX detection in any frame')
    counts = Counter(label for label, _ in votes)
    top = max(counts.values())
    tied = [label for label, c in counts.items() if c == top]

    def mean_score(label):
        return np.mean([s for lab, s in votes if lab == label])

    return max(tied, key=lambda label: (mean_score(label), -tied.index(label)))


def identify_multiframe(model, fused_frames, config, tracker_config, candidates=None):
    """Identify the TX over ``m_id`` consecutive frames.

    Proposals of every frame are linked by a tracker; each frame's detection votes for the
    identity of the proposal it came from.

    Args:
        candidates (:obj:`list`, optional): Proposal list per frame; defaults to :func:`propose` of each frame.

    Returns:
        Identification: identity, the winner's box in the last frame and its mean score. When the
        winner has no proposal in the last frame the box is its track's prediction.

    Raises:
        IdentificationFailure: No frame produced a detection.
    """
    tracker = track.Client(tracker_config)
    labels, scores, last_box, last_seen = [], [], {}, {}
    for t, fused in enumerate(fused_frames):
        proposals = candidates[t] if candidates is not None else propose(fused, config)
        ids = tracker.step([p.bbox for p in proposals])
        box, conf, index = detect_tx(model, fused, config, proposals)
        for identity, proposal in zip(ids, proposals):
            last_box[identity] = proposal.bbox
            last_seen[identity] = t
        labels.append(None if index is None else ids[index])
        scores.append(conf)
        if index is not None:
            last_box[ids[index]] = box

    winner = majority_vote(labels, scores)
    bbox = last_box[winner]
    if last_seen[winner] < len(fused_frames) - 1:
        alive = next((trk for trk in tracker.tracks if trk.id == winner), None)
        if alive is not None:
            bbox = alive.bbox
    mean = float(np.mean([s for lab, s in zip(labels, scores) if lab == winner]))
    logs.client.logger.debug('Identified track {} with votes {}'.format(winner, labels))
    return Identification(identity=winner, bbox=bbox, score=mean,
                          votes=tuple(-1 if lab is None else lab for lab in labels))


def id_accuracy(preds, gts, z=0.5):
    """Fraction of frames whose predicted box reaches IoU ``z`` with the ground truth; ``None`` counts as a miss."""
    if not preds or len(preds) != len(gts):
        raise InvalidArgumentError('need equal-length, non-empty prediction and ground-truth lists')
    hits = [p is not None and iou(p, g) >= z for p, g in zip(preds, gts)]
    return float(np.mean(hits))


def label_proposals(proposals, boxes, tx_id, mode):
    """Training labels: 1 for the TX, 0 for a distractor, ``None`` for proposals matching neither."""
    tx_box = dict(boxes)[tx_id]
    labels = []
    for proposal in proposals:
        if mode == 'method2':
            x0, _, x1, _ = proposal.bbox.corners()
            labels.append(1 if x0 <= tx_box.x <= x1 else 0)
            continue
        label = None
        for obj_id, box in boxes:
            if iou(proposal.bbox, box) >= 0.5:
                label = 1 if obj_id == tx_id else 0
                break
        labels.append(label)
    return labels


@dataclass(frozen=True, eq=False)
class CropSet:
    crops: torch.Tensor
    positions: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return len(self.labels)


def collect_crops(model, samples, config, candidates=None):
    """Labelled crops from ``(FusedImage, boxes, tx_id)`` samples.

    Args:
        candidates (:obj:`list`, optional): Visual proposal list per sample, labelled by IoU; defaults to
          :func:`propose` of each sample, labelled by its fused mode.
    """
    crops, positions, labels = [], [], []
    for i, (fused, boxes, tx_id) in enumerate(samples):
        if candidates is None:
            proposals, mode = propose(fused, config), fused.mode
        else:
            proposals, mode = candidates[i], 'method1'
        for proposal, label in zip(proposals, label_proposals(proposals, boxes, tx_id, mode)):
            if label is None:
                continue
            c, x = crop(fused, proposal.bbox, model.crop_size, config.crop_margin)
            crops.append(c)
            positions.append(x)
            labels.append(float(label))
    if not crops:
        return CropSet(torch.zeros(0, 3, model.crop_size, model.crop_size), torch.zeros(0), torch.zeros(0))
    return CropSet(torch.stack(crops), torch.tensor(positions), torch.tensor(labels))


def fit_street_prior(samples, config):
    """Median TX box row, height and TX-width-to-band-width ratio, for method-2 refinement."""
    rows, heights, ratios = [], [], []
    for fused, boxes, tx_id in samples:
        tx_box = dict(boxes)[tx_id]
        rows.append(tx_box.y)
        heights.append(tx_box.h)
        proposals = propose(fused, config)
        for proposal, label in zip(proposals, label_proposals(proposals, boxes, tx_id, 'method2')):
            if label == 1:
                ratios.append(tx_box.w / proposal.bbox.w)
    if not rows:
        return None
    return {'cy': float(np.median(rows)), 'h': float(np.median(heights)),
            'width_ratio': float(np.median(ratios)) if ratios else 1.0}


def train_id(model, dataset, config):
    """Fit the scorer with binary cross-entropy and Adam.

    Args:
        model (IdModel): Model to train in place.
        dataset (CropSet): Labelled crops.
        config (IdConfig): Epochs, learning rate, batch size, seed.

    Returns:
        IdModel: ``model`` after training.

    Raises:
        InvalidArgumentError: The crops hold only one class.
    """
    labels = dataset.labels
    if len(labels) == 0 or labels.min() == labels.max():
        raise InvalidArgumentError('identification training needs both TX and distractor crops')
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.net.parameters(), lr=config.lr)
    criterion = nn.BCEWithLogitsLoss()
    for epoch in range(1, config.epochs + 1):
        model.net.train()
        order = torch.randperm(len(dataset), generator=generator)
        total = 0.0
        for start in range(0, len(dataset), config.batch_size):
            index = order[start:start + config.batch_size]
            if len(index) < 2:
                continue
            optimizer.zero_grad()
            value = criterion(model.net(dataset.crops[index], dataset.positions[index]), dataset.labels[index])
            value.backward()
            optimizer.step()
            total += value.item() * len(index)
        logs.client.logger.info('Identification epoch {}: loss {:.4f}'.format(epoch, total / len(dataset)))
    return model


def crop_accuracy(model, dataset):
    """Share of crops classified on the right side of 0.5."""
    if len(dataset) == 0:
        raise InvalidArgumentError('no crops to score')
    model.net.eval()
    with torch.no_grad():
        probs = torch.sigmoid(model.net(dataset.crops, dataset.positions))
    return float(((probs >= 0.5).float() == dataset.labels).float().mean())


def prediction_row(t, bbox, conf):
    return {'t': int(t), 'bbox': None if bbox is None else bbox.as_list(), 'score': float(conf)}


class Client:
    """
    Client bundling the identification stage.

    Args:
        config (IdConfig): Identification settings.
        tracker_config (TrackerConfig): Tracker used to link proposals across frames.
        fusion_client (beamsight.pipeline.fusion.Client): Builds fused inputs from frame records.
        zero_power (:obj:`bool`, optional): Zero-channel ablation. Blanks the power plane, drops the position
          input and takes the top visual proposal with no confidence gate.

    Examples:
        >>> from beamsight.pipeline import identify
        >>> client = identify.Client(cfg.identify, cfg.tracker, fusion_client)
        >>> client.train(train_records)
        >>> client.identify(records[:5]).bbox
    """

    def __init__(self, config, tracker_config, fusion_client, zero_power=False):
        self.config = replace(config, confidence=0.0) if zero_power else config
        self.tracker_config = tracker_config
        self.fusion = fusion_client
        self.zero_power = zero_power
        self.model = IdModel(config, use_position=not zero_power)

    def fused(self, record):
        return self.fusion.build(record, self.config.mode, zero_power=self.zero_power)

    def samples(self, records):
        return [(self.fused(r), r.boxes, r.tx_id) for r in records]

    def proposals(self, record, fused=None):
        """Candidates the scorer ranks on one frame: visual boxes with a blank power plane, else :func:`propose`."""
        if self.zero_power:
            return visual_proposals(self.silhouettes(record), self.config)
        return propose(fused if fused is not None else self.fused(record), self.config)

    def _candidates(self, records):
        return [self.proposals(r) for r in records] if self.zero_power else None

    def train(self, records):
        samples = self.samples(records)
        dataset = collect_crops(self.model, samples, self.config, self._candidates(records))
        logs.client.logger.info('Training TX scorer on {} crops ({} TX)'.format(
            len(dataset), int(dataset.labels.sum())))
        train_id(self.model, dataset, self.config)
        if self.config.mode == 'method2' and not self.zero_power:
            self.model.street_prior = fit_street_prior(samples, self.config)
        return crop_accuracy(self.model, dataset)

    def detect(self, record):
        fused = self.fused(record)
        box, conf, _ = detect_tx(self.model, fused, self.config, self.proposals(record, fused))
        return box, conf

    def identify(self, records):
        return identify_multiframe(self.model, [self.fused(r) for r in records], self.config, self.tracker_config,
                                   self._candidates(records))

    def silhouettes(self, record):
        """Object silhouette plane of one frame; no power input."""
        return scene.preprocess(record.image, record.boxes, 'method1', record.mask, self.config.visual_threshold)

    def detections(self, record):
        """Visual proposal boxes of one frame, the tracker's measurements in every detector mode."""
        return [p.bbox for p in visual_proposals(self.silhouettes(record), self.config)]

    def with_fusion(self, fusion_client):
        """The same trained scorer reading fused inputs of another camera."""
        other = copy.copy(self)
        other.fusion = fusion_client
        return other

    def save(self, path):
        save_params(path, self.model.net)
        with open(path + '.prior.json', 'w') as out:
            json.dump(self.model.street_prior, out, sort_keys=True)

    def load(self, path):
        load_params(path, self.model.net)
        prior_path = path + '.prior.json'
        if os.path.exists(prior_path):
            with open(prior_path) as source:
                self.model.street_prior = json.load(source)
        return self
