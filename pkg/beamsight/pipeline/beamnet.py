"""Dual-pathway top-N beam predictor: image conv stack plus search-space pathway, masked output."""
import struct
import zlib
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from beamsight.pipeline import logs
from beamsight.pipeline.errors import (EmptySearchSpaceError, InvalidArgumentError, InvalidStateError, IOFailure,
                                       NumericFailure)

MASK_VALUE = -1e9
MAGIC = b'BSNP'
VERSION = 1


class ConvStack(nn.Module):
    """Blocks of conv 3x3 (stride 1, pad 1), batch norm, ReLU and 2x2 max pool."""

    def __init__(self, widths, in_channels=3):
        super().__init__()
        stages = []
        channels = in_channels
        for i, width in enumerate(widths):
            stages += [
                ('conv{}'.format(i + 1), nn.Conv2d(channels, width, kernel_size=3, stride=1, padding=1)),
                ('bn{}'.format(i + 1), nn.BatchNorm2d(width)),
                ('relu{}'.format(i + 1), nn.ReLU()),
                ('pool{}'.format(i + 1), nn.MaxPool2d(2)),
            ]
            channels = width
        self.stages = nn.ModuleDict(stages)
        self.out_channels = channels
        self.depth = len(widths)

    def output_size(self, input_size):
        return self.out_channels * (input_size // 2 ** self.depth) ** 2

    def forward(self, x):
        for name, stage in self.stages.items():
            x = _checked(name, stage(x))
        return x.flatten(1)


def _checked(name, value):
    if not torch.isfinite(value).all():
        raise NumericFailure(name)
    return value


class BeamNet(nn.Module):
    """
    Image pathway and search pathway concatenated into a fully connected head.

    Args:
        q (int): Number of beams (classes and search-bit length).
        config (TrainConfig): Widths, input size and whether the search pathway is used.
    """

    def __init__(self, q, config):
        super().__init__()
        self.q = q
        self.use_search = config.use_search
        self.input_size = config.input_size
        self.conv = ConvStack(config.widths)
        features = self.conv.output_size(config.input_size)
        if self.use_search:
            s1, s2 = config.search_widths
            self.search = nn.ModuleDict([('search1', nn.Linear(q, s1)), ('search2', nn.Linear(s1, s2))])
            features += s2
        h1, h2 = config.head_widths
        self.head = nn.ModuleDict([
            ('fc1', nn.Linear(features, h1)),
            ('fc2', nn.Linear(h1, h2)),
            ('classifier', nn.Linear(h2, q)),
        ])

    def forward(self, images, bits=None):
        x = self.conv(images)
        if self.use_search:
            s = bits.to(x.dtype)
            for name, layer in self.search.items():
                s = _checked(name, F.relu(layer(s)))
            x = torch.cat([x, s], dim=1)
        x = _checked('fc1', F.relu(self.head['fc1'](x)))
        x = _checked('fc2', F.relu(self.head['fc2'](x)))
        return _checked('classifier', self.head['classifier'](x))


@dataclass(frozen=True, eq=False)
class BeamDataset:
    """``images`` ``(N, 3, S, S)`` float, ``bits`` ``(N, Q)`` bool, ``labels`` ``(N,)`` oracle best beams."""
    images: torch.Tensor
    bits: torch.Tensor
    labels: torch.Tensor

    def __len__(self):
        return len(self.labels)

    def subset(self, index):
        index = torch.as_tensor(index, dtype=torch.long)
        return BeamDataset(self.images[index], self.bits[index], self.labels[index])


@dataclass(frozen=True)
class Prediction:
    masked_logits: Tuple[float, ...]
    top_n: Tuple[int, ...]
    n: int


def prepare_image(image, size=64):
    """``H x W x 3`` uint8 frame to a ``3 x size x size`` float tensor in [0, 1], nearest-neighbour resized."""
    tensor = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].float() / 255.0
    return F.interpolate(tensor, size=(size, size), mode='nearest')[0]


def build_dataset(images, bits, labels, size=64):
    """Stack raw frames, search bits and labels into a :class:`BeamDataset`."""
    stacked = torch.stack([prepare_image(im, size) for im in images]) if len(images) else torch.zeros(0, 3, size, size)
    return BeamDataset(
        images=stacked,
        bits=torch.as_tensor(np.asarray(bits, dtype=bool).reshape(len(labels), -1)),
        labels=torch.as_tensor(np.asarray(labels, dtype=np.int64)),
    )


def forward(net, images, bits):
    """Raw logits in eval mode (batch norm on running statistics)."""
    net.eval()
    with torch.no_grad():
        return net(images, bits)


def mask_logits(logits, bits):
    """Replace logits at false bits with ``-1e9``; true-bit logits pass through unchanged."""
    bits = torch.as_tensor(bits, dtype=torch.bool)
    if not bits.any(dim=-1).all():
        raise EmptySearchSpaceError('cannot mask with an all-false search space')
    return torch.where(bits, logits, torch.full_like(logits, MASK_VALUE))


def masked_softmax(logits, bits):
    return torch.softmax(mask_logits(logits.double(), bits), dim=-1)


def loss(masked_logits, true_beam):
    """Mean cross-entropy, ``-log softmax[true_beam]``."""
    return F.cross_entropy(masked_logits, torch.as_tensor(true_beam, dtype=torch.long).reshape(-1))


def training_mask(bits, labels):
    """Search bits for training; rows whose label is outside the set train unmasked.

    Returns:
        tuple: ``(bits, number of calibration misses)``.
    """
    bits = torch.as_tensor(bits, dtype=torch.bool)
    covered = bits.gather(1, labels.reshape(-1, 1)).reshape(-1)
    misses = int((~covered).sum())
    if misses:
        bits = bits.clone()
        bits[~covered] = True
    return bits, misses


def batch_loss(net, images, bits, labels):
    logits = net(images, bits)
    if not net.use_search:
        return loss(logits, labels), 0
    train_bits, misses = training_mask(bits, labels)
    return loss(mask_logits(logits, train_bits), labels), misses


def backward(net, batch):
    """Gradients of the batch loss for every named parameter.

    Args:
        net (BeamNet): The network; its current train/eval mode is kept.
        batch (tuple): ``(images, bits, labels)``.

    Returns:
        dict: ``{name: gradient tensor}``.
    """
    net.zero_grad()
    value, _ = batch_loss(net, *batch)
    value.backward()
    return {name: p.grad.detach().clone() for name, p in net.named_parameters()}


def adam_step(named_params, grads, optimizer):
    """One bias-corrected Adam update.

    The step count ``t`` lives in the optimizer state and starts at 1 on the first call.

    Args:
        named_params (dict): ``{name: parameter}`` the optimizer was built over.
        grads (dict): ``{name: gradient}``.
        optimizer (torch.optim.Adam): Holds moments and step counts.
    """
    for name, param in named_params.items():
        param.grad = grads[name].clone()
    optimizer.step()
    return named_params


def make_optimizer(net, config, lr=None):
    return torch.optim.Adam(net.parameters(), lr=lr or config.lr, betas=tuple(config.betas), eps=config.eps)


def predict_top_n(net, image, bits, n):
    """Top-``n`` beams of one sample, strongest first, ties to the lower index.

    Args:
        image (torch.Tensor): ``3 x S x S`` prepared image.
        bits (array-like): ``Q`` search bits; ignored by a net without the search pathway.
    """
    return predict_batch(net, image[None], torch.as_tensor(bits, dtype=torch.bool)[None], n)[0]


def predict_batch(net, images, bits, n):
    if not 1 <= n <= net.q:
        raise InvalidArgumentError('n must be within 1..{}, got {}'.format(net.q, n))
    bits = torch.as_tensor(bits, dtype=torch.bool)
    logits = forward(net, images, bits).double()
    masked = mask_logits(logits, bits) if net.use_search else logits
    predictions = []
    for row, row_bits in zip(masked.numpy(), bits.numpy()):
        order = np.argsort(-row, kind='stable')
        count = min(n, int(row_bits.sum())) if net.use_search else n
        top = tuple(int(i) for i in order[:count])
        if net.use_search and not all(row_bits[i] for i in top):
            raise InvalidStateError('prediction escaped the search space')
        predictions.append(Prediction(masked_logits=tuple(float(v) for v in row), top_n=top, n=n))
    return predictions


def top_n_accuracy(predictions, oracle_bests, n):
    """Fraction of samples whose oracle best beam is among the first ``n`` predicted beams."""
    if not predictions:
        raise InvalidArgumentError('no predictions to score')
    if len(predictions) != len(oracle_bests):
        raise InvalidArgumentError('predictions and oracle lists differ in length')
    hits = [int(best) in p.top_n[:n] for p, best in zip(predictions, oracle_bests)]
    return float(np.mean(hits))


def _evaluate(net, dataset, batch_size):
    if len(dataset) == 0:
        return 0.0
    predictions = []
    for start in range(0, len(dataset), batch_size):
        part = dataset.subset(range(start, min(start + batch_size, len(dataset))))
        predictions += predict_batch(net, part.images, part.bits, 1)
    return top_n_accuracy(predictions, dataset.labels.tolist(), 1)


def train(dataset, config, validation=None, q=None):
    """Train a :class:`BeamNet` from scratch with Adam.

    After the first epoch whose validation top-1 reaches ``decay_trigger_val_acc`` the learning
    rate switches to ``lr_after_decay`` for good.

    Args:
        dataset (BeamDataset): Training split.
        config (TrainConfig): Schedule, widths and seed.
        validation (:obj:`BeamDataset`, optional): Held-out split; the training split is used when missing.
        q (:obj:`int`, optional): Beam count, taken from the search bits when omitted.

    Returns:
        tuple: ``(BeamNet, pandas.DataFrame history)`` with columns
        ``epoch, train_loss, val_top1, lr, calibration_misses``.
    """
    if len(dataset) == 0:
        raise InvalidArgumentError('training dataset is empty')
    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    net = BeamNet(q or dataset.bits.shape[1], config)
    optimizer = make_optimizer(net, config)
    generator = torch.Generator().manual_seed(config.seed)
    validation = validation if validation is not None and len(validation) else dataset

    lr, decayed, rows = config.lr, False, []
    for epoch in range(1, config.epochs + 1):
        net.train()
        order = torch.randperm(len(dataset), generator=generator)
        total, misses = 0.0, 0
        for start in range(0, len(dataset), config.batch_size):
            part = dataset.subset(order[start:start + config.batch_size])
            optimizer.zero_grad()
            value, missed = batch_loss(net, part.images, part.bits, part.labels)
            value.backward()
            optimizer.step()
            total += value.item() * len(part)
            misses += missed
        val_top1 = _evaluate(net, validation, config.batch_size)
        rows.append({'epoch': epoch, 'train_loss': total / len(dataset), 'val_top1': val_top1, 'lr': lr,
                     'calibration_misses': misses})
        logs.client.logger.info('Epoch {}: loss {:.4f}, val top-1 {:.4f}, lr {:g}'.format(
            epoch, total / len(dataset), val_top1, lr))
        if misses:
            logs.client.logger.warning('Epoch {}: {} samples trained unmasked'.format(epoch, misses))
        if not decayed and val_top1 >= config.decay_trigger_val_acc:
            lr, decayed = config.lr_after_decay, True
            for group in optimizer.param_groups:
                group['lr'] = lr
    history = pd.DataFrame(rows, columns=['epoch', 'train_loss', 'val_top1', 'lr', 'calibration_misses'])
    return net, history


def write_history(path, history):
    history.to_csv(path, index=False)


def save_params(path, net):
    """Write every parameter and buffer to a self-describing little-endian container."""
    state = net.state_dict()
    chunks = [MAGIC, struct.pack('<HI', VERSION, len(state))]
    for name, tensor in state.items():
        encoded = name.encode('utf-8')
        payload = tensor.detach().cpu().numpy().astype('<f4').tobytes()
        chunks.append(struct.pack('<H', len(encoded)) + encoded)
        chunks.append(struct.pack('<B', tensor.dim()) + struct.pack('<{}I'.format(tensor.dim()), *tensor.shape))
        chunks.append(struct.pack('<I', len(payload)) + payload + struct.pack('<I', zlib.crc32(payload)))
    try:
        with open(path, 'wb') as out:
            out.write(b''.join(chunks))
    except OSError as e:
        logs.client.logger.error('Cannot write {}: {}'.format(path, e))
        raise IOFailure(str(e)) from e


def read_params(path):
    """Read a container written by :func:`save_params` into ``{name: numpy float32 array}``."""
    with open(path, 'rb') as source:
        data = source.read()
    if data[:4] != MAGIC:
        raise IOFailure('{} is not a parameter container'.format(path))
    version, count = struct.unpack_from('<HI', data, 4)
    if version != VERSION:
        raise IOFailure('unsupported container version {}'.format(version))
    offset, tensors = 10, {}
    for _ in range(count):
        (name_len,) = struct.unpack_from('<H', data, offset)
        name = data[offset + 2:offset + 2 + name_len].decode('utf-8')
        offset += 2 + name_len
        (ndim,) = struct.unpack_from('<B', data, offset)
        shape = struct.unpack_from('<{}I'.format(ndim), data, offset + 1)
        offset += 1 + 4 * ndim
        (size,) = struct.unpack_from('<I', data, offset)
        payload = data[offset + 4:offset + 4 + size]
        (crc,) = struct.unpack_from('<I', data, offset + 4 + size)
        offset += 8 + size
        if zlib.crc32(payload) != crc:
            raise IOFailure('checksum mismatch for tensor {}'.format(name))
        tensors[name] = np.frombuffer(payload, dtype='<f4').reshape(shape)
    return tensors


def load_params(path, net):
    state = net.state_dict()
    tensors = read_params(path)
    missing = sorted(set(state) - set(tensors))
    if missing:
        raise IOFailure('container lacks tensors: {}'.format(', '.join(missing)))
    net.load_state_dict({name: torch.from_numpy(tensors[name].copy()).to(state[name].dtype) for name in state})
    return net


class Client:
    """
    Client training and running the beam predictor.

    Args:
        config (TrainConfig): Training schedule and architecture widths.
        q (int): Number of beams.

    Examples:
        >>> from beamsight.pipeline import beamnet, config
        >>> client = beamnet.Client(config.TrainConfig(), q=64)
        >>> history = client.train(train_set, test_set)
        >>> client.predict(images, bits, n=5)
    """

    def __init__(self, config, q):
        self.config = config
        self.q = q
        self.net = BeamNet(q, config)

    def train(self, dataset, validation=None):
        self.net, history = train(dataset, self.config, validation, self.q)
        return history

    def predict(self, images, bits, n):
        predictions = []
        for start in range(0, len(images), self.config.batch_size):
            stop = start + self.config.batch_size
            predictions += predict_batch(self.net, images[start:stop], bits[start:stop], n)
        return predictions

    def save(self, path):
        save_params(path, self.net)

    def load(self, path):
        load_params(path, self.net)
        return self
