import os

import numpy as np
import parse

from beamsight.pipeline import logs
from beamsight.pipeline.errors import IOFailure


def worker_count():
    """Number of workers allowed for per-frame / per-sequence parallelism.

    Returns:
        int: ``BEAMSIGHT_THREADS`` when set, otherwise the CPU count.
    """
    cap = os.environ.get('BEAMSIGHT_THREADS')
    if cap:
        return max(1, int(cap))
    return os.cpu_count() or 1


def seeded_rng(*parts):
    """Generator whose stream depends only on the integer parts given.

    Args:
        *parts (int): Seed components, e.g. ``(seed, sequence, t)``.

    Returns:
        numpy.random.Generator
    """
    return np.random.default_rng(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]))


def box_pixel_ranges(bbox, width, height):
    """Half-open row/column index ranges of the pixels whose centers fall inside ``bbox``.

    Pixel ``(i, j)`` has its center at ``(j + 0.5, i + 0.5)``; box edges are inclusive.

    Returns:
        tuple: ``(r0, r1, c0, c1)`` clipped to the image, possibly empty.
    """
    x0, y0, x1, y1 = bbox.corners()
    c0 = max(0, int(np.ceil(x0 - 0.5)))
    c1 = min(width, int(np.floor(x1 - 0.5)) + 1)
    r0 = max(0, int(np.ceil(y0 - 0.5)))
    r1 = min(height, int(np.floor(y1 - 0.5)) + 1)
    return r0, max(r0, r1), c0, max(c0, c1)


def iou(a, b):
    """Intersection over union of two boxes exposing ``corners()``; 0 for disjoint boxes."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    w = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    h = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = w * h
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def convex_polygon_mask(vertices, height, width):
    """Rasterize a convex polygon with a per-pixel half-plane test on pixel centers.

    Pixels on an edge count as inside.

    Args:
        vertices (array-like): ``(n, 2)`` ordered ``(x, y)`` vertices, either orientation.
        height (int): Image rows.
        width (int): Image columns.

    Returns:
        numpy.ndarray: ``(height, width)`` boolean mask.
    """
    poly = np.asarray(vertices, dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    if len(poly) < 3:
        return mask

    x0 = max(0, int(np.floor(poly[:, 0].min())))
    x1 = min(width, int(np.ceil(poly[:, 0].max())) + 1)
    y0 = max(0, int(np.floor(poly[:, 1].min())))
    y1 = min(height, int(np.ceil(poly[:, 1].max())) + 1)
    if x0 >= x1 or y0 >= y1:
        return mask

    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    px, py = np.meshgrid(xs, ys)

    nxt = np.roll(poly, -1, axis=0)
    area = np.sum(poly[:, 0] * nxt[:, 1] - nxt[:, 0] * poly[:, 1])
    orientation = 1.0 if area >= 0 else -1.0

    inside = np.ones(px.shape, dtype=bool)
    for (ax, ay), (bx, by) in zip(poly, nxt):
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        inside &= cross * orientation >= -1e-9
    mask[y0:y1, x0:x1] = inside
    return mask


def _open_for_write(path):
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        return open(path, 'wb')
    except OSError as e:
        logs.client.logger.error('Cannot write {}: {}'.format(path, e))
        raise IOFailure(str(e)) from e


def write_ppm(path, image):
    """Write an ``H x W x 3`` uint8 image as binary PPM (P6)."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    height, width, _ = image.shape
    with _open_for_write(path) as out:
        out.write('P6\n{} {}\n255\n'.format(width, height).encode('ascii'))
        out.write(image.tobytes())


def write_pgm(path, plane):
    """Write an ``H x W`` uint8 plane as binary PGM (P5)."""
    with _open_for_write(path) as out:
        out.write(pgm_bytes(plane))


def pgm_bytes(plane):
    plane = np.ascontiguousarray(plane, dtype=np.uint8)
    height, width = plane.shape
    return 'P5\n{} {}\n255\n'.format(width, height).encode('ascii') + plane.tobytes()


def split_netpbm(data, magic):
    """Split one netpbm image off the front of ``data``.

    Returns:
        tuple: ``(array, rest)`` where ``rest`` is whatever follows the payload.
    """
    head, dims, maxval, payload = data.split(b'\n', 3)
    if head.decode('ascii') != magic:
        raise IOFailure('expected {} image, found {!r}'.format(magic, head))
    size = parse.parse('{width:d} {height:d}', dims.decode('ascii'))
    if size is None or parse.parse('{:d}', maxval.decode('ascii')) is None:
        raise IOFailure('malformed {} header'.format(magic))
    channels = 3 if magic == 'P6' else 1
    count = size['width'] * size['height'] * channels
    array = np.frombuffer(payload[:count], dtype=np.uint8)
    if array.size != count:
        raise IOFailure('truncated {} payload'.format(magic))
    shape = (size['height'], size['width'], 3) if channels == 3 else (size['height'], size['width'])
    return array.reshape(shape).copy(), payload[count:]


def read_ppm(path):
    with open(path, 'rb') as source:
        image, _ = split_netpbm(source.read(), 'P6')
    return image


def read_pgm(path):
    with open(path, 'rb') as source:
        plane, _ = split_netpbm(source.read(), 'P5')
    return plane
