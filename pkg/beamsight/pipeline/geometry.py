"""Vanishing-point estimation, beam regions in the image and pixel-overlap search-space reduction."""
import functools
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from jinja2 import Template

from beamsight.pipeline import logs
from beamsight.pipeline._helper import box_pixel_ranges, convex_polygon_mask
from beamsight.pipeline.errors import (DegenerateGeometryError, EmptySearchSpaceError, InvalidArgumentError,
                                       NoVanishingPointError)

VARIANTS = ('strip', 'fan')

_OVERLAY = Template("""<svg xmlns="http://www.w3.org/2000/svg" width="{{ width }}" height="{{ height }}" \
viewBox="0 0 {{ width }} {{ height }}">
  <rect x="0" y="0" width="{{ width }}" height="{{ height }}" fill="#101010"/>
{%- for region in regions %}
  <polygon points="{{ region.points }}" fill="{{ region.fill }}" fill-opacity="0.35" stroke="#f0f0f0" \
stroke-width="0.3"><title>beam {{ region.q }}</title></polygon>
{%- endfor %}
{%- if box %}
  <rect x="{{ box.x0 }}" y="{{ box.y0 }}" width="{{ box.w }}" height="{{ box.h }}" fill="none" stroke="#ff3030" \
stroke-width="1"/>
{%- endif %}
{%- if vp %}
  <circle cx="{{ vp.x }}" cy="{{ vp.y }}" r="2" fill="#30ff30"><title>vanishing point</title></circle>
{%- endif %}
</svg>
""")


@dataclass(frozen=True)
class VanishingPoint:
    x: float
    y: float
    residual: float

    @property
    def point(self):
        return self.x, self.y


@dataclass(frozen=True)
class BeamRegion:
    q: int
    polygon: Tuple[Tuple[float, float], ...]
    variant: str


@dataclass(frozen=True, eq=False)
class SearchSpace:
    bits: np.ndarray
    t: int = 0

    @property
    def popcount(self):
        return int(np.count_nonzero(self.bits))

    def as_string(self):
        return ''.join('1' if b else '0' for b in self.bits)


def _line_equations(segments):
    rows = []
    for (x0, y0), (x1, y1) in segments:
        a, b = y0 - y1, x1 - x0
        norm = np.hypot(a, b)
        if norm == 0:
            continue
        rows.append((a / norm, b / norm, (a * x0 + b * y0) / norm))
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def estimate_vp(segments):
    """Least-squares intersection of the support lines of image segments.

    Each segment becomes a unit-normal line ``a x + b y = c``; the returned point minimises the
    summed squared point-line distances.

    Args:
        segments (list): ``((x0, y0), (x1, y1))`` pairs.

    Returns:
        VanishingPoint: ``residual`` is the mean squared distance from the point to the lines.

    Raises:
        NoVanishingPointError: All segments are (numerically) parallel.
    """
    lines = _line_equations(segments)
    if len(lines) < 2:
        raise InvalidArgumentError('need at least 2 non-degenerate segments, got {}'.format(len(lines)))
    normals, offsets = lines[:, :2], lines[:, 2]
    normal_matrix = normals.T @ normals
    eigenvalues = np.linalg.eigvalsh(normal_matrix)
    if eigenvalues[0] <= 1e-10 * eigenvalues[-1]:
        raise NoVanishingPointError('segments are parallel; camera looks untilted')
    point, _, _, _ = np.linalg.lstsq(normals, offsets, rcond=None)
    residual = float(np.mean((normals @ point - offsets) ** 2))
    return VanishingPoint(float(point[0]), float(point[1]), residual)


def beam_region_strip(q, colmap, height):
    """Full-height rectangle over beam ``q``'s column interval."""
    start, end = (float(v) for v in colmap[q])
    polygon = ((start, 0.0), (end, 0.0), (end, float(height)), (start, float(height)))
    return BeamRegion(q=int(q), polygon=polygon, variant='strip')


def beam_region_fan(q, colmap, vp, height):
    """Quadrilateral between the lines joining ``vp`` to beam ``q``'s bottom-row edges.

    Args:
        q (int): Beam index.
        colmap (numpy.ndarray): Column intervals along the bottom row.
        vp (VanishingPoint or tuple): Vertical vanishing point; ``None`` falls back to the strip.
        height (int): Image rows.

    Returns:
        BeamRegion: vertices ``(a, H), (b, H)`` and the two top-row crossings.
    """
    if vp is None:
        return beam_region_strip(q, colmap, height)
    vx, vy = vp.point if isinstance(vp, VanishingPoint) else vp
    if 0 <= vy <= height:
        raise DegenerateGeometryError('vanishing point row {:.1f} lies inside the image band'.format(vy))
    start, end = (float(v) for v in colmap[q])
    # fraction of the way from the bottom row toward vp at which the line reaches row 0
    lam = height / (height - vy)
    top_start = start + (vx - start) * lam
    top_end = end + (vx - end) * lam
    polygon = ((start, float(height)), (end, float(height)), (top_end, 0.0), (top_start, 0.0))
    return BeamRegion(q=int(q), polygon=polygon, variant='fan')


@functools.lru_cache(maxsize=1024)
def region_mask(region, height, width):
    """Pixels whose centers fall inside ``region`` (edges included)."""
    mask = convex_polygon_mask(region.polygon, height, width)
    mask.setflags(write=False)
    return mask


def isolate_tx(image, bbox):
    """Zero every pixel whose center lies outside ``bbox``."""
    height, width = image.shape[:2]
    r0, r1, c0, c1 = box_pixel_ranges(bbox, width, height)
    if r1 <= r0 or c1 <= c0:
        raise InvalidArgumentError('bbox does not intersect the image')
    isolated = np.zeros_like(image)
    isolated[r0:r1, c0:c1] = image[r0:r1, c0:c1]
    return isolated


def reduce_search_space(isolated, regions, t=0):
    """Bit ``q`` is set iff some nonzero isolated pixel lies inside region ``q``.

    Raises:
        EmptySearchSpaceError: No region overlaps the isolated pixels.
    """
    occupied = isolated if isolated.ndim == 2 else isolated.any(axis=2)
    occupied = occupied != 0
    height, width = occupied.shape
    rows = np.flatnonzero(occupied.any(axis=1))
    cols = np.flatnonzero(occupied.any(axis=0))
    bits = np.zeros(len(regions), dtype=bool)
    if len(rows):
        window = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
        live = occupied[window]
        for i, region in enumerate(regions):
            bits[i] = bool(np.any(region_mask(region, height, width)[window] & live))
    if not bits.any():
        raise EmptySearchSpaceError('no beam region overlaps the isolated TX at frame {}'.format(t))
    return SearchSpace(bits=bits, t=int(t))


def containment_rate(spaces, best_beams):
    """Fraction of frames whose best beam survives the reduction."""
    if not spaces:
        raise InvalidArgumentError('no search spaces given')
    hits = [bool(s.bits[b]) for s, b in zip(spaces, best_beams)]
    return float(np.mean(hits))


def reduction_factor(spaces):
    """Mean reduced-set size over Q."""
    if not spaces:
        raise InvalidArgumentError('no search spaces given')
    return float(np.mean([s.popcount / len(s.bits) for s in spaces]))


def search_space_row(space, frame_id=None):
    row = {'t': space.t, 'bits': space.as_string()}
    if frame_id is not None:
        row['frame_id'] = frame_id
    return row


def overlay_svg(regions, width, height, box=None, vp=None):
    """SVG drawing of beam regions, optionally with a TX box and the vanishing point."""
    items = []
    for region in regions:
        hue = int(360 * region.q / max(1, len(regions)))
        points = ' '.join('{:.2f},{:.2f}'.format(x, y) for x, y in region.polygon)
        items.append({'q': region.q, 'points': points, 'fill': 'hsl({}, 70%, 50%)'.format(hue)})
    box_ctx = None
    if box is not None:
        x0, y0, x1, y1 = box.corners()
        box_ctx = {'x0': x0, 'y0': y0, 'w': x1 - x0, 'h': y1 - y0}
    vp_ctx = None
    if vp is not None and -height <= vp.y <= 2 * height:
        vp_ctx = {'x': vp.x, 'y': vp.y}
    return _OVERLAY.render(width=width, height=height, regions=items, box=box_ctx, vp=vp_ctx)


class Client:
    """
    Client holding the calibrated beam regions of one camera.

    Args:
        camera (Camera): Scene camera.
        colmap (numpy.ndarray): Beam column intervals shared with the fusion stage.
        config (GeometryConfig): Region variant and fallback policy.
    """

    def __init__(self, camera, colmap, config):
        self.camera = camera
        self.colmap = colmap
        self.config = config
        self.vp: Optional[VanishingPoint] = None
        self._regions = {}

    def calibrate(self, segments):
        """Estimate the vertical vanishing point once for this camera."""
        try:
            self.vp = estimate_vp(segments)
        except NoVanishingPointError:
            logs.client.logger.warning('No vanishing point found; using strip regions')
            self.vp = None
        else:
            logs.client.logger.info('Vanishing point at ({:.1f}, {:.1f}), residual {:.3g}'.format(
                self.vp.x, self.vp.y, self.vp.residual))
        self._regions.clear()
        return self.vp

    def regions(self, variant=None):
        variant = variant or self.config.variant
        if variant not in VARIANTS:
            raise InvalidArgumentError('unknown region variant {!r}'.format(variant))
        if variant not in self._regions:
            height = self.camera.height_px
            if variant == 'fan' and self.vp is not None:
                built = [beam_region_fan(q, self.colmap, self.vp, height) for q in range(len(self.colmap))]
            else:
                built = [beam_region_strip(q, self.colmap, height) for q in range(len(self.colmap))]
            self._regions[variant] = tuple(built)
        return self._regions[variant]

    def search_space(self, image, bbox, t=0, variant=None, isolate=True):
        """Reduced beam set for one frame, falling back to every beam when nothing overlaps.

        Args:
            image (numpy.ndarray): The frame.
            bbox (BBox): TX box.
            isolate (:obj:`bool`, optional): Zero everything outside ``bbox`` first.
        """
        source = isolate_tx(image, bbox) if isolate else image
        try:
            return reduce_search_space(source, self.regions(variant), t)
        except EmptySearchSpaceError as e:
            if not self.config.fallback_all:
                raise
            logs.client.logger.warning('{}; falling back to all beams'.format(e))
            return SearchSpace(bits=np.ones(len(self.colmap), dtype=bool), t=int(t))
