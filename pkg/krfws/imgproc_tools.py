'''
Grayscale images, patch extraction, HOG and Pyramid-HOG descriptors.

All functions here are pure: they never modify their inputs, and can be
called from any number of threads.
'''

from dataclasses import dataclass, field, replace

import numpy as np
import cv2


# texture feature constant of the extended HOG variant, 1/sqrt(18)
_TEXTURE_SCALE = 0.2357
# clipping value used in block normalization
_CLIP = 0.2


@dataclass(frozen=True, eq=False)
class GrayImage:

    '''
    Grayscale image with intensities in [0, 1].

    :data:
        A 2D float64 array of shape (height, width).
    '''

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, order="C")
        if data.ndim != 2 or data.size == 0:
            raise ValueError(f"a grayscale image needs a non-empty 2D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image intensities must be finite")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass(frozen=True)
class HogParams:

    '''
    :cell_size:
        Side of a HOG cell in pixels.
    :block_layout:
        Number of cells per block along each axis. Blocks do not overlap.
        None means a single block spanning the whole patch.
        Ignored by the extended variant, which normalizes every cell
        by its four 2x2 cell neighbourhoods.
    :orientation_bins:
        Number of orientation bins (over 180 degrees when unsigned,
        360 degrees when signed).
    :signed:
        Use signed orientations in the basic variant.
    :variant:
        'basic' (L2 normalization with clipping at 0.2) or 'extended'
        (31-dimensional cells for 9 bins: 18 signed, 9 unsigned,
        4 texture features).
    '''

    cell_size: int = 8
    block_layout: int = None
    orientation_bins: int = 9
    signed: bool = False
    variant: str = "basic"

    def __post_init__(self):
        if self.cell_size < 2:
            raise ValueError(f"cell_size must be at least 2, got {self.cell_size}")
        if self.orientation_bins < 2:
            raise ValueError(f"orientation_bins must be at least 2, got {self.orientation_bins}")
        if self.variant not in ("basic", "extended"):
            raise ValueError(f"unknown HOG variant '{self.variant}'")
        if self.block_layout is not None and self.block_layout < 1:
            raise ValueError(f"block_layout must be positive, got {self.block_layout}")

    def cell_length(self):

        '''
        Number of descriptor entries produced by a single cell.
        '''

        if self.variant == "extended":
            return 3*self.orientation_bins + 4
        return self.orientation_bins

    def with_cell_size(self, cell_size):
        return replace(self, cell_size=cell_size)


@dataclass(frozen=True, eq=False)
class PhogDescriptor:

    '''
    :values:
        Concatenated HOG vectors, coarsest level first.
    :levels:
        Cell sizes of the pyramid levels, in the order of concatenation.
    '''

    values: np.ndarray
    levels: tuple = field(default=())

    def __len__(self):
        return len(self.values)


def extract_patch(img, center, side):

    '''
    Cuts a square patch out of an image.

    :img:
        A GrayImage.
    :center:
        (x, y) coordinates of the patch center in pixels.
    :side:
        Side of the patch in pixels.

    Returns:
        A side x side GrayImage whose top-left pixel is
        round(center) - side//2. Pixels falling outside the image
        replicate the nearest edge pixel.
    '''

    if side < 4:
        raise ValueError(f"patch side must be at least 4, got {side}")
    cx, cy = float(center[0]), float(center[1])
    if not (np.isfinite(cx) and np.isfinite(cy)):
        raise ValueError(f"non-finite patch center ({cx}, {cy})")

    x0 = int(np.floor(cx + 0.5)) - side // 2
    y0 = int(np.floor(cy + 0.5)) - side // 2
    cols = np.clip(np.arange(x0, x0 + side), 0, img.width - 1)
    rows = np.clip(np.arange(y0, y0 + side), 0, img.height - 1)
    return GrayImage(img.data[np.ix_(rows, cols)])


def crop_and_scale(img, center, scale, out_size):

    '''
    Resamples a square region of an image.

    :img:
        A GrayImage.
    :center:
        (x, y) point of img mapped to the center of the output.
    :scale:
        Output pixels per input pixel.
    :out_size:
        Side of the output image in pixels.

    Returns:
        A GrayImage with out_size x out_size pixels. Bilinear interpolation,
        edge pixels replicated outside img.
    '''

    if scale <= 0 or not np.isfinite(scale):
        raise ValueError(f"scale must be positive, got {scale}")
    half = out_size / 2.0
    transf = np.array([[scale, 0.0, half - scale*center[0]],
                       [0.0, scale, half - scale*center[1]]])
    out = cv2.warpAffine(img.data, transf, (out_size, out_size),
                         flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_REPLICATE)
    return GrayImage(np.clip(out, 0.0, 1.0))


def _gradients(data):

    # central differences [-1, 0, 1] without smoothing
    kernel = np.array([[-1.0, 0.0, 1.0]])
    gx = cv2.filter2D(data, cv2.CV_64F, kernel, borderType=cv2.BORDER_REPLICATE)
    gy = cv2.filter2D(data, cv2.CV_64F, kernel.T, borderType=cv2.BORDER_REPLICATE)
    return np.hypot(gx, gy), np.arctan2(gy, gx)


def _cell_histograms(mag, angle, cell_size, n_bins, full_circle):

    '''
    Magnitude-weighted orientation histogram of every cell, with linear
    interpolation between the two nearest bins. Bin b is centered at
    b*period/n_bins.

    Returns:
        Array of shape (cells_y, cells_x, n_bins).
    '''

    h, w = mag.shape
    ny, nx = h // cell_size, w // cell_size
    period = 2*np.pi if full_circle else np.pi

    pos = np.mod(angle, period) / (period / n_bins)
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.int64) % n_bins
    hi = (lo + 1) % n_bins

    rows, cols = np.indices((h, w))
    cell = (rows // cell_size) * nx + cols // cell_size
    size = ny * nx * n_bins
    hist = np.bincount((cell*n_bins + lo).ravel(), weights=(mag*(1 - frac)).ravel(), minlength=size)
    hist += np.bincount((cell*n_bins + hi).ravel(), weights=(mag*frac).ravel(), minlength=size)
    return hist.reshape(ny, nx, n_bins)


def _clipped_l2(v):

    # normalization of an all-zero block yields zeros
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.zeros_like(v)
    v = np.minimum(v / norm, _CLIP)
    return v / np.linalg.norm(v)


def _basic_descriptor(hist, block_layout):

    ny, nx, _ = hist.shape
    if block_layout is None:
        return _clipped_l2(hist.ravel())
    if ny % block_layout or nx % block_layout:
        raise ValueError(f"a {ny}x{nx} cell grid cannot be split into {block_layout}x{block_layout} cell blocks")
    blocks = []
    for by in range(0, ny, block_layout):
        for bx in range(0, nx, block_layout):
            blocks.append(_clipped_l2(hist[by:by + block_layout, bx:bx + block_layout].ravel()))
    return np.concatenate(blocks)


def _extended_descriptor(signed_hist):

    n_bins = signed_hist.shape[2] // 2
    unsigned_hist = signed_hist[:, :, :n_bins] + signed_hist[:, :, n_bins:]

    # gradient energy of every cell; the border is replicated so that
    # every cell belongs to four 2x2 neighbourhoods
    energy = np.pad(np.sum(unsigned_hist**2, axis=2), 1, mode="edge")
    sums = energy[:-1, :-1] + energy[1:, :-1] + energy[:-1, 1:] + energy[1:, 1:]
    inv = np.zeros_like(sums)
    np.divide(1.0, np.sqrt(sums), out=inv, where=sums > 0)

    ny, nx = unsigned_hist.shape[:2]
    signed_feat = np.zeros_like(signed_hist)
    unsigned_feat = np.zeros_like(unsigned_hist)
    texture = np.zeros((ny, nx, 4))
    for k, (dy, dx) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        norm = inv[dy:dy + ny, dx:dx + nx, None]
        signed_feat += np.minimum(signed_hist * norm, _CLIP)
        clipped = np.minimum(unsigned_hist * norm, _CLIP)
        unsigned_feat += clipped
        texture[:, :, k] = _TEXTURE_SCALE * np.sum(clipped, axis=2)

    cells = np.concatenate([0.5*signed_feat, 0.5*unsigned_feat, texture], axis=2)
    return cells.ravel()


def hog(patch, params):

    '''
    Histogram of oriented gradients of a patch.

    :patch:
        A GrayImage whose sides are divisible by params.cell_size.
    :params:
        A HogParams object.

    Returns:
        A 1D float64 array. Its length is cells*orientation_bins for the
        basic variant and cells*(3*orientation_bins + 4) for the extended one.
    '''

    cs = params.cell_size
    if patch.width % cs or patch.height % cs:
        raise ValueError(f"patch of size {patch.width}x{patch.height} is not divisible by cell size {cs}")

    mag, angle = _gradients(patch.data)
    if params.variant == "extended":
        hist = _cell_histograms(mag, angle, cs, 2*params.orientation_bins, full_circle=True)
        return _extended_descriptor(hist)

    hist = _cell_histograms(mag, angle, cs, params.orientation_bins, full_circle=params.signed)
    return _basic_descriptor(hist, params.block_layout)


def _sorted_levels(levels):
    if len(levels) == 0:
        raise ValueError("PHOG needs at least one pyramid level")
    return tuple(sorted((int(c) for c in levels), reverse=True))


def phog(patch, levels, params):

    '''
    Pyramid HOG: HOG vectors of the same patch taken with progressively
    smaller cell sizes.

    :patch:
        A GrayImage.
    :levels:
        Cell sizes of the pyramid levels. Each one must divide the patch
        side. The levels are concatenated from the largest cell size
        (coarsest) to the smallest, whatever their order in this list.
    :params:
        HogParams shared by all levels; its cell_size is replaced by
        the level's cell size.

    Returns:
        A PhogDescriptor.
    '''

    levels = _sorted_levels(levels)
    parts = [hog(patch, params.with_cell_size(c)) for c in levels]
    return PhogDescriptor(values=np.concatenate(parts), levels=levels)


def descriptor_length(side, levels, params):

    '''
    Length of the PHOG descriptor of a side x side patch.
    '''

    total = 0
    for c in _sorted_levels(levels):
        if side % c:
            raise ValueError(f"cell size {c} does not divide patch side {side}")
        total += (side // c)**2 * params.cell_length()
    return total


def phog_at(img, center, side, levels, params):

    '''
    PHOG values of the side x side patch of img centered at center.
    '''

    return phog(extract_patch(img, center, side), levels, params).values
