"""
Array kernels on the space-time lattice.

Every array handled here stores the spatial coordinates in its last ``d``
axes; any leading axes are batch axes (time, Monte Carlo repetition or
starting point) and are never mixed. The sup-norm neighbourhood of radius
one is separable, so sums and maxima over the 3^d neighbours are computed
one axis at a time with ``scipy.ndimage``.
"""

import itertools
from typing import Iterator, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

_ONES3 = np.ones(3)


def _mode(periodic: bool) -> str:
    return "wrap" if periodic else "constant"


def spatial_axes(ndim: int, d: int) -> range:
    """Axes holding the spatial coordinates of an ``ndim`` array."""
    return range(ndim - d, ndim)


def neighbourhood_sum(values: np.ndarray, d: int, periodic: bool) -> np.ndarray:
    """Sum of ``values`` over the sup-norm ball of radius one around each site."""
    out = np.asarray(values, dtype=np.float64)
    for axis in spatial_axes(out.ndim, d):
        out = ndimage.correlate1d(out, _ONES3, axis=axis, mode=_mode(periodic), cval=0.0)
    return out


def neighbourhood_count(bits: np.ndarray, d: int, periodic: bool) -> np.ndarray:
    """Number of set bits in the radius-one neighbourhood (integer valued)."""
    out = np.asarray(bits, dtype=np.int32)
    for axis in spatial_axes(out.ndim, d):
        out = ndimage.correlate1d(out, np.ones(3, dtype=np.int32), axis=axis,
                                  mode=_mode(periodic), cval=0)
    return out


def neighbourhood_any(bits: np.ndarray, d: int, periodic: bool) -> np.ndarray:
    """True where at least one radius-one neighbour is set (dilation)."""
    out = np.asarray(bits, dtype=np.uint8)
    for axis in spatial_axes(out.ndim, d):
        out = ndimage.maximum_filter1d(out, size=3, axis=axis, mode=_mode(periodic), cval=0)
    return out.astype(bool)


def offsets(d: int) -> List[Tuple[int, ...]]:
    """The 3^d offsets of the neighbourhood in lexicographic order."""
    return list(itertools.product((-1, 0, 1), repeat=d))


def boundary_mask(shape: Sequence[int], width: int = 1) -> np.ndarray:
    """Sites within ``width`` of the edge of an open window."""
    mask = np.zeros(tuple(shape), dtype=bool)
    for axis, size in enumerate(shape):
        index = [slice(None)] * len(shape)
        index[axis] = slice(0, min(width, size))
        mask[tuple(index)] = True
        index[axis] = slice(max(size - width, 0), size)
        mask[tuple(index)] = True
    return mask


def shifted(values: np.ndarray, offset: Sequence[int], d: int, periodic: bool) -> np.ndarray:
    """``out[x] = values[x + offset]`` over the last d axes; zero fill when open."""
    out = np.asarray(values)
    for axis, step in zip(spatial_axes(out.ndim, d), offset):
        if step == 0:
            continue
        if periodic:
            out = np.roll(out, -step, axis=axis)
            continue
        rolled = np.zeros_like(out)
        size = out.shape[axis]
        src = [slice(None)] * out.ndim
        dst = [slice(None)] * out.ndim
        if step > 0:
            src[axis] = slice(step, size)
            dst[axis] = slice(0, size - step)
        else:
            src[axis] = slice(0, size + step)
            dst[axis] = slice(-step, size)
        rolled[tuple(dst)] = out[tuple(src)]
        out = rolled
    return out


def box_labels(lower: Sequence[int], shape: Sequence[int], side: int,
               offset: Sequence[int]) -> Tuple[np.ndarray, ...]:
    """
    Per-axis box index of each site of a grid.

    Args:
        lower: coordinate of the grid's first site on each axis
        shape: grid shape
        side: box side length (sites)
        offset: partition offset; box b covers [offset + b*side, offset + (b+1)*side)

    Returns:
        One integer array per axis, broadcastable against the grid.
    """
    labels = []
    for axis, (lo, size, off) in enumerate(zip(lower, shape, offset)):
        coords = np.arange(lo, lo + size) - off
        view = [1] * len(shape)
        view[axis] = size
        labels.append(np.floor_divide(coords, side).reshape(view))
    return tuple(labels)


def iter_boxes(lower: Sequence[int], shape: Sequence[int], side: int,
               offset: Sequence[int]) -> Iterator[Tuple[Tuple[int, ...], Tuple[slice, ...]]]:
    """Yield (box index, grid slices) for every box meeting the grid."""
    ranges = []
    for lo, size, off in zip(lower, shape, offset):
        first = (lo - off) // side
        last = (lo + size - 1 - off) // side
        axis_boxes = []
        for b in range(first, last + 1):
            start = max(off + b * side - lo, 0)
            stop = min(off + (b + 1) * side - lo, size)
            axis_boxes.append((b, slice(start, stop)))
        ranges.append(axis_boxes)
    for combo in itertools.product(*ranges):
        yield tuple(b for b, _ in combo), tuple(s for _, s in combo)


def box_index(lower: Sequence[int], shape: Sequence[int], side: int,
              offset: Sequence[int]) -> Tuple[np.ndarray, Tuple[int, ...], Tuple[int, ...]]:
    """
    Flat box id of every site of a grid.

    Returns (ids, box grid shape, first box index per axis); ``ids`` has the
    grid's shape and indexes the box grid in C order.
    """
    labels = box_labels(lower, shape, side, offset)
    first = tuple(int(label.min()) for label in labels)
    dims = tuple(int(label.max()) - f + 1 for label, f in zip(labels, first))
    grids = tuple(np.broadcast_to(label - f, tuple(shape)) for label, f in zip(labels, first))
    return np.ravel_multi_index(grids, dims), dims, first


def box_sums(values: np.ndarray, ids: np.ndarray, n_boxes: int) -> np.ndarray:
    """Sum of ``values`` over each box id (last axes of ``values`` match ``ids``)."""
    flat_ids = ids.ravel()
    lead = values.shape[:values.ndim - ids.ndim]
    flat = np.asarray(values, dtype=np.float64).reshape(lead + (-1,))
    if not lead:
        return np.bincount(flat_ids, weights=flat, minlength=n_boxes)
    rows = flat.reshape(-1, flat.shape[-1])
    out = np.stack([np.bincount(flat_ids, weights=row, minlength=n_boxes) for row in rows])
    return out.reshape(lead + (n_boxes,))
