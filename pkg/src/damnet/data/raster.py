"""Raster I/O: GeoTIFF (single or dual band) via tifffile, plain images via Pillow.

Geo-referencing tags found on read are returned as an opaque dict and can be
handed back to :func:`write_raster` to copy them verbatim.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image

# tag code -> TIFF data type code used when writing it back
GEO_TAGS = {
    33550: 12,  # ModelPixelScaleTag
    33922: 12,  # ModelTiepointTag
    34264: 12,  # ModelTransformationTag
    34735: 3,   # GeoKeyDirectoryTag
    34736: 12,  # GeoDoubleParamsTag
    34737: 2,   # GeoAsciiParamsTag
    42112: 2,   # GDAL_METADATA
    42113: 2,   # GDAL_NODATA
}

TIFF_EXT = (".tif", ".tiff")


def read_raster(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    """Return ``(array, geo)``; array is ``[H, W]`` or ``[H, W, C]``."""
    path = Path(path)
    if path.suffix.lower() not in TIFF_EXT:
        return np.asarray(Image.open(path)), {}
    with tifffile.TiffFile(path) as tf:
        page = tf.pages[0]
        geo = {code: page.tags[code].value for code in GEO_TAGS if code in page.tags}
        arr = page.asarray()
    return arr, geo


def write_raster(path: str | os.PathLike, array: np.ndarray, geo: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.asarray(array)
    if path.suffix.lower() not in TIFF_EXT:
        Image.fromarray(array).save(path)
        return
    extratags = []
    for code, value in (geo or {}).items():
        dtype = GEO_TAGS[int(code)]
        if dtype == 2:
            value = value if isinstance(value, str) else str(value)
            count = 0
        else:
            value = tuple(np.ravel(value).tolist())
            count = len(value)
        extratags.append((int(code), dtype, count, value, True))
    tifffile.imwrite(path, array, photometric="minisblack", extratags=extratags,
                     planarconfig="contig" if array.ndim == 3 else None)


def write_mask(path, mask: np.ndarray, geo: dict | None = None):
    """Binary mask as 8-bit 0/255."""
    write_raster(path, (np.asarray(mask) > 0).astype(np.uint8) * 255, geo)


def read_mask(path) -> np.ndarray:
    arr, _ = read_raster(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr > 0).astype(np.uint8)


def write_probability(path, probs: np.ndarray, geo: dict | None = None):
    write_raster(path, np.asarray(probs, dtype=np.float32), geo)
