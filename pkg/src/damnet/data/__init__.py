"""Dataset construction: labeling, tiling, augmentation, synthetic pairs, raster I/O."""

from .dataset import DatasetManifest, Entry, add_scene, arrays_to_tensors, load_split, synth_generate
from .labeling import (DataError, db_to_linear, diff_flood_label, disk, label_pair, linear_to_db,
                       morphological_refine, threshold_water_mask)
from .pairs import (TRANSFORMS, MultiTemporalPair, apply_transform, augment, minmax_scale, mosaic,
                    tile, tile_origins)
from .synth import synth_arrays, synth_pair
