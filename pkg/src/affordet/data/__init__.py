from .augment import augment, hflip, resize
from .convert import masks_to_heatmaps, seg_to_heatmap
from .io import DatasetError, load_dataset, save_dataset, split_ids
from .synth import ARCHETYPES, generate_synthetic, synthesize

__all__ = [
    "ARCHETYPES",
    "DatasetError",
    "augment",
    "generate_synthetic",
    "hflip",
    "load_dataset",
    "masks_to_heatmaps",
    "resize",
    "save_dataset",
    "seg_to_heatmap",
    "split_ids",
    "synthesize",
]
