"""Style-transfer augmentation for nuclei segmentation across imaging modalities."""
from .data import LabeledSample, load_corpus, rle_decode, rle_encode
from .metrics import dsb_map, iou

__version__ = "0.1.0"

__all__ = ["LabeledSample", "dsb_map", "iou", "load_corpus", "rle_decode", "rle_encode"]
