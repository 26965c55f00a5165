from .batching import Batch, batch_iter, make_batch
from .letor import GradedItem, GradedList, convert_letor, read_graded, view_probability
from .schema import (
    DatasetManifest, ItemEntry, ManifestError, ParseError, PretrainRecord, RerankRecord,
    UserProfile, build_manifest, load_manifest, manifest_path, parse_records, save_manifest,
    write_records,
)
from .synthetic import (
    GroundTruth, SynthSpec, SyntheticData, click_logits, generate_synthetic,
    pointwise_oracle_scores, relabel,
)

__all__ = [
    "Batch", "batch_iter", "make_batch", "GradedItem", "GradedList", "convert_letor",
    "read_graded", "view_probability", "DatasetManifest", "ItemEntry", "ManifestError",
    "ParseError", "PretrainRecord", "RerankRecord", "UserProfile", "build_manifest",
    "load_manifest", "manifest_path", "parse_records", "save_manifest", "write_records",
    "GroundTruth", "SynthSpec", "SyntheticData", "click_logits", "generate_synthetic",
    "pointwise_oracle_scores", "relabel",
]
