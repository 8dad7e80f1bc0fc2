"""Layer-adjustable interaction encoding: per-segment early layers, joint late layers."""

__version__ = "0.1.0"

from .cache import CacheEntry, CacheKey, RepCache, cache_key, deserialize_entry, serialize_entry
from .config import ModelConfig
from .cost import (
    CostReport,
    LengthRecord,
    attention_ops,
    cached_dataset_cost,
    dataset_cost,
    ops_to_flops,
)
from .encoder import AttentionCounter, encoder_layer, multi_head_attention, relative_position_bias, run_layers
from .model import ClassifierHead, LayerWeights, ModelWeights, init_weights, load_weights, weights_from_bytes
from .pipeline import (
    TEMPLATES,
    AttentionMask,
    SegmentedExample,
    TaskTemplate,
    apply_template,
    build_block_mask,
    classify,
    lait_encode,
    lait_encode_masked,
    make_example,
    segment_lengths,
    tokenize,
    vanilla_encode,
)

__all__ = [
    "CacheEntry", "CacheKey", "RepCache", "cache_key", "deserialize_entry", "serialize_entry", "ModelConfig",
    "CostReport", "LengthRecord", "attention_ops", "cached_dataset_cost", "dataset_cost", "ops_to_flops",
    "AttentionCounter", "encoder_layer", "multi_head_attention", "relative_position_bias", "run_layers",
    "ClassifierHead", "LayerWeights", "ModelWeights", "init_weights", "load_weights", "weights_from_bytes",
    "TEMPLATES", "AttentionMask", "SegmentedExample", "TaskTemplate", "apply_template", "build_block_mask",
    "classify", "lait_encode", "lait_encode_masked", "make_example", "segment_lengths", "tokenize",
    "vanilla_encode",
]
