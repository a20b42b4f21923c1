"""Adaptive mixed-precision KV cache quantization for vision-language attention.

Modules:

* ``tensor_io``: AKV1 binary tensors and seeded random tensors
* ``quantizer``: per-token group-wise asymmetric int2/int4 quantization
* ``wht``: Walsh-Hadamard transform and attention-preserving rotations
* ``saliency``: TSA/PSA layer analysis, pivot detection, token tiers
* ``kvcache``: mixed-precision cache with memory accounting
* ``attention`` / ``simulate``: reference attention and the prefill + decode simulator
"""

from .errors import (
    AkvqError,
    FormatError,
    InputError,
    LengthError,
    NumericError,
    ParameterError,
    ShapeError,
    SizeError,
    StateError,
    UndefinedMetricError,
)
from .kvcache import CacheConfig, MemoryReport, MixedPrecisionKVCache, memory_from_counts
from .quantizer import (
    QuantizedGroup,
    QuantizedRow,
    QuantParams,
    dequantize_group,
    dequantize_row,
    fake_quantize,
    pack_codes,
    quantize_group,
    quantize_row,
    unpack_codes,
)
from .saliency import (
    LayerPolicy,
    Modality,
    ModalityAttentionStats,
    Pattern,
    Tier,
    build_policies,
    classify_tokens,
    detect_pivot_tokens,
    detect_tsa_layers,
    modality_attention_stats,
)
from .simulate import SimConfig, SimMetrics, run_comparison, run_pipeline
from .tensor_io import Gaussian, Uniform, gen_random, load_tensor, save_tensor
from .wht import apply_qk_transform, fold_value_weights, fwht, fwht_inplace, hadamard_matrix, outlier_ratio

__version__ = "0.1.0"
