from .config import SearchConfig, dump_search, load_search
from .engine import (
    TRACE_HEADER,
    SearchResult,
    StepOutcome,
    TraceRow,
    arch_step,
    extract_compact,
    format_summary,
    format_trace,
    hardware_terms,
    pick_nonideal,
    run_search,
    weight_step,
)
from .gates import (
    expected_hwe,
    expected_value,
    gate_to_alpha,
    metric_values,
    network_expected_hwe,
    sample_gates,
    sample_index,
    sample_pair,
    softmax,
)
from .supernet import MixedEdge, SuperNet, mixed_forward

__all__ = [
    "TRACE_HEADER",
    "MixedEdge",
    "SearchConfig",
    "SearchResult",
    "StepOutcome",
    "SuperNet",
    "TraceRow",
    "arch_step",
    "dump_search",
    "expected_hwe",
    "expected_value",
    "extract_compact",
    "format_summary",
    "format_trace",
    "gate_to_alpha",
    "hardware_terms",
    "load_search",
    "metric_values",
    "mixed_forward",
    "network_expected_hwe",
    "pick_nonideal",
    "run_search",
    "sample_gates",
    "sample_index",
    "sample_pair",
    "softmax",
    "weight_step",
]
