from .engine import (
    DecodeConfig,
    Engine,
    GenerationReport,
    IncrementalCache,
    SpeechChunk,
    Stall,
    TextFeed,
    backbone_cache,
    cached_extend,
    chunk_end,
    generate,
    generate_streaming,
    run_streaming,
)

__all__ = [
    "DecodeConfig",
    "Engine",
    "GenerationReport",
    "IncrementalCache",
    "SpeechChunk",
    "Stall",
    "TextFeed",
    "backbone_cache",
    "cached_extend",
    "chunk_end",
    "generate",
    "generate_streaming",
    "run_streaming",
]
from .analysis import (  # noqa: E402
    EntropyReport,
    LatencyReport,
    bench_latency,
    distribution_stats,
    entropy_stats,
    evaluate_records,
    histogram_edges,
    reference_stats,
    summarize,
)

__all__ += [
    "EntropyReport",
    "LatencyReport",
    "bench_latency",
    "distribution_stats",
    "entropy_stats",
    "evaluate_records",
    "histogram_edges",
    "reference_stats",
    "summarize",
]
