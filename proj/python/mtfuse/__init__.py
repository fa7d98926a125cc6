"""Python access to the mtfuse core: config, parameter counts, SSM scan,
gradient checks, toy training and the throughput bench."""

from ._mtfuse import (
    Error,
    bench,
    compute_gate,
    config_hash,
    config_text,
    count_params,
    generate_synthetic,
    gradcheck,
    mean_accuracy,
    scan,
    train_toy,
)

__all__ = [
    "Error",
    "bench",
    "compute_gate",
    "config_hash",
    "config_text",
    "count_params",
    "generate_synthetic",
    "gradcheck",
    "mean_accuracy",
    "scan",
    "train_toy",
]
