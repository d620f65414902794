"""feedmix: multi-source streaming feed platform — scheduled polling,
dual-priority queuing, backpressure-bounded worker pools, dedup ingestion
and fixed-window throughput metrics."""

__version__ = "0.1.0"
