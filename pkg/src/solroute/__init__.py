"""solroute: multi-agent solution routing, sandboxed evaluation, and
cost/performance benchmarking for multimodal tasks."""

__version__ = "0.1.0"
