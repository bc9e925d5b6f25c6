"""Energy-aware serving for disaggregated LLM inference.

Provisioning picks instance counts and per-instance base frequencies for a
prefill pool and a decode pool; per-batch controllers then lower GPU clocks
where latency targets allow.
"""

__version__ = "0.1.0"
