"""CPU reference implementations of LLM fine-tuning kernels and calculators."""

__version__ = "0.1.0"
