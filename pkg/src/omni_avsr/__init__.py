"""Unified multi-task (ASR/VSR/AVSR) sequence model with elastic token
granularity, trained with randomly sampled compression rates and adapted
through shared / task-specific / combined low-rank adapters."""

__version__ = "0.1.0"
