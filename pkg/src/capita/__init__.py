"""Capability-scheduled embodied task planning with expert-advantage policy optimization."""

__version__ = "0.1.0"
