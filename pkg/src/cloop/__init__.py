"""cloop: closed-loop dual-mode motion planning with a trainable graph planner."""

__version__ = "0.1.0"
