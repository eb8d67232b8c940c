"""Muscle-actuated motion imitation toolkit for planar musculoskeletal models."""

__version__ = "0.1.0"

SCHEMA_VERSION = 1
