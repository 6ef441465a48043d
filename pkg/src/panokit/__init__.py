"""Panoramic driving-scene toolkit: stitching, hybrid sparse attention, scene annotation and QA scoring."""

__version__ = "0.1.0"
