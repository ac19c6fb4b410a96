"""Whole-slide mitosis detection: stain math, a numpy CNN engine, candidate
detection, restain registration, hard-negative mining, ensembling,
distillation, dense inference, hotspot grading and evaluation."""

__version__ = "0.1.0"
