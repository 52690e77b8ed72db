"""Domain-adaptive knowledge distillation for semantic segmentation on a
procedural two-domain toy benchmark (ShapeScenes)."""

__version__ = "0.1.0"
