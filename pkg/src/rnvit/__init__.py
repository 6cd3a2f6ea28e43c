"""Self-supervised 3D ViT and multimodal stacking for necrosis vs progression
classification on contrast-enhanced MRI, with a synthetic phantom cohort."""

__version__ = "0.1.0"
