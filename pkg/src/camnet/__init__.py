"""camnet: a self-contained CNN training and saliency toolkit.

From-scratch float64 primitives with verified backward rules, a
VGG-style model graph, deterministic training, an image pipeline with
seeded augmentation, and gradient-based class activation maps.
"""

__version__ = "0.1.0"
