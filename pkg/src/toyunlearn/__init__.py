"""Toy multimodal model and saliency-masked machine unlearning.

Modules: numerics (tensors, gradients, optimizers), model (vision encoder,
connector, causal LM), datagen (synthetic concept benchmark), saliency
(Fisher-diagonal scores and the gradient mask), unlearn (baselines and the
masked method), evaluate (metrics, reports, deviation heatmap), pipeline and
cli (staged runs with persisted artifacts).
"""

__version__ = "0.1.0"
