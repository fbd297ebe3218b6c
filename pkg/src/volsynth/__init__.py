"""Two-stage generative pipeline for volumetric missing-data synthesis.

Stage I is a vector-quantized 3D autoencoder trained jointly with three
self-supervised completeness pretext tasks (missing-count detection,
missing-position classification, and cross-subject contrastive assessment)
whose encoders emit 512-dim prompt vectors. Stage II is a 3D diffusion
transformer conditioned on those prompts that synthesizes the missing
slots of a volume set in latent space with a deterministic DDIM sampler.
"""

__version__ = "0.1.0"
