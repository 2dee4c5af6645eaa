"""Two-stage pose-conditioned diffusion: hand crops first, body outpainted around them.

Stage I generates a hand image plus its segmentation mask from finger
heatmaps with a multi-task denoiser. Stage II outpaints the body around
the placed hands using per-step latent blending, optionally with a
sequential mask-expansion schedule. Synthetic parametric hands provide
exact ground truth for training and for the keypoint/image-quality
evaluation harness.
"""

__version__ = "0.1.0"
