"""Mesh-scaffolded implicit hand avatars.

Two-stage pipeline: a multi-identity prior (occupancy, albedo, and shadow
fields anchored to an articulated hand mesh) is trained on synthetic data,
then a new identity is reconstructed from a single image by latent inversion
and regularized texture fitting.
"""

__version__ = "0.1.0"
