"""Inter-modality slice registration by image translation trained through a
frozen intra-modality registration network, with a contrastive structure
constraint.

Submodules: core (types, IO), warp (deformation numerics), losses, models,
data (synthetic stacks, loaders, augmentation), train (stage runners),
evaluate (metrics and reports), cli.
"""

__version__ = "0.1.0"
