"""gridcast: an encoder-processor-decoder weather emulator on a lat-lon grid.

The package is organized bottom-up:

    autodiff       dense float64 tensors with reverse-mode differentiation
    serialization  binary parameter container
    offload        host-offloaded activation store with prefetched backward
    grid           lat-lon geometry, weights, neighborhoods, static fields
    attention      rotary neighborhood attention transformer blocks
    model          encoder / processors / decoder and their configs
    rollout        greedy mixed-horizon latent time stepping
    synthdata      deterministic synthetic atmospheres and their container
    training       multi-horizon curriculum, staged fine-tuning, optimizer
    evaluation     weighted RMSE, zonal spectra, sharpness, ensemble curves
    cli            subcommand front end and run manifests
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, checkpoint_segment, no_grad  # noqa: F401
