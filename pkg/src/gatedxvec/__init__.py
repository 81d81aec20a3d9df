"""Speaker embeddings with gated convolutional frame layers and gated-attention pooling.

Everything runs on a small numpy autodiff engine (:mod:`gatedxvec.tensor`);
there is no deep-learning framework dependency.
"""

from .network import SYSTEMS, NetworkSpec, build_network, extract_embedding, load_checkpoint, save_checkpoint, system_spec

__version__ = "0.1.0"

__all__ = ["SYSTEMS", "NetworkSpec", "build_network", "extract_embedding", "load_checkpoint",
           "save_checkpoint", "system_spec", "__version__"]
