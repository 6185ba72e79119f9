"""Discrete speech representation learning at desk scale: vq-vae style
autoencoding and vq-wav2vec style contrastive prediction over a shared
grouped-codebook quantizer, plus ABX and co-occurrence evaluation."""

__version__ = "0.1.0"
