"""memvqa: blind video quality assessment with a recurrent-memory transformer.

Pipeline: raw videos -> spatio-temporal training patches -> proxy-metric
pseudo-labels -> contrastive training of the recurrent-memory ViT and its
heads -> pooled video embeddings -> ridge regression + rank-correlation
cross-validation.
"""

__version__ = "0.1.0"
