"""Multi-domain image translation with appearance-adaptive convolution,
contrastive pair mining, and retrieval-based localization evaluation."""

__version__ = "0.1.0"
