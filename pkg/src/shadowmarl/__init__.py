"""Scalable multi-agent policy gradient for general utilities on networked MDPs."""
__version__ = "0.1.0"

from .estimator import ShadowRewardPolicyGradient

__all__ = ["ShadowRewardPolicyGradient", "__version__"]
