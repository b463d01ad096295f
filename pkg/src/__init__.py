"""caftdesk package initialization."""

__version__ = "0.1.0"
__author__ = "DevSecNinja"
__description__ = "Hierarchical image-text contrastive training on synthetic scenes"
