"""Map-based CNN path loss prediction with reflection augmentation."""
__version__ = "0.1.0"
