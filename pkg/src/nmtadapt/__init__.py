"""Adding an unseen language to a multilingual NMT system from monolingual data."""
__version__ = "0.1.0"
