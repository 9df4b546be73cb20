"""Prior-guided EEG tokenization with a CKA-calibrated mixture-of-experts transformer."""

__version__ = "0.1.0"
