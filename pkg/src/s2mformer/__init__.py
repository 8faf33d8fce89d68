"""Spiking dual-branch EEG auditory-attention decoder toolkit."""
__version__ = "0.1.0"
