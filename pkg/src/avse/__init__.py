"""Audio-visual speech enhancement: a numpy encoder-decoder that cleans a
speaker's voice using 5-frame mouth-region video and log-mel audio segments.
"""

__version__ = "0.1.0"
