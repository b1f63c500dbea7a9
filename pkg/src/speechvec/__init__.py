"""Learn fixed-length semantic vectors for spoken words and evaluate them.

The pipeline: MFCC extraction from segmented audio, skip-gram example
construction over utterances, an LSTM encoder-decoder trained with plain
SGD, per-word averaging of encoder states, and a word-similarity
evaluation harness with Spearman rank correlation.
"""

__version__ = "0.1.0"
