"""Adversarial robustness toolkit for audio spectrogram classifiers.

Submodules: ``signal`` (WAV I/O, resampling, manifests), ``transforms``
(STFT, MFCC, wavelet scalograms, model inputs), ``nn`` (autodiff, residual
network, training), ``attacks``, ``eval`` and ``pipeline``/``cli``.
"""

__version__ = "0.1.0"
