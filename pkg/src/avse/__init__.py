"""Audio-visual speech enhancement with compressed lip features.

Modules:

* ``eofp``    -- 4-bit exponent-only tensor codec and its binary container
* ``audio``   -- WAV I/O, STFT/ISTFT, log1p magnitude features
* ``nnet``    -- numpy neural-network engine with exact analytic gradients
* ``ae``      -- lip-image convolutional autoencoder (the visual compressor)
* ``corpus``  -- deterministic synthetic audio-visual corpus generator
* ``model``   -- fusion enhancement model plus the audio-only baseline
* ``metrics`` -- STOI, SI-SDR, SNR, and the evaluation harness
* ``cli``     -- the ``avse`` command-line interface
"""

__version__ = "0.1.0"
