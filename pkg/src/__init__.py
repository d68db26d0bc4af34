"""LOB early-warning detection

Detects the latent build-up that precedes stress in a limit order book, using
a three-regime HMM, four causal signal channels and a rising-edge trigger,
and benchmarks it against classical change-point detectors on simulated runs
and on replayed snapshot files.
"""

__version__ = "1.0.0"
