"""Adaptive ultrasound signal processing toolkit.

Submodules:
    core      tensor file IO, SVD, Hermitian solves, seeded RNG
    sim       synthetic forward models with retained ground truth
    beamform  delay-and-sum and adaptive (MVDR) receive beamforming
    doppler   spectral velocity estimation (Welch, data-adaptive filterbank, autocorrelator)
    lowrank   clutter suppression: proximal solvers and an unfolded network
    ulm       super-resolution microbubble localization
    nn        minimal reverse-mode autodiff engine and training loop
    cli       pipeline driver
"""

__version__ = "0.1.0"
