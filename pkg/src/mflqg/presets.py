"""Bundled reference instance used by the CLI reproduction command and tests.

A two-state, two-control population on [0, 1] with fully multiplicative noise
(state, control and state-average all enter the diffusion).  Terminal weights
are zero: G = 0, GammaBar = 0, etaBar = 0.
"""

from __future__ import annotations

import numpy as np

from .model import ModelParams


def repro_instance(steps: int = 1000) -> ModelParams:
    return ModelParams(
        n=2,
        m=2,
        T=1.0,
        steps=steps,
        A=np.array([[0.9723, 0.9707], [0.7409, 0.0118]]),
        B=np.array([[0.7310, 0.7980], [0.2814, 0.6108]]),
        F=np.array([[0.2077, 0.4383], [0.5265, 0.2515]]),
        C=np.array([[0.5469, 0.9669], [0.3363, 0.8207]]),
        D=np.array([[0.9051, 0.8551], [0.8856, 0.4914]]),
        Ftilde=np.array([[0.4969, 0.5103], [0.4094, 0.2017]]),
        xi0=np.array([0.1627, 0.6570]),
        Gamma=np.array([[0.7420, 0.9669], [0.2016, 0.1553]]),
        eta=np.array([0.8740, 0.7733]),
        Q=np.array([[0.1845, 0.0], [0.0, 0.1785]]),
        R=np.array([[0.6587, 0.0], [0.0, 0.8763]]),
        G=np.zeros((2, 2)),
        GammaBar=np.zeros((2, 2)),
        etaBar=np.zeros(2),
    )
