#!/usr/bin/env python3
"""
Optimizer Utilities

Adaptive-moment (Adam) gradient descent over named numpy parameter arrays. Used for
control-point fitting (fitting.py) and classifier training (intersection_mlp.py).

Usage:
    opt = Adam(lr=1e-4)
    opt.step({'points': points}, {'points': grad})   # updates in place
"""

import numpy as np


class Adam:
    """
    Adam with bias-corrected first and second moment estimates.

    Moment buffers are created lazily per parameter name; parameters are updated in place.
    """

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        if lr <= 0:
            raise ValueError(f"Adam step size must be > 0, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        for name, param in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)

            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)

            denom = np.sqrt(self.v[name] / bc2) + self.epsilon
            param -= step_size * self.m[name] / denom
