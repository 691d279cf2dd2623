"""Normal-distribution kernels, Gaussian convolution identities and a
Gauss-Hermite quadrature oracle.

The quadrature helpers are only used by tests and ``bethe-bll verify``; the
training path goes through the closed forms.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .engine import DomainError, mills

LOG_2PI = float(np.log(2.0 * np.pi))


def ndtr(x):
    """Standard normal CDF."""
    return special.ndtr(x)


def log_ndtr(x):
    """log Phi(x); finite down to x = -40 and well beyond."""
    return special.log_ndtr(x)


def mills_ratio(t):
    """Inverse Mills ratio phi(t)/Phi(t)."""
    return mills(t)


def norm_ppf(p):
    return special.ndtri(p)


def probit_gauss_conv(y, mu_f, v_f, c=1.0):
    """Integral of Phi(y f / c) against N(f; mu_f, v_f): Phi(y mu_f / sqrt(c^2 + v_f))."""
    v_f = np.asarray(v_f, dtype=np.float64)
    if np.any(v_f < 0):
        raise DomainError("message variance must be non-negative")
    if np.any(np.asarray(c) <= 0):
        raise DomainError("probit scale must be positive")
    return special.ndtr(np.asarray(y) * np.asarray(mu_f) / np.sqrt(np.square(c) + v_f))


def gauss_conv_nll(y, mu_f, V):
    """-log N(y; mu_f, V) where V = sigma_obs^2 + v already includes the message variance."""
    V = np.asarray(V, dtype=np.float64)
    if np.any(V <= 0):
        raise DomainError("predictive variance must be positive")
    r = np.asarray(y) - np.asarray(mu_f)
    return r * r / (2.0 * V) + 0.5 * np.log(V) + 0.5 * LOG_2PI


@dataclass(frozen=True)
class QuadratureRule:
    """Probabilists' Gauss-Hermite rule: E[g(Z)] ~= sum w_i g(z_i), Z ~ N(0, 1)."""

    nodes: np.ndarray
    weights: np.ndarray

    def expectation(self, fn, mu=0.0, v=1.0):
        if v < 0:
            raise DomainError("variance must be non-negative")
        return float(np.dot(self.weights, fn(mu + np.sqrt(v) * self.nodes)))


@lru_cache(maxsize=8)
def gauss_hermite_rule(n: int = 128) -> QuadratureRule:
    if n < 64:
        raise ValueError("oracle rules use at least 64 nodes")
    x, w = np.polynomial.hermite.hermgauss(n)
    return QuadratureRule(nodes=np.sqrt(2.0) * x, weights=w / np.sqrt(np.pi))


def gauss_hermite_expectation(fn, mu: float, v: float, nodes: int = 128) -> float:
    """E[fn(f)] for f ~ N(mu, v)."""
    return gauss_hermite_rule(nodes).expectation(fn, mu, v)


def _npdf(x, m, s2):
    return np.exp(-0.5 * (x - m) ** 2 / s2) / np.sqrt(2.0 * np.pi * s2)


def gaussian_marginal_quadrature(y, mu_f, v, sigma_obs_sq, nodes=128):
    """Integral of N(y; f, s2) N(f; mu_f, v) df by quadrature.

    The narrower of the two Gaussians (as functions of f) is used as the
    quadrature weight, so a sharply peaked integrand never has to be resolved
    by the node grid.
    """
    if v <= sigma_obs_sq:
        return gauss_hermite_expectation(lambda f: _npdf(y, f, sigma_obs_sq), mu_f, v, nodes)
    return gauss_hermite_expectation(lambda f: _npdf(f, mu_f, v), y, sigma_obs_sq, nodes)


def probit_marginal_quadrature(y, mu_f, v, c=1.0, nodes=128):
    """Integral of Phi(y f / c) N(f; mu_f, v) df by quadrature.

    For v > c^2 the integral is rewritten by parts as
    E_{g ~ N(0, c^2)}[Phi((y mu_f - g) / sqrt(v))].
    """
    if v <= c * c:
        return gauss_hermite_expectation(lambda f: special.ndtr(y * f / c), mu_f, v, nodes)
    return gauss_hermite_expectation(lambda g: special.ndtr((y * mu_f - g) / np.sqrt(v)), 0.0, c * c, nodes)
