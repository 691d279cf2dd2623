"""Training objectives.

Every Bethe loss is ``prior_term + data_term + backbone_l2``.  The prior term
is -log of the Gaussian integral of q(w) against p(w) = N(0, 1/alpha I); the
data term is a sum over samples of -log of the observation likelihood
integrated against the forward message N(mu_f, v).  Backbone layers are
deterministic and contribute only their L2 penalty.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import Node
from .model import BoundModel, ForwardMessage, sigma_eff
from .special import LOG_2PI, gauss_hermite_rule, mills_ratio


@dataclass
class LossBreakdown:
    prior_term: Node
    data_term: Node
    backbone_l2: Node
    total: Node
    messages: list | None = None

    def values(self) -> dict[str, float]:
        return {
            "prior": self.prior_term.item(),
            "data": self.data_term.item(),
            "l2": self.backbone_l2.item(),
            "total": self.total.item(),
        }


def _breakdown(prior: Node, data: Node, l2: Node | None) -> LossBreakdown:
    tape = data.tape
    prior = tape.lift(prior) if prior is not None else tape.const(0.0)
    l2 = tape.lift(l2) if l2 is not None else tape.const(0.0)
    return LossBreakdown(prior, data, l2, prior + data + l2)


def _col(tape, y) -> Node:
    return tape.lift(np.asarray(y, dtype=np.float64).reshape(-1, 1))


@dataclass
class OrdinalThresholds:
    tau1: float
    log_gaps: np.ndarray

    def taus(self) -> np.ndarray:
        return self.tau1 + np.concatenate([[0.0], np.cumsum(np.exp(np.ravel(self.log_gaps)))])


# ---------------------------------------------------------------------------
# prior


def prior_neg_log_z(mu: Node, Sigma_eff: Node | None, log_alpha: Node) -> Node:
    """-log N(mu; 0, Sigma_eff + I/alpha).  ``Sigma_eff=None`` means Sigma = 0."""
    tape = mu.tape
    h = mu.shape[0]
    log_alpha = tape.lift(log_alpha)
    const = 0.5 * h * LOG_2PI
    if Sigma_eff is None:
        quad = E.hadamard(E.exp(log_alpha), E.sum(E.square(mu)))
        return E.scale(quad, 0.5) - E.scale(log_alpha, 0.5 * h) + const
    inv_alpha = E.broadcast_row(E.exp(-log_alpha), h)
    M = Sigma_eff + E.hadamard(E.matmul(inv_alpha, np.ones((1, h))), np.eye(h))
    return E.scale(E.inv_quad(M, mu), 0.5) + E.scale(E.logdet_spd(M), 0.5) + const


# ---------------------------------------------------------------------------
# Bethe data terms


def regression_loss(msg: ForwardMessage, y, sigma_obs_sq, prior=None, l2=None) -> LossBreakdown:
    """Gaussian likelihood: sum_n -log N(y_n; mu_f, sigma_obs^2 + v_n) plus prior."""
    tape = msg.mu_f.tape
    n = msg.mu_f.shape[0]
    s2 = tape.lift(sigma_obs_sq)
    V = E.broadcast_row(s2, n) + msg.v
    if np.any(V.value <= 0):
        raise E.DomainError("predictive variance must be positive")
    log_V = E.log(V)
    r = _col(tape, y) - msg.mu_f
    per = E.scale(E.hadamard(E.square(r), E.exp(-log_V)) + log_V, 0.5)
    data = E.sum(per) + 0.5 * n * LOG_2PI
    return _breakdown(prior, data, l2)


def _probit_margin(msg: ForwardMessage, y_pm, c: float) -> Node:
    tape = msg.mu_f.tape
    if c <= 0:
        raise E.DomainError("probit scale must be positive")
    inv_d = E.rsqrt(msg.v + c * c)
    return E.hadamard(E.hadamard(_col(tape, y_pm), msg.mu_f), inv_d)


def binary_class_loss(msg: ForwardMessage, y_pm, c: float = 1.0, prior=None, l2=None) -> LossBreakdown:
    """Probit likelihood, labels in {-1, +1}: sum_n -log Phi(y_n mu_f / sqrt(c^2 + v_n))."""
    t = _probit_margin(msg, y_pm, c)
    return _breakdown(prior, -E.sum(E.log_ndtr(t)), l2)


def ova_loss(msgs: list[ForwardMessage], labels, c: float = 1.0, priors=None, l2=None) -> LossBreakdown:
    """K independent binary probit heads; head k sees +1 for class k and -1 otherwise."""
    labels = np.asarray(labels).ravel()
    k_cls = len(msgs)
    if k_cls < 2:
        raise ValueError("one-vs-all needs at least two heads")
    if labels.min() < 0 or labels.max() >= k_cls:
        raise ValueError(f"labels must lie in 0..{k_cls - 1}")
    tape = msgs[0].mu_f.tape
    data = tape.const(0.0)
    prior = tape.const(0.0)
    for k, msg in enumerate(msgs):
        y_k = np.where(labels == k, 1.0, -1.0)
        data = data + binary_class_loss(msg, y_k, c).data_term
    for p in priors or ():
        prior = prior + p
    return _breakdown(prior, data, l2)


def ordinal_log_probs(msg: ForwardMessage, labels, taus: Node, c: float = 1.0) -> Node:
    """log P(y_n = label_n) under the cumulative probit model, N x 1."""
    tape = msg.mu_f.tape
    labels = np.asarray(labels).ravel().astype(int)
    k1 = taus.shape[0]
    n = labels.shape[0]
    if labels.min() < 0 or labels.max() > k1:
        raise ValueError(f"labels must lie in 0..{k1}")
    upper = np.zeros((n, k1))
    lower = np.zeros((n, k1))
    has_upper = labels < k1
    has_lower = labels > 0
    upper[np.flatnonzero(has_upper), labels[has_upper]] = 1.0
    lower[np.flatnonzero(has_lower), labels[has_lower] - 1] = 1.0
    inv_d = E.rsqrt(msg.v + c * c)
    a = E.hadamard(E.matmul(upper, taus) - msg.mu_f, inv_d)
    b = E.hadamard(E.matmul(lower, taus) - msg.mu_f, inv_d)
    return E.ndtr_interval_log(
        a, b, upper_open=~has_upper.reshape(-1, 1), lower_open=~has_lower.reshape(-1, 1)
    )


def ordinal_loss(msg: ForwardMessage, labels, taus: Node, c: float = 1.0, prior=None, l2=None) -> LossBreakdown:
    """Single latent thresholded at ``taus``: sum_n -log(Phi(t+) - Phi(t-)); one shared prior."""
    return _breakdown(prior, -E.sum(ordinal_log_probs(msg, labels, taus, c)), l2)


def ordinal_probs(mu_f, v, taus, c: float = 1.0) -> np.ndarray:
    """Class probabilities N x K from cumulative probit differences."""
    from scipy.special import ndtr

    mu_f = np.asarray(mu_f, dtype=np.float64).reshape(-1, 1)
    d = np.sqrt(c * c + np.asarray(v, dtype=np.float64).reshape(-1, 1))
    cdf = ndtr((np.asarray(taus, dtype=np.float64).reshape(1, -1) - mu_f) / d)
    n = mu_f.shape[0]
    cdf = np.hstack([np.zeros((n, 1)), cdf, np.ones((n, 1))])
    return np.diff(cdf, axis=1)


# ---------------------------------------------------------------------------
# MAP baselines


def _weight_penalty(weights, lambda_ll: float, tape) -> Node:
    if isinstance(weights, Node):
        weights = [weights]
    return E.scale(sum_sq(weights, tape), lambda_ll)


def map_regression_loss(preds: Node, y, weights, lambda_ll: float = 0.1, sigma_obs_sq: float = 1.0, l2=None) -> LossBreakdown:
    """Squared-error NLL at fixed observation noise plus lambda_ll ||w||^2."""
    tape = preds.tape
    n = preds.shape[0]
    r = _col(tape, y) - preds
    data = E.scale(E.sum(E.square(r)), 0.5 / sigma_obs_sq) + 0.5 * n * np.log(2.0 * np.pi * sigma_obs_sq)
    return _breakdown(_weight_penalty(weights, lambda_ll, tape), data, l2)


def map_probit_loss(logits: Node, y_pm, weights, lambda_ll: float = 0.1, c: float = 1.0, l2=None) -> LossBreakdown:
    """Probit cross-entropy sum_n -log Phi(y_n logit_n / c) plus lambda_ll ||w||^2."""
    tape = logits.tape
    t = E.scale(E.hadamard(_col(tape, y_pm), logits), 1.0 / c)
    return _breakdown(_weight_penalty(weights, lambda_ll, tape), -E.sum(E.log_ndtr(t)), l2)


# ---------------------------------------------------------------------------
# model-level objectives


def _labels_pm(y) -> np.ndarray:
    return 2.0 * np.asarray(y, dtype=np.float64).ravel() - 1.0


def bethe_objective(bm: BoundModel, X, y, lambda_bb: float = 0.01, sigma_obs_sq=None) -> LossBreakdown:
    """Bethe free energy of a bound model on (X, y).

    ``sigma_obs_sq`` overrides the model's own observation noise (FS variant).
    """
    model = bm.model
    msgs = bm.messages(X)
    l2 = E.scale(sum_sq(bm.weights, bm.tape), lambda_bb)
    priors = [prior_neg_log_z(bm.head(k).mu, sigma_eff(bm.head(k)), bm.head(k).log_alpha) for k in range(model.n_heads)]
    if model.task == "regression":
        s2 = E.exp(bm.nodes["log_sigma_obs_sq"]) if sigma_obs_sq is None else sigma_obs_sq
        out = regression_loss(msgs[0], y, s2, priors[0], l2)
    elif model.task == "binary":
        out = binary_class_loss(msgs[0], _labels_pm(y), model.c, priors[0], l2)
    elif model.task == "ova":
        out = ova_loss(msgs, y, model.c, priors, l2)
    else:
        out = ordinal_loss(msgs[0], y, bm.taus(), model.c, priors[0], l2)
    out.messages = msgs
    return out


def map_objective(bm: BoundModel, X, y, lambda_ll: float = 0.1, lambda_bb: float = 0.01, sigma_obs_sq: float = 1.0) -> LossBreakdown:
    """Point-estimate training: the same heads with v = 0 and lambda_ll ||mu||^2 in place of the prior."""
    model = bm.model
    tape = bm.tape
    Psi = bm.features(X)
    l2 = E.scale(sum_sq(bm.weights, tape), lambda_bb)
    mus = [bm.nodes[f"mu.{k}"] for k in range(model.n_heads)]
    logits = [E.matmul(Psi, m) for m in mus]
    if model.task == "regression":
        return map_regression_loss(logits[0], y, mus, lambda_ll, sigma_obs_sq, l2)
    if model.task == "binary":
        return map_probit_loss(logits[0], _labels_pm(y), mus, lambda_ll, model.c, l2)
    zero = tape.const(np.zeros((Psi.shape[0], 1)))
    msgs = [ForwardMessage(f, zero) for f in logits]
    penalty = _weight_penalty(mus, lambda_ll, tape)
    if model.task == "ova":
        return ova_loss(msgs, y, model.c, [penalty], l2)
    return ordinal_loss(msgs[0], y, bm.taus(), model.c, penalty, l2)


def sum_sq(weights, tape) -> Node:
    total = tape.const(0.0)
    for w in weights:
        total = total + E.sum(E.square(w))
    return total


# ---------------------------------------------------------------------------
# reference quantities (test / verify only)


def elbo_data_term(mu_f, v, y, kind: str, scale: float = 1.0, nodes: int = 128) -> float:
    """sum_n E_{N(mu_f, v)}[-log p(y_n | f)] by Gauss-Hermite.

    ``kind`` is ``"gaussian"`` (``scale`` = sigma_obs^2) or ``"probit"``
    (``scale`` = c, labels in {-1, +1}).
    """
    from scipy.special import log_ndtr

    rule = gauss_hermite_rule(nodes)
    total = 0.0
    for m, vn, yn in zip(np.ravel(mu_f), np.ravel(v), np.ravel(y)):
        if kind == "gaussian":
            fn = lambda f: 0.5 * (yn - f) ** 2 / scale + 0.5 * np.log(2 * np.pi * scale)  # noqa: E731
        elif kind == "probit":
            fn = lambda f: -log_ndtr(yn * f / scale)  # noqa: E731
        else:
            raise ValueError(f"unknown likelihood kind {kind!r}")
        total += rule.expectation(fn, m, vn)
    return total


def dloss_dv_probit(t, c, v):
    """d/dv of -log Phi(y mu_f / sqrt(c^2 + v)), written in terms of the margin t."""
    t = np.asarray(t, dtype=np.float64)
    return 0.5 * mills_ratio(t) * t / (c * c + np.asarray(v))


def dloss_dv_gauss(resid, V):
    """d/dv of -log N(y; mu_f, sigma^2 + v) at V = sigma^2 + v."""
    V = np.asarray(V, dtype=np.float64)
    return (1.0 - np.square(resid) / V) / (2.0 * V)
