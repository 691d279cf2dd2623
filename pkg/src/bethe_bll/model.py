"""Deterministic tanh backbone and the Gaussian last-layer posterior.

All trainable state is kept as named float64 matrices so the trainer can treat
the model as a flat ``{name: array}`` map.  Names:

``W1``, ``W2``
    backbone weights (``d x H``, ``H x H``); absent for the linear model.
``mu.k``, ``rho.k``, ``L.k``, ``log_alpha.k``
    head ``k``: posterior mean (``H x 1``), V2 log-variances (``H x 1``),
    V3 Cholesky factor with log-diagonal (``H x H``, lower triangle used),
    log prior precision (``1 x 1``).
``log_sigma_obs_sq``
    regression observation noise (``1 x 1``).
``tau1``, ``log_gaps``
    ordinal thresholds: first boundary (``1 x 1``) and log spacing of the rest
    (``(K-2) x 1``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .engine import Node, Tape

VARIANTS = ("V1", "V2", "V3")
TASKS = ("regression", "binary", "ova", "ordinal")

EPSILON = 1e-4
RHO_INIT = float(np.log(1e-2))
L_DIAG_INIT = 0.1


@dataclass
class ForwardMessage:
    """Per-sample Gaussian message at the latent output: mean ``mu_f`` and variance ``v`` (both N x 1)."""

    mu_f: Node
    v: Node


@dataclass
class BoundHead:
    variant: str
    mu: Node
    log_alpha: Node
    rho: Node | None = None
    L: Node | None = None
    epsilon: float = EPSILON

    @property
    def width(self) -> int:
        return self.mu.shape[0]


def cholesky_factor(L_raw: Node) -> Node:
    """Lower-triangular factor from raw storage whose diagonal holds log-values."""
    h = L_raw.shape[0]
    lower = np.tril(np.ones((h, h)), -1)
    return E.hadamard(L_raw, lower) + E.hadamard(E.exp(L_raw), np.eye(h))


def features(weights: list[Node], X: Node) -> Node:
    """tanh(X W1) [then tanh(. W2)], no biases.  An empty weight list is the identity map."""
    h = X
    for W in weights:
        if h.shape[1] != W.shape[0]:
            raise E.ShapeError(f"features: input has {h.shape[1]} columns, layer expects {W.shape[0]}")
        h = E.tanh(E.matmul(h, W))
    return h


def _row_sq_norm(Psi: Node) -> Node:
    return E.sum(E.square(Psi), axis=1)


def forward_message(head: BoundHead, Psi: Node) -> ForwardMessage:
    mu_f = E.matmul(Psi, head.mu)
    n = Psi.shape[0]
    if head.variant == "V1":
        v = Psi.tape.const(np.zeros((n, 1)))
    elif head.variant == "V2":
        v = E.matmul(E.square(Psi), E.exp(head.rho))
        if head.epsilon:
            v = v + E.scale(_row_sq_norm(Psi), head.epsilon)
    elif head.variant == "V3":
        v = _row_sq_norm(E.matmul(Psi, cholesky_factor(head.L)))
        if head.epsilon:
            v = v + E.scale(_row_sq_norm(Psi), head.epsilon)
    else:
        raise ValueError(f"unknown variant {head.variant!r}")
    return ForwardMessage(mu_f, v)


def sigma_eff(head: BoundHead) -> Node | None:
    """Sigma + eps I as a dense node; ``None`` for V1 (Sigma = 0)."""
    h = head.width
    eye = np.eye(h)
    if head.variant == "V1":
        return None
    if head.variant == "V2":
        diag = E.broadcast_row(E.transpose(E.exp(head.rho)), h)
        sig = E.hadamard(diag, eye)
    else:
        L = cholesky_factor(head.L)
        sig = E.matmul(L, E.transpose(L))
    if head.epsilon:
        sig = sig + head.epsilon * eye
    return sig


def backbone_l2(weights: list[Node], lambda_bb: float, tape: Tape) -> Node:
    total = tape.const(0.0)
    for W in weights:
        total = total + E.sum(E.square(W))
    return E.scale(total, lambda_bb)


# ---------------------------------------------------------------------------
# numpy-side model state


@dataclass
class Backbone:
    weights: list[np.ndarray] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.weights)

    @classmethod
    def init(cls, d_in: int, width: int, depth: int, rng: np.random.Generator) -> "Backbone":
        if depth not in (0, 1, 2):
            raise ValueError("depth must be 0 (linear), 1 or 2")
        ws = []
        fan_in = d_in
        for _ in range(depth):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_in, width)))
            fan_in = width
        return cls(ws)


@dataclass
class LastLayerPosterior:
    variant: str
    mu: np.ndarray
    log_alpha: float = 0.0
    rho: np.ndarray | None = None
    L: np.ndarray | None = None
    epsilon: float = EPSILON

    @classmethod
    def init(cls, variant: str, width: int, epsilon: float = EPSILON, log_alpha: float = 0.0):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        rho = np.full((width, 1), RHO_INIT) if variant == "V2" else None
        L = np.diag(np.full(width, np.log(L_DIAG_INIT))) if variant == "V3" else None
        return cls(variant, np.zeros((width, 1)), log_alpha, rho, L, epsilon)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    def sigma(self) -> np.ndarray:
        """Implied Sigma without jitter."""
        h = self.mu.shape[0]
        if self.variant == "V1":
            return np.zeros((h, h))
        if self.variant == "V2":
            return np.diag(np.exp(self.rho[:, 0]))
        L = np.tril(self.L, -1) + np.diag(np.exp(np.diag(self.L)))
        return L @ L.T

    def bind(self, tape: Tape) -> BoundHead:
        return BoundHead(
            self.variant,
            tape.const(self.mu),
            tape.const(self.log_alpha),
            None if self.rho is None else tape.const(self.rho),
            None if self.L is None else tape.const(self.L),
            self.epsilon,
        )

    def message(self, Psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(mu_f, v) as flat arrays for a fixed feature matrix."""
        t = Tape()
        m = forward_message(self.bind(t), t.const(Psi))
        return m.mu_f.value[:, 0], m.v.value[:, 0]


@dataclass
class BLLModel:
    """Backbone plus one or more last-layer heads and task-specific extras."""

    task: str
    variant: str
    params: dict[str, np.ndarray]
    n_heads: int = 1
    n_classes: int = 2
    depth: int = 1
    epsilon: float = EPSILON
    c: float = 1.0

    @classmethod
    def init(
        cls,
        task: str,
        variant: str,
        d_in: int,
        rng: np.random.Generator,
        *,
        width: int = 50,
        depth: int = 1,
        n_classes: int = 2,
        epsilon: float = EPSILON,
        c: float = 1.0,
        log_alpha: float = 0.0,
        sigma_obs_sq: float = 1.0,
    ) -> "BLLModel":
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        backbone = Backbone.init(d_in, width, depth, rng)
        h = width if depth else d_in
        params: dict[str, np.ndarray] = {f"W{i + 1}": w for i, w in enumerate(backbone.weights)}
        n_heads = n_classes if task == "ova" else 1
        for k in range(n_heads):
            head = LastLayerPosterior.init(variant, h, epsilon, log_alpha)
            params[f"mu.{k}"] = head.mu
            params[f"log_alpha.{k}"] = np.array([[log_alpha]])
            if head.rho is not None:
                params[f"rho.{k}"] = head.rho
            if head.L is not None:
                params[f"L.{k}"] = head.L
        if task == "regression":
            params["log_sigma_obs_sq"] = np.array([[np.log(sigma_obs_sq)]])
        if task == "ordinal":
            if n_classes < 2:
                raise ValueError("ordinal head needs at least two classes")
            params["tau1"] = np.array([[-(n_classes - 2) / 2.0]])
            params["log_gaps"] = np.zeros((n_classes - 2, 1))
        return cls(task, variant, params, n_heads, n_classes, depth, epsilon, c)

    @property
    def width(self) -> int:
        return self.params["mu.0"].shape[0]

    def copy(self) -> "BLLModel":
        return BLLModel(
            self.task, self.variant, {k: v.copy() for k, v in self.params.items()},
            self.n_heads, self.n_classes, self.depth, self.epsilon, self.c,
        )

    def head(self, k: int = 0) -> LastLayerPosterior:
        p = self.params
        return LastLayerPosterior(
            self.variant, p[f"mu.{k}"], float(p[f"log_alpha.{k}"][0, 0]),
            p.get(f"rho.{k}"), p.get(f"L.{k}"), self.epsilon,
        )

    def alphas(self) -> list[float]:
        return [float(np.exp(self.params[f"log_alpha.{k}"][0, 0])) for k in range(self.n_heads)]

    @property
    def sigma_obs_sq(self) -> float | None:
        p = self.params.get("log_sigma_obs_sq")
        return None if p is None else float(np.exp(p[0, 0]))

    def thresholds(self) -> np.ndarray:
        tau1 = self.params["tau1"][0, 0]
        return tau1 + np.concatenate([[0.0], np.cumsum(np.exp(self.params["log_gaps"][:, 0]))])

    def bind(self, tape: Tape, trainable=()) -> "BoundModel":
        nodes = {k: (tape.param(v) if k in trainable else tape.const(v)) for k, v in self.params.items()}
        return BoundModel(self, tape, nodes)

    # checkpoint ------------------------------------------------------------

    def save(self, path) -> None:
        meta = dict(
            task=self.task, variant=self.variant, n_heads=self.n_heads, n_classes=self.n_classes,
            depth=self.depth, epsilon=self.epsilon, c=self.c,
        )
        np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **self.params)

    @classmethod
    def load(cls, path) -> "BLLModel":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            params = {k: z[k].astype(np.float64) for k in z.files if k != "__meta__"}
        return cls(params=params, **meta)


@dataclass
class BoundModel:
    """A model whose parameters live on a tape."""

    model: BLLModel
    tape: Tape
    nodes: dict[str, Node]

    @property
    def weights(self) -> list[Node]:
        return [self.nodes[f"W{i + 1}"] for i in range(self.model.depth)]

    def head(self, k: int = 0) -> BoundHead:
        n = self.nodes
        return BoundHead(
            self.model.variant, n[f"mu.{k}"], n[f"log_alpha.{k}"],
            n.get(f"rho.{k}"), n.get(f"L.{k}"), self.model.epsilon,
        )

    def features(self, X) -> Node:
        return features(self.weights, self.tape.lift(X))

    def messages(self, X) -> list[ForwardMessage]:
        Psi = self.features(X)
        return [forward_message(self.head(k), Psi) for k in range(self.model.n_heads)]

    def taus(self) -> Node:
        """Ordered thresholds tau_1 < ... < tau_{K-1} as a (K-1) x 1 node."""
        k1 = self.model.n_classes - 1
        tau1 = self.nodes["tau1"]
        col = E.broadcast_row(tau1, k1)
        if k1 == 1:
            return col
        # row j of the cumulative-sum matrix adds gaps 1..j
        cum = np.tril(np.ones((k1, k1 - 1)), -1)
        return col + E.matmul(cum, E.exp(self.nodes["log_gaps"]))
