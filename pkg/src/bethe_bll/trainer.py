"""Full-batch training with validation-NLL early stopping.

Regimes for the prior precision:

* ``eb``: log alpha is trained jointly with everything else;
* ``fixed``: alpha is pinned to ``config.alpha``;
* ``cv``: one fixed-alpha run per grid value, best validation NLL wins.

``fs=True`` (regression only) runs a short MAP warm phase, sets the
observation noise to the validation MSE and freezes it for the Bethe phase.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine as E
from . import metrics as M
from .data import Splits
from .engine import Tape
from .losses import bethe_objective, map_objective
from .model import TASKS, VARIANTS, BLLModel

log = logging.getLogger(__name__)

CV_GRID = (0.01, 0.1, 1.0, 10.0)
RUNAWAY_ALPHA = 1e4
TRAJECTORY_COLUMNS = [
    "step", "train_total", "train_prior", "train_data", "val_nll", "test_nll", "alpha", "sigma_obs_sq", "mean_v",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    task: str = "regression"
    variant: str = "V3"
    method: str = "bethe"  # "bethe" or "map"
    depth: int = 1
    width: int = 50
    lr: float = 0.03
    max_steps: int = 5000
    patience: int = 50
    min_improvement: float = 1e-6
    regime: str = "eb"
    alpha: float = 1.0
    grid: tuple = CV_GRID
    fs: bool = False
    fs_warm_steps: int = 500
    lambda_bb: float = 0.01
    lambda_ll: float = 0.1
    c: float = 1.0
    epsilon: float = 1e-4
    seed: int = 0
    track_test: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.method not in ("bethe", "map"):
            raise ValueError("method must be 'bethe' or 'map'")
        if self.regime not in ("eb", "fixed", "cv"):
            raise ValueError("regime must be 'eb', 'fixed' or 'cv'")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.regime == "cv" and not len(self.grid):
            raise ValueError("cv regime needs a non-empty grid")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.fs and self.task != "regression":
            raise ValueError("the fixed-sigma variant only applies to regression")


# ---------------------------------------------------------------------------
# optimiser and stopping rule


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> dict:
    """One bias-corrected Adam update of ``params`` (in place); returns ``params``."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        params[k] = params[k] - lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + state.eps)
    return params


class EarlyStopper:
    """Stop once ``patience`` consecutive checks fail to improve by more than ``min_improvement``."""

    def __init__(self, patience: int = 50, min_improvement: float = 1e-6):
        self.patience = patience
        self.min_improvement = min_improvement
        self.best = np.inf
        self.wait = 0

    def update(self, value: float) -> tuple[bool, bool]:
        """Returns (improved, stop)."""
        if value < self.best - self.min_improvement:
            self.best = value
            self.wait = 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


# ---------------------------------------------------------------------------
# prediction


def _forward(model: BLLModel, X):
    t = Tape()
    bm = model.bind(t)
    msgs = bm.messages(X)
    return [m.mu_f.value[:, 0] for m in msgs], [m.v.value[:, 0] for m in msgs]


def predict(model: BLLModel, X, y_mean: float = 0.0):
    """Closed-form predictive: RegressionPredictive or ClassPredictive."""
    mus, vs = _forward(model, X)
    if model.task == "regression":
        return M.RegressionPredictive(mus[0] + y_mean, model.sigma_obs_sq + vs[0])
    if model.task == "binary":
        return M.predictive_binary(mus[0], vs[0], model.c)
    if model.task == "ova":
        return M.predictive_ova(mus, vs, model.c)
    return M.predictive_ordinal(mus[0], vs[0], model.thresholds(), model.c)


def nll(pred, y) -> float:
    if isinstance(pred, M.RegressionPredictive):
        return M.gaussian_nll(pred, y)
    return M.class_nll(pred, y)


def evaluate(pred, y) -> dict[str, float]:
    if isinstance(pred, M.RegressionPredictive):
        return {"nll": M.gaussian_nll(pred, y), "rmse": M.rmse(pred, y), "calib_err": M.calib_err(pred, y)}
    return {"nll": M.class_nll(pred, y), "acc": M.accuracy(pred, y), "ece": M.ece(pred, y)}


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: BLLModel
    trajectory: list[dict]
    best_step: int
    val_nll: float
    config: TrainConfig
    flags: dict = field(default_factory=dict)

    @property
    def oracle_test_nll(self) -> float:
        vals = [r["test_nll"] for r in self.trajectory if np.isfinite(r["test_nll"])]
        return min(vals) if vals else float("nan")

    def write_trajectory(self, path) -> None:
        write_trajectory(self.trajectory, path)


def write_trajectory(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_COLUMNS)
        for r in records:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in TRAJECTORY_COLUMNS[1:]])


def _trainable(model: BLLModel, cfg: TrainConfig, freeze_sigma: bool) -> set[str]:
    names = set(model.params)
    if cfg.method == "map":
        return {k for k in names if k[0] == "W" or k.startswith("mu.") or k in ("tau1", "log_gaps")}
    if cfg.regime != "eb":
        names -= {k for k in names if k.startswith("log_alpha.")}
    if freeze_sigma:
        names.discard("log_sigma_obs_sq")
    return names


def _val_mse(model: BLLModel, X, y) -> float:
    mus, _ = _forward(model, X)
    return float(np.mean((np.ravel(y) - mus[0]) ** 2))


def _diagnostics(model: BLLModel, X) -> dict:
    out = {"alpha": model.alphas(), "sigma_obs_sq": model.sigma_obs_sq}
    try:
        _, vs = _forward(model, X)
        v = np.concatenate(vs)
        out.update(v_mean=float(v.mean()), v_min=float(v.min()), v_max=float(v.max()))
    except (E.EngineError, np.linalg.LinAlgError, FloatingPointError) as exc:
        out["v_error"] = str(exc)
    return out


def _init_model(cfg: TrainConfig, sp: Splits, rng) -> BLLModel:
    variant = "V1" if cfg.method == "map" else cfg.variant
    n_classes = sp.n_classes if sp.task == "classification" else 2
    s2 = float(np.var(sp.y_train)) if cfg.task == "regression" else 1.0
    return BLLModel.init(
        cfg.task, variant, sp.d, rng, width=cfg.width, depth=cfg.depth, n_classes=max(n_classes, 2),
        epsilon=cfg.epsilon, c=cfg.c, log_alpha=float(np.log(cfg.alpha)), sigma_obs_sq=max(s2, 1e-12),
    )


def _map_warmup(model: BLLModel, cfg: TrainConfig, sp: Splits, steps: int) -> None:
    names = {k for k in model.params if k[0] == "W" or k.startswith("mu.")}
    state = AdamState()
    for _ in range(steps):
        t = Tape()
        bm = model.bind(t, names)
        loss = map_objective(bm, sp.X_train, sp.y_train, cfg.lambda_ll, cfg.lambda_bb)
        g = t.backward(loss.total)
        adam_step(state, model.params, {k: g[bm.nodes[k].id] for k in names}, cfg.lr)


def train(cfg: TrainConfig, sp: Splits, model: BLLModel | None = None) -> TrainResult:
    """Train one model; returns the checkpoint with the lowest validation NLL."""
    if cfg.regime == "cv":
        return cv_select(cfg, sp)[1]
    if len(sp.y_train) == 0 or len(sp.y_val) == 0:
        raise ValueError("train and validation folds must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    model = model.copy() if model is not None else _init_model(cfg, sp, rng)
    is_map = cfg.method == "map"
    regression = cfg.task == "regression"

    try:
        if cfg.fs:
            _map_warmup(model, cfg, sp, cfg.fs_warm_steps)
            model.params["log_sigma_obs_sq"] = np.array([[np.log(_val_mse(model, sp.X_val, sp.y_val))]])
    except (E.EngineError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise TrainingDiverged(f"MAP warm phase failed: {exc}", _diagnostics(model, sp.X_train)) from exc

    names = _trainable(model, cfg, freeze_sigma=cfg.fs or is_map)
    state = AdamState()
    stopper = EarlyStopper(cfg.patience, cfg.min_improvement)
    s2_init = model.sigma_obs_sq
    traj: list[dict] = []
    best, best_step, best_val = model.copy(), 0, np.inf
    flags = {"alpha_runaway": False, "variance_starvation": False}

    for step in range(cfg.max_steps):
        try:
            if is_map and regression:
                # plug-in noise for the MAP predictive: current validation MSE
                model.params["log_sigma_obs_sq"] = np.array([[np.log(max(_val_mse(model, sp.X_val, sp.y_val), 1e-300))]])
            t = Tape()
            bm = model.bind(t, names)
            if is_map:
                loss = map_objective(bm, sp.X_train, sp.y_train, cfg.lambda_ll, cfg.lambda_bb)
            else:
                loss = bethe_objective(bm, sp.X_train, sp.y_train, cfg.lambda_bb)
            grads = t.backward(loss.total)
            val = nll(predict(model, sp.X_val), sp.y_val)
            test = nll(predict(model, sp.X_test), sp.y_test) if cfg.track_test else float("nan")
            if not np.isfinite(loss.total.item()) or not np.isfinite(val):
                raise E.NonFiniteError("non-finite loss")
        except (E.EngineError, np.linalg.LinAlgError, FloatingPointError) as exc:
            diag = _diagnostics(model, sp.X_train)
            log.warning("training diverged at step %d: %s %s", step, exc, diag)
            raise TrainingDiverged(f"step {step}: {exc}", diag) from exc

        lv = loss.values()
        alphas = model.alphas()
        mean_v = float(np.mean([m.v.value.mean() for m in loss.messages])) if loss.messages else 0.0
        rec = dict(
            step=step, train_total=lv["total"], train_prior=lv["prior"], train_data=lv["data"],
            val_nll=val, test_nll=test, alpha=float(np.exp(np.mean(np.log(alphas)))),
            sigma_obs_sq=model.sigma_obs_sq if regression else float("nan"), mean_v=mean_v,
        )
        traj.append(rec)
        if not is_map and max(alphas) > RUNAWAY_ALPHA:
            flags["alpha_runaway"] = True
        if regression and not is_map and model.sigma_obs_sq < 0.1 * s2_init and mean_v < 0.01 * model.sigma_obs_sq:
            flags["variance_starvation"] = True

        improved, stop = stopper.update(val)
        if improved:
            best, best_step, best_val = model.copy(), step, val
        if stop:
            break
        adam_step(state, model.params, {k: grads[bm.nodes[k].id] for k in names}, cfg.lr)

    return TrainResult(best, traj, best_step, best_val, cfg, flags)


def cv_select(cfg: TrainConfig, sp: Splits, grid=None) -> tuple[float, TrainResult]:
    """Train one fixed-alpha model per grid value and keep the best validation NLL.

    Diverged grid points are skipped.  Ties go to the larger alpha.
    """
    grid = tuple(cfg.grid if grid is None else grid)
    best_alpha, best = None, None
    for a in sorted(grid, reverse=True):
        try:
            res = train(replace(cfg, regime="fixed", alpha=float(a)), sp)
        except TrainingDiverged as exc:
            log.info("cv: alpha=%g diverged (%s)", a, exc)
            continue
        if not np.isfinite(res.val_nll):
            continue
        if best is None or res.val_nll < best.val_nll:
            best_alpha, best = float(a), res
    if best is None:
        raise TrainingDiverged("every grid point diverged")
    best.flags["cv_alpha"] = best_alpha
    return best_alpha, best


def closed_form_alpha_v1(mu) -> float:
    """Stationary prior precision for Sigma = 0: H / ||mu||^2."""
    mu = np.ravel(mu)
    sq = float(mu @ mu)
    if sq == 0:
        raise ValueError("alpha is unbounded at mu = 0")
    return mu.size / sq


# ---------------------------------------------------------------------------
# deep ensemble


@dataclass
class Ensemble:
    members: list[BLLModel]
    results: list[TrainResult]

    def predict(self, X, y_mean: float = 0.0):
        preds = [predict(m, X, y_mean) for m in self.members]
        if isinstance(preds[0], M.RegressionPredictive):
            return mixture_moments([p.mean for p in preds], [p.variance for p in preds])
        return M.ClassPredictive(np.mean([p.probs for p in preds], axis=0))


def mixture_moments(means, variances) -> M.RegressionPredictive:
    """Gaussian matching the first two moments of an equal-weight mixture."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    mean = means.mean(axis=0)
    var = (variances + means ** 2).mean(axis=0) - mean ** 2
    return M.RegressionPredictive(mean, np.maximum(var, 1e-300))


def deep_ensemble(cfg: TrainConfig, sp: Splits, M_: int = 5) -> Ensemble:
    """M MAP models with seeds seed..seed+M-1."""
    if M_ < 2:
        raise ValueError("an ensemble needs at least two members")
    results = [train(replace(cfg, method="map", regime="fixed", fs=False, seed=cfg.seed + i), sp) for i in range(M_)]
    return Ensemble([r.model for r in results], results)
