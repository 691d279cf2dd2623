"""Self-check suites: quadrature oracle, gradient checks and ordering properties.

Each ``check_*`` function returns a :class:`CheckResult` carrying the worst
measured error and the tolerance it was held to.  ``run_suites`` runs a
selection and ``mutated_adjoint`` injects a sign error into one backward rule
to confirm the gradient suite notices.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import engine as E
from . import losses as Lo
from . import metrics as M
from .engine import Tape
from .model import BLLModel, ForwardMessage
from .special import gaussian_marginal_quadrature, probit_marginal_quadrature


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tol: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: worst={self.worst:.3e} tol={self.tol:.1e} ({self.seconds:.2f}s) {self.detail}".rstrip()


def _msg(tape: Tape, mu_f, v) -> ForwardMessage:
    return ForwardMessage(tape.const(np.reshape(mu_f, (-1, 1))), tape.const(np.reshape(v, (-1, 1))))


def _timed(fn):
    def wrapper(*a, **kw):
        t0 = time.perf_counter()
        res = fn(*a, **kw)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ---------------------------------------------------------------------------
# per-sample losses through the engine


def reg_sample_loss(y, mu_f, v, s2) -> float:
    t = Tape()
    return Lo.regression_loss(_msg(t, mu_f, v), [y], s2).data_term.item()


def probit_sample_loss(y_pm, mu_f, v, c) -> float:
    t = Tape()
    return Lo.binary_class_loss(_msg(t, mu_f, v), [y_pm], c).data_term.item()


# ---------------------------------------------------------------------------
# convolution exactness


@_timed
def check_convolution(n_configs: int = 125, seed: int = 0, tol: float = 1e-8) -> CheckResult:
    """Closed-form data terms against -log of 128-node Gauss-Hermite marginals."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        mu = rng.uniform(-3, 3)
        v = rng.uniform(0, 10)
        c = float(rng.choice([0.5, 1.0, 2.0]))
        s = c * c
        y = mu + rng.normal() * np.sqrt(v + s)
        worst = max(worst, abs(reg_sample_loss(y, mu, v, s) + np.log(gaussian_marginal_quadrature(y, mu, v, s))))
        y_pm = rng.choice([-1.0, 1.0])
        worst = max(worst, abs(probit_sample_loss(y_pm, mu, v, c) + np.log(probit_marginal_quadrature(y_pm, mu, v, c))))
    return CheckResult("convolution", worst <= tol, worst, tol, f"{n_configs} configs x 2 likelihoods")


# ---------------------------------------------------------------------------
# gradient checks


def _random_model(task: str, variant: str, rng, d=2, width=3, depth=1, K=3, epsilon=1e-4) -> BLLModel:
    m = BLLModel.init(task, variant, d, rng, width=width, depth=depth, n_classes=K if task in ("ova", "ordinal") else 2,
                      epsilon=epsilon)
    for k, p in m.params.items():
        if k[0] == "W" or k.startswith("mu.") or k in ("tau1", "log_gaps"):
            m.params[k] = rng.normal(0, 0.7, p.shape)
        elif k.startswith("rho."):
            m.params[k] = rng.uniform(-3, 0, p.shape)
        elif k.startswith("L."):
            m.params[k] = np.tril(rng.normal(0, 0.3, p.shape), -1) + np.diag(rng.uniform(-1.5, 0, p.shape[0]))
        elif k.startswith("log_alpha.") or k == "log_sigma_obs_sq":
            m.params[k] = rng.uniform(-1, 1, p.shape)
    return m


def _labels(task, rng, n, K=3):
    if task == "regression":
        return rng.normal(size=n)
    return rng.integers(0, 2 if task == "binary" else K, size=n)


def grad_rel_error(objective, model: BLLModel, h: float = 1e-5) -> float:
    """Worst per-leaf ||g_ad - g_fd|| / max(||g_fd||, 1e-8) with central differences."""
    names = sorted(model.params)
    t = Tape()
    bm = model.bind(t, names)
    g = t.backward(objective(bm))
    worst = 0.0
    for k in names:
        ad = g[bm.nodes[k].id]
        fd = np.zeros_like(ad)
        p = model.params[k]
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = objective(model.bind(Tape())).item()
            p[idx] = old - h
            fm = objective(model.bind(Tape())).item()
            p[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        worst = max(worst, float(np.linalg.norm(ad - fd) / max(np.linalg.norm(fd), 1e-8)))
    return worst


def gradient_cases():
    """(name, task, variant, objective builder) for every loss family."""
    cases = []
    for task in ("regression", "binary", "ova", "ordinal"):
        for variant in ("V1", "V2", "V3"):
            cases.append((f"bethe-{task}-{variant}", task, variant, "bethe"))
        cases.append((f"map-{task}", task, "V1", "map"))
    for variant in ("V1", "V2", "V3"):
        cases.append((f"prior-{variant}", "regression", variant, "prior"))
    return cases


def _objective(kind, X, y):
    if kind == "bethe":
        return lambda bm: Lo.bethe_objective(bm, X, y).total
    if kind == "map":
        return lambda bm: Lo.map_objective(bm, X, y).total
    return lambda bm: Lo.prior_neg_log_z(bm.head().mu, Lo.sigma_eff(bm.head()), bm.head().log_alpha)


@_timed
def check_gradients(points: int = 20, seed: int = 0, tol: float = 1e-4, n: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, where = 0.0, ""
    for name, task, variant, kind in gradient_cases():
        for _ in range(points):
            model = _random_model(task, variant, rng)
            X = rng.normal(size=(n, 2))
            err = grad_rel_error(_objective(kind, X, _labels(task, rng, n)), model)
            if err > worst:
                worst, where = err, name
    return CheckResult("gradients", worst <= tol, worst, tol, f"{len(gradient_cases())} losses x {points} points; worst in {where}")


# ---------------------------------------------------------------------------
# Jensen ordering


@_timed
def check_jensen(n: int = 1000, seed: int = 0, tol_equal: float = 1e-9) -> CheckResult:
    """Bethe data term < ELBO data term for v > 0, equal at v = 0."""
    rng = np.random.default_rng(seed)
    min_gap, worst_eq = np.inf, 0.0
    for i in range(n):
        mu = rng.uniform(-3, 3)
        v = rng.uniform(0.05, 5.0)
        if i % 2:
            s = rng.uniform(0.2, 3.0)
            y = mu + rng.normal() * np.sqrt(s + v)
            bethe, elbo = reg_sample_loss(y, mu, v, s), Lo.elbo_data_term([mu], [v], [y], "gaussian", s)
            eq = abs(reg_sample_loss(y, mu, 0.0, s) - Lo.elbo_data_term([mu], [0.0], [y], "gaussian", s))
        else:
            c = rng.uniform(0.5, 2.0)
            y = rng.choice([-1.0, 1.0])
            bethe, elbo = probit_sample_loss(y, mu, v, c), Lo.elbo_data_term([mu], [v], [y], "probit", c)
            eq = abs(probit_sample_loss(y, mu, 0.0, c) - Lo.elbo_data_term([mu], [0.0], [y], "probit", c))
        min_gap = min(min_gap, elbo - bethe)
        worst_eq = max(worst_eq, eq)
    ok = min_gap > 0 and worst_eq <= tol_equal
    return CheckResult("jensen", ok, worst_eq, tol_equal, f"min gap {min_gap:.3e} over {n} instances")


# ---------------------------------------------------------------------------
# MAP limit


def _collapse(model: BLLModel, rho: float = -30.0) -> None:
    for k, p in model.params.items():
        if k.startswith("rho."):
            p[...] = rho
        elif k.startswith("L."):
            p[...] = np.diag(np.full(p.shape[0], rho / 2.0))


@_timed
def check_map_limit(instances: int = 20, seed: int = 0, tol: float = 1e-6, n: int = 8) -> CheckResult:
    """Sigma -> 0 (rho = -30, no jitter): Bethe data terms equal MAP data terms, priors equal the V1 prior."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        for task in ("regression", "binary", "ova", "ordinal"):
            for variant in ("V2", "V3"):
                model = _random_model(task, variant, rng, epsilon=0.0)
                _collapse(model)
                if task == "regression":
                    model.params["log_sigma_obs_sq"][...] = 0.0
                X = rng.normal(size=(n, 2))
                y = _labels(task, rng, n)
                bethe = Lo.bethe_objective(model.bind(Tape()), X, y)
                mp = Lo.map_objective(model.bind(Tape()), X, y, sigma_obs_sq=1.0)
                worst = max(worst, abs(bethe.data_term.item() - mp.data_term.item()))
                for k in range(model.n_heads):
                    bm = model.bind(Tape())
                    h = bm.head(k)
                    full = Lo.prior_neg_log_z(h.mu, Lo.sigma_eff(h), h.log_alpha).item()
                    v1 = Lo.prior_neg_log_z(h.mu, None, h.log_alpha).item()
                    worst = max(worst, abs(full - v1))
    return CheckResult("map_limit", worst <= tol, worst, tol, "data terms and prior terms")


# ---------------------------------------------------------------------------
# derivative identities in v


@_timed
def check_dv_identities(points: int = 100, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, signs_ok = 0.0, True
    for _ in range(points):
        mu, v = rng.uniform(-3, 3), rng.uniform(0.05, 3.0)
        c, y_pm = rng.uniform(0.5, 2.0), rng.choice([-1.0, 1.0])
        h = 1e-5 * max(v, 1.0)
        fd = (probit_sample_loss(y_pm, mu, v + h, c) - probit_sample_loss(y_pm, mu, v - h, c)) / (2 * h)
        tm = y_pm * mu / np.sqrt(c * c + v)
        an = float(Lo.dloss_dv_probit(tm, c, v))
        worst = max(worst, abs(an - fd) / abs(fd))
        signs_ok &= (an > 0) == (tm > 0)

        s = rng.uniform(0.2, 3.0)
        y = mu + rng.normal() * 2.0
        fd = (reg_sample_loss(y, mu, v + h, s) - reg_sample_loss(y, mu, v - h, s)) / (2 * h)
        V = s + v
        an = float(Lo.dloss_dv_gauss(y - mu, V))
        worst = max(worst, abs(an - fd) / abs(fd))
        signs_ok &= (an > 0) == ((y - mu) ** 2 < V)
    return CheckResult("dv_identities", worst <= tol and bool(signs_ok), worst, tol, f"signs {'ok' if signs_ok else 'WRONG'}")


# ---------------------------------------------------------------------------
# ordinal K = 2 reduces to binary


@_timed
def check_ordinal_reduction(draws: int = 50, seed: int = 0, tol: float = 1e-10, n: int = 10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        mu = rng.normal(0, 2, n)
        v = rng.uniform(0, 3, n)
        tau = rng.normal()
        c = rng.uniform(0.5, 2.0)
        labels = rng.integers(0, 2, n)
        t = Tape()
        ordl = Lo.ordinal_loss(_msg(t, mu, v), labels, t.const([[tau]]), c).data_term.item()
        binl = Lo.binary_class_loss(_msg(t, mu - tau, v), 2.0 * labels - 1.0, c).data_term.item()
        worst = max(worst, abs(ordl - binl))
    return CheckResult("ordinal_reduction", worst <= tol, worst, tol)


# ---------------------------------------------------------------------------
# V1 empirical-Bayes stationary point


@_timed
def check_alpha_fixed_point(draws: int = 50, seed: int = 0, tol: float = 1e-8) -> CheckResult:
    from .trainer import closed_form_alpha_v1

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        h = int(rng.integers(1, 60))
        mu = rng.normal(0, rng.uniform(0.1, 3), (h, 1))
        t = Tape()
        la = t.param([[np.log(closed_form_alpha_v1(mu))]])
        g = t.backward(Lo.prior_neg_log_z(t.const(mu), None, la))[la.id]
        worst = max(worst, abs(g[0, 0]))
    return CheckResult("alpha_fixed_point", worst <= tol, worst, tol)


# ---------------------------------------------------------------------------
# metrics


ECE_FIXTURE = (
    np.array([[0.95, 0.05], [0.85, 0.15], [0.3, 0.7], [0.45, 0.55], [0.62, 0.38], [0.1, 0.9]]),
    np.array([0, 1, 1, 0, 0, 1]),
    # bins: 9 -> {0.95 ok, 0.9 ok}; 8 -> {0.85 wrong}; 6 -> {0.62 ok}; 7 -> {0.7 ok}; 5 -> {0.55 wrong}
    # 2 * 0.075 + 0.85 + 0.38 + 0.3 + 0.55 over 6 samples
    2.23 / 6.0,
)
# paired differences (0.1, 0.2, 0.3, 0.4): mean 0.25, sd sqrt(1/60), t = sqrt(15), df = 3;
# two-sided p from the closed-form df=3 CDF 1/2 + (atan x + x/(1+x^2))/pi with x = t/sqrt(3)
T_FIXTURE = (np.array([1.1, 2.2, 3.3, 4.4]), np.array([1.0, 2.0, 3.0, 4.0]), 0.030466291662171)


@_timed
def check_metrics(seed: int = 0, tol: float = 0.01) -> CheckResult:
    rng = np.random.default_rng(seed)
    n = 100_000
    mean = rng.normal(size=n)
    var = rng.uniform(0.1, 4.0, n)
    y = mean + np.sqrt(var) * rng.standard_normal(n)
    ce = M.calib_err(M.RegressionPredictive(mean, var), y)
    probs, labels, ece_ref = ECE_FIXTURE
    ece_err = abs(M.ece(M.ClassPredictive(probs), labels) - ece_ref)
    a, b, p_ref = T_FIXTURE
    p = M.paired_t_test(a, b)
    ok = ce <= tol and ece_err < 1e-12 and abs(p - p_ref) < 1e-12
    return CheckResult("metrics", ok, ce, tol, f"ece err {ece_err:.1e}, t-test p {p:.10f}")


# ---------------------------------------------------------------------------


SUITES = {
    "convolution": check_convolution,
    "gradients": check_gradients,
    "jensen": check_jensen,
    "map_limit": check_map_limit,
    "dv_identities": check_dv_identities,
    "ordinal_reduction": check_ordinal_reduction,
    "alpha_fixed_point": check_alpha_fixed_point,
    "metrics": check_metrics,
}


def run_suites(names=None, **kw) -> list[CheckResult]:
    names = list(SUITES) if not names else list(names)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suites {sorted(unknown)}")
    return [SUITES[n](**kw) for n in names]


@contextlib.contextmanager
def mutated_adjoint(kind: str = "tanh"):
    """Temporarily flip the sign of one backward rule."""
    if kind not in E.ADJOINTS:
        raise ValueError(f"no adjoint registered for {kind!r}")
    orig = E.ADJOINTS[kind]
    E.ADJOINTS[kind] = lambda g, ins, out, at: [-x for x in orig(g, ins, out, at)]
    try:
        yield
    finally:
        E.ADJOINTS[kind] = orig


__all__ = ["CheckResult", "SUITES", "run_suites", "mutated_adjoint"]
