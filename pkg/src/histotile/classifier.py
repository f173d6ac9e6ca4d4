"""RBF max-margin classifier trained by sequential minimal optimization.

Training solves the soft-margin dual with maximal-violating-pair working-set
selection and stops when the KKT violation gap drops to the tolerance. Inputs
are z-scored with statistics fit on the training rows only, and probabilities
come from a sigmoid fit on out-of-fold decision values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import spawn_rng

DEFAULT_TOL = 1e-3
DEFAULT_MAX_ITER = 200_000
_SV_EPS = 1e-12

# Coarse log-spaced search grid; override through configuration when the
# problem calls for something finer.
DEFAULT_GRID_C_EXPONENTS = range(-5, 16, 2)
DEFAULT_GRID_GAMMA_EXPONENTS = range(-15, 4, 2)

MODEL_FORMAT = "histotile-classifier"
MODEL_VERSION = 1


class ConvergenceError(RuntimeError):
    """The optimizer hit its iteration cap before reaching the tolerance."""


@dataclass(frozen=True)
class KernelParams:
    c: float
    gamma: float

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c > 0):
            raise ValueError(f"penalty c must be positive and finite, got {self.c}")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be positive and finite, got {self.gamma}")


def default_grid() -> list[KernelParams]:
    return [
        KernelParams(2.0 ** lc, 2.0 ** lg)
        for lc in DEFAULT_GRID_C_EXPONENTS
        for lg in DEFAULT_GRID_GAMMA_EXPONENTS
    ]


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)  # constant features pass through
        return cls(mean=mean, std=std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass(frozen=True)
class TrainedClassifier:
    support_vectors: np.ndarray  # standardized rows
    dual_coefs: np.ndarray  # alpha_i * y_i, signed
    bias: float
    params: KernelParams
    standardizer: Standardizer
    calibration: tuple[float, float]  # (a, b) of sigmoid(a * decision + b)

    @property
    def n_features(self) -> int:
        return self.support_vectors.shape[1] if self.support_vectors.size else self.standardizer.mean.shape[0]


def _rbf_cross(z: np.ndarray, sv: np.ndarray, gamma: float) -> np.ndarray:
    sq = (
        np.sum(z * z, axis=1)[:, None]
        + np.sum(sv * sv, axis=1)[None, :]
        - 2.0 * (z @ sv.T)
    )
    np.clip(sq, 0.0, None, out=sq)
    return np.exp(-gamma * sq)


def _rbf_gram(z: np.ndarray, gamma: float) -> np.ndarray:
    k = _rbf_cross(z, z, gamma)
    np.fill_diagonal(k, 1.0)
    return k


def _smo_solve(
    kernel: np.ndarray,
    y: np.ndarray,
    c: float,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, float, bool]:
    """Maximize the soft-margin dual; returns (alpha, bias, converged).

    Working pairs are the maximal violators: i maximizing y_i - u_i over the
    set still allowed to grow its term, j minimizing it over the set allowed
    to shrink. The bias is the midpoint of the feasible interval at the stop,
    which bounds every KKT residual by tol/2.
    """
    n = y.shape[0]
    alpha = np.zeros(n)
    u = np.zeros(n)  # decision values without bias
    pos = y > 0
    eps = 1e-12

    converged = False
    bias = 0.0
    for _ in range(max_iter):
        g = y - u
        up = (pos & (alpha < c - eps)) | (~pos & (alpha > eps))
        low = (pos & (alpha > eps)) | (~pos & (alpha < c - eps))
        up_gap = np.where(up, g, -np.inf)
        low_gap = np.where(low, g, np.inf)
        i = int(np.argmax(up_gap))
        j = int(np.argmin(low_gap))
        m_val = up_gap[i]
        big_m_val = low_gap[j]
        if not np.isfinite(m_val) or not np.isfinite(big_m_val):
            bias = _midpoint_bias(m_val, big_m_val)
            converged = True
            break
        if m_val - big_m_val <= tol:
            bias = (m_val + big_m_val) / 2.0
            converged = True
            break

        k_i = kernel[i]
        k_j = kernel[j]
        eta = max(k_i[i] + k_j[j] - 2.0 * k_i[j], 1e-12)
        a_i, a_j = alpha[i], alpha[j]
        y_i, y_j = y[i], y[j]
        # Unconstrained optimum along the equality-constraint line.
        a_j_new = a_j + y_j * (g[j] - g[i]) / eta
        if y_i != y_j:
            lo, hi = max(0.0, a_j - a_i), min(c, c + a_j - a_i)
        else:
            lo, hi = max(0.0, a_i + a_j - c), min(c, a_i + a_j)
        a_j_new = min(max(a_j_new, lo), hi)
        a_i_new = a_i + y_i * y_j * (a_j - a_j_new)
        d_i, d_j = a_i_new - a_i, a_j_new - a_j
        if abs(d_i) < 1e-15 and abs(d_j) < 1e-15:
            bias = (m_val + big_m_val) / 2.0
            converged = True  # no feasible progress left at this precision
            break
        alpha[i], alpha[j] = a_i_new, a_j_new
        u += (d_i * y_i) * k_i + (d_j * y_j) * k_j

    if not converged:
        g = y - u
        up_gap = np.where((pos & (alpha < c - eps)) | (~pos & (alpha > eps)), g, -np.inf)
        low_gap = np.where((pos & (alpha > eps)) | (~pos & (alpha < c - eps)), g, np.inf)
        bias = _midpoint_bias(np.max(up_gap), np.min(low_gap))
    return alpha, float(bias), converged


def _midpoint_bias(m_val: float, big_m_val: float) -> float:
    if not np.isfinite(m_val):
        return float(big_m_val) if np.isfinite(big_m_val) else 0.0
    if not np.isfinite(big_m_val):
        return float(m_val)
    return float((m_val + big_m_val) / 2.0)


def _fit_platt(decisions: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """Sigmoid coefficients (a, b) maximizing the calibration likelihood.

    Newton iterations with backtracking on the cross-entropy of smoothed
    targets; probabilities are sigmoid(a * decision + b) with a > 0 when
    larger decisions mean the positive class.
    """
    pos = targets > 0
    prior1 = float(np.sum(pos))
    prior0 = float(len(targets) - prior1)
    hi_t = (prior1 + 1.0) / (prior1 + 2.0)
    lo_t = 1.0 / (prior0 + 2.0)
    t = np.where(pos, hi_t, lo_t)

    a = 0.0
    b = math.log((prior1 + 1.0) / (prior0 + 1.0))
    f = decisions

    def objective(a_: float, b_: float) -> float:
        z = a_ * f + b_
        # log(1 + e^-z) evaluated stably on both tails
        return float(np.sum(np.logaddexp(0.0, -z) + (1.0 - t) * z))

    old_obj = objective(a, b)
    sigma = 1e-12
    for _ in range(100):
        z = a * f + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        d1 = p - t
        d2 = p * (1.0 - p)
        g_a = float(np.sum(f * d1))
        g_b = float(np.sum(d1))
        if abs(g_a) < 1e-10 and abs(g_b) < 1e-10:
            break
        h_aa = float(np.sum(f * f * d2)) + sigma
        h_bb = float(np.sum(d2)) + sigma
        h_ab = float(np.sum(f * d2))
        det = h_aa * h_bb - h_ab * h_ab
        da = -(h_bb * g_a - h_ab * g_b) / det
        db = -(h_aa * g_b - h_ab * g_a) / det
        step = 1.0
        while step >= 1e-10:
            new_a, new_b = a + step * da, b + step * db
            new_obj = objective(new_a, new_b)
            if new_obj < old_obj + 1e-4 * step * (g_a * da + g_b * db):
                a, b, old_obj = new_a, new_b, new_obj
                break
            step /= 2.0
        else:
            break
    return a, b


def _stratified_fold_indices(
    y: np.ndarray, k: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Partition indices into k folds, dealing each class round-robin."""
    folds: list[list[int]] = [[] for _ in range(k)]
    for label in np.unique(y):
        members = np.flatnonzero(y == label)
        order = members[rng.permutation(len(members))]
        for pos_idx, idx in enumerate(order):
            folds[pos_idx % k].append(int(idx))
    return [np.array(sorted(f), dtype=np.intp) for f in folds]


def _validate_training_input(x: np.ndarray, y: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x must be (n, d) with one label per row")
    if not np.all(np.isfinite(x)):
        raise ValueError("training features must be finite")
    if set(np.unique(y).tolist()) != {-1.0, 1.0}:
        raise ValueError("labels must contain both classes, encoded as -1 and +1")


def train(
    x,
    y,
    params: KernelParams,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
    calibrate: bool = True,
    max_iter: int = DEFAULT_MAX_ITER,
    strict: bool = True,
) -> TrainedClassifier:
    """Fit the classifier on rows x with labels y in {-1, +1}.

    Calibration coefficients come from a 3-fold internal split: each third is
    scored by a model trained on the other two, and the sigmoid is fit on the
    pooled out-of-fold decisions. With calibrate=False the sigmoid is the
    identity-oriented (1, 0) placeholder.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    _validate_training_input(x, y)

    standardizer = Standardizer.fit(x)
    z = standardizer.transform(x)
    kernel = _rbf_gram(z, params.gamma)
    alpha, bias, converged = _smo_solve(kernel, y, params.c, tol, max_iter)
    if not converged and strict:
        raise ConvergenceError(f"SMO did not reach tol={tol} within {max_iter} iterations")

    sv_mask = alpha > _SV_EPS
    support = z[sv_mask].copy()
    dual = (alpha * y)[sv_mask].copy()

    calibration = (1.0, 0.0)
    if calibrate:
        calibration = _calibrate(z, y, params, tol, seed, max_iter, support, dual, bias)

    return TrainedClassifier(
        support_vectors=support,
        dual_coefs=dual,
        bias=bias,
        params=params,
        standardizer=standardizer,
        calibration=calibration,
    )


def _calibrate(
    z: np.ndarray,
    y: np.ndarray,
    params: KernelParams,
    tol: float,
    seed: int,
    max_iter: int,
    support: np.ndarray,
    dual: np.ndarray,
    bias: float,
) -> tuple[float, float]:
    counts = {int(label): int(np.sum(y == label)) for label in (-1, 1)}
    if min(counts.values()) < 3:
        # Too few for an out-of-fold split; fall back to in-sample decisions.
        decisions = _rbf_cross(z, support, params.gamma) @ dual + bias
        return _fit_platt(decisions, y)
    rng = spawn_rng(seed, "calibration")
    folds = _stratified_fold_indices(y, 3, rng)
    pooled_d = []
    pooled_y = []
    for held_out in folds:
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[held_out] = False
        k_sub = _rbf_gram(z[train_mask], params.gamma)
        alpha_s, bias_s, _ = _smo_solve(k_sub, y[train_mask], params.c, tol, max_iter)
        sv = alpha_s > _SV_EPS
        cross = _rbf_cross(z[held_out], z[train_mask][sv], params.gamma)
        pooled_d.append(cross @ (alpha_s * y[train_mask])[sv] + bias_s)
        pooled_y.append(y[held_out])
    return _fit_platt(np.concatenate(pooled_d), np.concatenate(pooled_y))


def decision_values(model: TrainedClassifier, x) -> np.ndarray:
    """Margin values for a batch of rows; the sign is the predicted class."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != model.standardizer.mean.shape[0]:
        raise ValueError(
            f"width {arr.shape[1]} does not match model width {model.standardizer.mean.shape[0]}"
        )
    z = model.standardizer.transform(arr)
    if model.support_vectors.size == 0:
        out = np.full(z.shape[0], model.bias)
    else:
        out = _rbf_cross(z, model.support_vectors, model.params.gamma) @ model.dual_coefs + model.bias
    return out[0] if single else out


def decision(model: TrainedClassifier, x) -> float:
    return float(decision_values(model, np.asarray(x, dtype=np.float64)))


def predict_proba(model: TrainedClassifier, x):
    """Calibrated probability of the positive class, strictly inside (0, 1)."""
    d = decision_values(model, x)
    a, b = model.calibration
    z = np.clip(a * d + b, -500, 500)
    p = 1.0 / (1.0 + np.exp(-z))
    tiny = np.finfo(np.float64).tiny
    p = np.clip(p, tiny, 1.0 - 1e-16)
    return float(p) if np.isscalar(d) or np.ndim(d) == 0 else p


def predict_labels(model: TrainedClassifier, x) -> np.ndarray:
    d = decision_values(model, x)
    return np.where(np.asarray(d) >= 0, 1.0, -1.0)


def kkt_residuals(
    x,
    y,
    params: KernelParams,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> np.ndarray:
    """Per-row violation of the soft-margin optimality conditions.

    Solves the same deterministic optimization train() runs on (x, y), so the
    residuals describe exactly the model train() would return.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    _validate_training_input(x, y)
    z = Standardizer.fit(x).transform(x)
    kernel = _rbf_gram(z, params.gamma)
    alpha, bias, _ = _smo_solve(kernel, y, params.c, tol, max_iter)
    margins = y * (kernel @ (alpha * y) + bias)
    c = params.c
    bound_eps = min(1e-9, c * 1e-9)
    free = (alpha > bound_eps) & (alpha < c - bound_eps)
    at_zero = alpha <= bound_eps
    residuals = np.empty(len(y))
    residuals[free] = np.abs(margins[free] - 1.0)
    residuals[at_zero] = np.maximum(0.0, 1.0 - margins[at_zero])
    at_c = ~free & ~at_zero
    residuals[at_c] = np.maximum(0.0, margins[at_c] - 1.0)
    return residuals


@dataclass(frozen=True)
class GridSearchReport:
    grid: tuple[tuple[KernelParams, float], ...]
    best: KernelParams
    cv_folds: int = 5


def grid_search(
    x,
    y,
    grid: Optional[Sequence[KernelParams]] = None,
    folds: int = 5,
    seed: int = 0,
    tol: float = DEFAULT_TOL,
    cv_max_iter: int = 1000,
) -> GridSearchReport:
    """Mean stratified-CV accuracy for every grid point; ties prefer small c, then small gamma.

    Candidate fits run under an iteration budget so hopeless corners of the
    grid cannot stall the search; the winning parameters are refit by train()
    at the full tolerance afterwards.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    _validate_training_input(x, y)
    points = list(grid) if grid is not None else default_grid()
    if not points:
        raise ValueError("grid must contain at least one point")
    for label in (-1.0, 1.0):
        if np.sum(y == label) < folds:
            raise ValueError(f"need at least {folds} instances of class {label:+.0f}")

    rng = spawn_rng(seed, "grid-cv")
    fold_indices = _stratified_fold_indices(y, folds, rng)
    scores = []
    for params in points:
        correct = 0
        for held_out in fold_indices:
            train_mask = np.ones(len(y), dtype=bool)
            train_mask[held_out] = False
            model = train(
                x[train_mask], y[train_mask], params,
                tol=tol, seed=seed, calibrate=False, strict=False,
                max_iter=cv_max_iter,
            )
            predictions = predict_labels(model, x[held_out])
            correct += int(np.sum(predictions == y[held_out]))
        scores.append(correct / len(y))
    best_idx = min(
        range(len(points)),
        key=lambda i: (-scores[i], points[i].c, points[i].gamma),
    )
    return GridSearchReport(
        grid=tuple((points[i], scores[i]) for i in range(len(points))),
        best=points[best_idx],
        cv_folds=folds,
    )


# ---------------------------------------------------------------------------
# Serialization: JSON, exact float round-trip via repr
# ---------------------------------------------------------------------------

def model_to_dict(model: TrainedClassifier) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "support_vectors": model.support_vectors.tolist(),
        "dual_coefs": model.dual_coefs.tolist(),
        "bias": model.bias,
        "params": {"c": model.params.c, "gamma": model.params.gamma},
        "standardizer": {
            "mean": model.standardizer.mean.tolist(),
            "std": model.standardizer.std.tolist(),
        },
        "calibration": list(model.calibration),
    }


def model_from_dict(payload: dict) -> TrainedClassifier:
    if payload.get("format") != MODEL_FORMAT:
        raise ValueError(f"not a {MODEL_FORMAT} payload")
    if payload.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {payload.get('version')}")
    n_features = len(payload["standardizer"]["mean"])
    sv = np.array(payload["support_vectors"], dtype=np.float64)
    if sv.size == 0:
        sv = sv.reshape(0, n_features)
    return TrainedClassifier(
        support_vectors=sv,
        dual_coefs=np.array(payload["dual_coefs"], dtype=np.float64),
        bias=float(payload["bias"]),
        params=KernelParams(payload["params"]["c"], payload["params"]["gamma"]),
        standardizer=Standardizer(
            mean=np.array(payload["standardizer"]["mean"], dtype=np.float64),
            std=np.array(payload["standardizer"]["std"], dtype=np.float64),
        ),
        calibration=(float(payload["calibration"][0]), float(payload["calibration"][1])),
    )


def save_model(model: TrainedClassifier, path: Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_model(path: Path) -> TrainedClassifier:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
