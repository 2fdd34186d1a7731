"""
Downstream two-class classification for voxsynth.

Block-mean features, L2-regularized logistic regression, stratified k-fold
rounds with test/validation/train roles, and a paired t-test on per-round
accuracies.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate
from scipy.special import expit, gammaln

from errors import DataError, NonFiniteError, ShapeError, ValueRangeError, ZeroVarianceError
from volume_io import Volume, block_means

logger = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
GRAD_TOL = 1e-6
MAX_ITER = 10000
ARMIJO_C = 1e-4
COLUMNS = ("input", "target", "synth", "joint")


# Features

@dataclass
class FeatureVector:
    values: np.ndarray
    source: str = "input"  # input, target, synth or joint

    def __len__(self) -> int:
        return int(self.values.size)


def extract_features(volume: Volume, grid: int = 4, source: str = "input") -> FeatureVector:
    """Mean of each block of a ``grid`` x ``grid`` x ``grid`` partition, C-order flattened."""
    if grid < 1:
        raise ValueRangeError(f"grid must be >= 1, got {grid}")
    if any(d % grid for d in volume.dims):
        raise ShapeError(f"dims {volume.dims} are not divisible by feature grid {grid}")
    factor = tuple(d // grid for d in volume.dims)
    return FeatureVector(block_means(volume.data, factor).ravel(), source)


def joint_features(a: FeatureVector, b: FeatureVector) -> FeatureVector:
    return FeatureVector(np.concatenate([a.values, b.values]), "joint")


# Logistic regression

@dataclass
class LogRegModel:
    weights: np.ndarray
    intercept: float
    lam: float
    iterations: int = 0
    converged: bool = True


def _objective(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, lam: float) -> float:
    z = X @ w + b
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * (w @ w))


def _gradient(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, lam: float) -> Tuple[np.ndarray, float]:
    r = expit(X @ w + b) - y
    return X.T @ r / len(y) + lam * w, float(r.mean())


def objective_and_gradient(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float,
                           lam: float) -> Tuple[float, np.ndarray, float]:
    """Mean logistic loss plus (lam / 2)·|w|^2; the intercept is not penalized."""
    dw, db = _gradient(X, y, w, b, lam)
    return _objective(X, y, w, b, lam), dw, db


def _check_xy(X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError(f"features {X.shape} and labels {y.shape} do not line up")
    if not np.isfinite(X).all():
        raise NonFiniteError("features contain non-finite values")
    return X, y


def train_logreg(X: np.ndarray, y: np.ndarray, lam: float) -> LogRegModel:
    """
    Full-batch gradient descent with Armijo backtracking.

    Steps are scaled per coordinate by a diagonal curvature bound so the
    unpenalized intercept and heavily penalized weights converge together.
    Stops once the gradient infinity-norm drops below 1e-6 or after 10,000
    iterations.
    """
    X, y = _check_xy(X, y)
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueRangeError("labels must be 0 or 1")
    if len(np.unique(y)) < 2:
        raise DataError("logistic regression needs samples of both classes")
    if lam < 0:
        raise ValueRangeError(f"lambda must be non-negative, got {lam}")

    scale_w = 0.25 * np.mean(X * X, axis=0) + lam + 1e-12
    scale_b = 0.25
    w = np.zeros(X.shape[1])
    b = 0.0
    value = _objective(X, y, w, b, lam)
    step = 1.0
    for iteration in range(1, MAX_ITER + 1):
        dw, db = _gradient(X, y, w, b, lam)
        if max(np.abs(dw).max(initial=0.0), abs(db)) < GRAD_TOL:
            return LogRegModel(w, b, lam, iteration - 1, True)
        pw, pb = dw / scale_w, db / scale_b
        slope = float(dw @ pw + db * pb)
        step = min(step * 2.0, 1.0)
        while True:
            w_new, b_new = w - step * pw, b - step * pb
            new_value = _objective(X, y, w_new, b_new, lam)
            if new_value <= value - ARMIJO_C * step * slope or step < 1e-20:
                break
            step *= 0.5
        w, b, value = w_new, b_new, new_value
    logger.warning("logistic regression stopped after %d iterations without reaching tolerance", MAX_ITER)
    return LogRegModel(w, b, lam, MAX_ITER, False)


def predict(model: LogRegModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.weights.size:
        raise ShapeError(f"features {X.shape} do not match a model with {model.weights.size} weights")
    return expit(X @ model.weights + model.intercept)


def accuracy(probabilities: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction correct; probability exactly at the threshold predicts class 1."""
    probabilities = np.asarray(probabilities)
    y = np.asarray(y)
    if probabilities.shape != y.shape:
        raise ShapeError(f"probabilities {probabilities.shape} and labels {y.shape} differ")
    if y.size == 0:
        raise DataError("accuracy of an empty set")
    return float(np.mean((probabilities >= threshold).astype(int) == y.astype(int)))


# Cross-validation

@dataclass
class FoldPlan:
    assignment: np.ndarray  # fold index per subject
    k: int

    def members(self, fold: int) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.assignment == fold)]

    def roles(self, round_index: int) -> Tuple[List[int], List[int], List[int]]:
        """(test, validation, train) subject indices of one round."""
        if self.k < 3:
            raise ValueRangeError(f"rounds need at least 3 folds (test, validation, train), plan has {self.k}")
        if not 0 <= round_index < self.k:
            raise ValueRangeError(f"round {round_index} outside [0, {self.k})")
        test_fold = round_index
        val_fold = (round_index + 1) % self.k
        train = [int(i) for i, f in enumerate(self.assignment) if f not in (test_fold, val_fold)]
        return self.members(test_fold), self.members(val_fold), train

    def fold_of(self, subject_index: int) -> int:
        return int(self.assignment[subject_index])


def kfold_split(n: int, k: int, labels: Sequence[int], seed: int) -> FoldPlan:
    """
    Stratified assignment of ``n`` subjects to ``k`` folds.

    Each class is shuffled and dealt round-robin, continuing the deal across
    classes, so fold sizes differ by at most one and classes spread evenly.
    """
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got {labels.shape}")
    if k > n:
        raise ValueRangeError(f"cannot split {n} subjects into {k} folds")
    if k < 1:
        raise ValueRangeError(f"need at least one fold, got k={k}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    dealt = 0
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        if len(members) < k / 2:
            logger.warning("class %s has %d members for %d folds; stratification is weak", cls, len(members), k)
        for index in members:
            assignment[index] = dealt % k
            dealt += 1
    return FoldPlan(assignment, k)


# Paired t-test

def t_density(x: float, df: int) -> float:
    log_norm = gammaln((df + 1) / 2.0) - gammaln(df / 2.0) - 0.5 * math.log(df * math.pi)
    return math.exp(log_norm - (df + 1) / 2.0 * math.log1p(x * x / df))


def t_two_sided_p(t: float, df: int) -> float:
    """Two-sided tail probability by integrating the t density from 0 to |t|."""
    if math.isinf(t):
        return 0.0
    central, _ = integrate.quad(t_density, 0.0, abs(t), args=(df,), epsabs=1e-12, epsrel=1e-12, limit=200)
    return min(1.0, max(0.0, 1.0 - 2.0 * central))


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    if np.shape(a) != np.shape(b) or np.ndim(a) != 1:
        raise ShapeError(f"paired samples differ in length: {np.shape(a)} vs {np.shape(b)}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = d.size
    if n < 2:
        raise ValueRangeError("paired t-test needs at least two pairs")
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            raise ZeroVarianceError("all paired differences are zero; t is undefined")
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return t, t_two_sided_p(t, n - 1)


# Experiment

def _zscore(train: np.ndarray, *others: np.ndarray) -> List[np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd[sd == 0] = 1.0
    return [(m - mu) / sd for m in (train,) + others]


def fit_with_validation(X: np.ndarray, y: np.ndarray, test: List[int], val: List[int], train: List[int],
                        lambdas: Sequence[float]) -> Tuple[float, float]:
    """Pick lambda on the validation fold; returns (test accuracy, chosen lambda)."""
    Xtr, Xval, Xte = _zscore(X[train], X[val], X[test])
    best = None
    for lam in lambdas:
        model = train_logreg(Xtr, y[train], lam)
        score = accuracy(predict(model, Xval), y[val])
        if best is None or score > best[0]:
            best = (score, lam, model)
    _, lam, model = best
    return accuracy(predict(model, Xte), y[test]), lam


@dataclass
class ClassificationRow:
    method: str
    accuracies: Dict[str, List[float]]  # column -> per-round accuracy
    t: float
    p: float

    def summary(self, column: str) -> Tuple[float, Optional[float]]:
        values = np.asarray(self.accuracies[column])
        return float(values.mean()), (float(values.std(ddof=1)) if values.size > 1 else None)


@dataclass
class ClassificationReport:
    rows: List[ClassificationRow] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["method," + ",".join(COLUMNS) + ",t,p"]
        for row in self.rows:
            cells = []
            for column in COLUMNS:
                mean, std = row.summary(column)
                cells.append(f"{100 * mean:.2f} ± {100 * (std or 0.0):.2f}")
            lines.append(",".join([row.method] + cells + [f"{row.t:.4f}", f"{row.p:.4f}"]))
        return "\n".join(lines) + "\n"

    def rounds_csv(self) -> str:
        lines = ["method,round," + ",".join(COLUMNS)]
        for row in self.rows:
            for r in range(len(row.accuracies["input"])):
                lines.append(",".join([row.method, str(r)] + [repr(row.accuracies[c][r]) for c in COLUMNS]))
        return "\n".join(lines) + "\n"


def run_classification_experiment(labels: Sequence[int],
                                  input_volumes: Sequence[Volume],
                                  target_volumes: Sequence[Volume],
                                  synth_volumes: Mapping[str, Sequence[Volume]],
                                  plan: FoldPlan,
                                  grid: int = 4,
                                  lambdas: Sequence[float] = DEFAULT_LAMBDAS,
                                  workers: int = 1) -> ClassificationReport:
    """
    Per-round test accuracies for input-only, target-only, synth-only and joint
    features, one row per synthesis source, with a paired t-test of joint vs input.
    """
    y = np.asarray(labels, dtype=np.float64)
    n = y.size
    if len(input_volumes) != n or len(target_volumes) != n:
        raise DataError("labels, inputs and targets must cover the same subjects")
    if not synth_volumes:
        raise DataError("no synthesized volumes given")

    def matrix(volumes, source):
        return np.stack([extract_features(v, grid, source).values for v in volumes])

    X_input = matrix(input_volumes, "input")
    X_target = matrix(target_volumes, "target")

    def rounds_for(X):
        def one(r):
            return fit_with_validation(X, y, *plan.roles(r), lambdas)[0]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(one, range(plan.k)))
        return [one(r) for r in range(plan.k)]

    input_acc = rounds_for(X_input)
    target_acc = rounds_for(X_target)

    report = ClassificationReport()
    for method, volumes in synth_volumes.items():
        if len(volumes) != n:
            raise DataError(f"synthesized source {method!r} covers {len(volumes)} of {n} subjects")
        X_synth = matrix(volumes, "synth")
        synth_acc = rounds_for(X_synth)
        joint_acc = rounds_for(np.hstack([X_input, X_synth]))
        try:
            t, p = paired_ttest(joint_acc, input_acc)
        except ZeroVarianceError:
            logger.warning("%s: joint and input accuracies agree in every round; reporting t=0, p=1", method)
            t, p = 0.0, 1.0
        row = ClassificationRow(method, {"input": input_acc, "target": target_acc,
                                         "synth": synth_acc, "joint": joint_acc}, t, p)
        logger.info("%s: input %.3f target %.3f synth %.3f joint %.3f (t=%.3f, p=%.4f)", method,
                    *(row.summary(c)[0] for c in COLUMNS), t, p)
        report.rows.append(row)
    return report
