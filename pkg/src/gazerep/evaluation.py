"""Linear-probe evaluation: representation extraction, OVR linear SVM, PCA, CV."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import Autoencoder
from .signal import GazeTrial, modality_signal

C_GRID = (0.1, 1.0, 10.0)
SVM_TOL = 1e-4
INNER_VAL_FRACTION = 0.2
TOP_FRACTION = 0.2
ZPV_GROUPS = {
    "pos-micro": (0, 64),
    "pos-macro": (64, 128),
    "vel-micro": (128, 192),
    "vel-macro": (192, 256),
}


# representations


@dataclass
class RepresentationTable:
    z: np.ndarray  # (n_trials, dim)
    meta: list[dict[str, str]]
    sources: dict[str, tuple[int, int]]  # column range per representation source

    def labels(self, field_name: str) -> np.ndarray:
        return np.array([m[field_name] for m in self.meta])

    def select(self, source: str) -> np.ndarray:
        if source not in self.sources:
            raise KeyError(f"representation {source!r} not available; have {sorted(self.sources)}")
        a, b = self.sources[source]
        return self.z[:, a:b]


def extract_representations(trials: Sequence[GazeTrial], model_pos: Autoencoder | None = None,
                            model_vel: Autoencoder | None = None) -> RepresentationTable:
    """Encode each full-length trial; z_pv = [z_p; z_v] when both models are given."""
    if model_pos is None and model_vel is None:
        raise ValueError("need at least one model")
    for model, want in ((model_pos, "position"), (model_vel, "velocity")):
        if model is not None and model.config.modality != want:
            raise ValueError(f"a {model.config.modality} model was passed where a {want} model is expected")
    rows, meta = [], []
    for trial in trials:
        parts = []
        for model in (model_pos, model_vel):
            if model is not None:
                sig = modality_signal(trial, model.config.modality).astype(np.float32)
                parts.append(model.represent(sig).z)
        rows.append(np.concatenate(parts))
        m = trial.meta
        meta.append({"trial_id": m.trial_id, "subject_id": m.subject_id,
                     "stimulus_id": m.stimulus_id, "dataset_id": m.dataset_id})
    z = np.stack(rows).astype(np.float64)
    if model_pos is not None and model_vel is not None:
        sources = {"z_p": (0, 128), "z_v": (128, 256), "z_pv": (0, 256)}
    elif model_pos is not None:
        sources = {"z_p": (0, 128)}
    else:
        sources = {"z_v": (0, 128)}
    return RepresentationTable(z, meta, sources)


# linear SVM


@dataclass
class LinearSVM:
    classes: np.ndarray
    W: np.ndarray  # (n_classes, dim); a single row for the binary case
    b: np.ndarray

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W.T + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        scores = self.decision_function(X)
        if len(self.classes) == 2:
            return self.classes[(scores[:, 0] > 0).astype(int)]
        return self.classes[np.argmax(scores, axis=1)]


def hinge_objective(X: np.ndarray, y: np.ndarray, w: np.ndarray, b: float, C: float) -> float:
    """0.5 ||w||^2 + C sum max(0, 1 - y (w.x + b)) for y in {-1, +1}."""
    margins = y * (X @ w + b)
    return float(0.5 * w @ w + C * np.maximum(0.0, 1.0 - margins).sum())


def _smo_binary(X: np.ndarray, y: np.ndarray, C: float, tol: float = SVM_TOL,
                max_iter: int | None = None) -> tuple[np.ndarray, float]:
    """Dual decomposition with maximal-violating-pair selection (second order).

    Solves min_a 0.5 a'Qa - sum(a), 0 <= a <= C, y'a = 0 with Q = yy' * XX'.
    Returns the primal (w, b); the bias is unregularized.
    """
    n = len(y)
    K = X @ X.T
    diag = np.diag(K).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)  # Q alpha - 1
    max_iter = max_iter or max(100_000, 100 * n)
    for _ in range(max_iter):
        score = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        m_val = score[i]
        big_m = score[low].min()
        if m_val - big_m < tol:
            break
        cand = low & (score < m_val)
        b_ij = m_val - score[cand]
        a_ij = np.maximum(diag[i] + diag[cand] - 2.0 * K[i, cand], 1e-12)
        j = int(np.flatnonzero(cand)[np.argmin(-(b_ij ** 2) / a_ij)])
        lam = (m_val - score[j]) / max(diag[i] + diag[j] - 2.0 * K[i, j], 1e-12)
        lam = min(lam, C - alpha[i] if y[i] > 0 else alpha[i], C - alpha[j] if y[j] < 0 else alpha[j])
        d_i, d_j = y[i] * lam, -y[j] * lam
        alpha[i] += d_i
        alpha[j] += d_j
        grad += y * (y[i] * K[:, i] * d_i + y[j] * K[:, j] * d_j)
    w = (alpha * y) @ X
    score = -y * grad
    free = (alpha > 1e-12) & (alpha < C - 1e-12)
    if free.any():
        b = float(score[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
        hi = score[up].max() if up.any() else 0.0
        lo = score[low].min() if low.any() else 0.0
        b = float((hi + lo) / 2)
    return w, b


def _ipm_binary(X: np.ndarray, y: np.ndarray, C: float, tol: float = SVM_TOL,
                max_iter: int = 200) -> tuple[np.ndarray, float]:
    """Primal-dual interior point on the same dual QP.

    Each Newton step solves an (n+1)-square KKT system, so cost is cubic in the
    sample count but insensitive to conditioning. The bias is the multiplier of
    the equality constraint. Stops when the complementarity gap, which bounds
    primal minus dual objective, is below ``tol * 1e-3``.
    """
    n = len(y)
    Q = (y[:, None] * y[None, :]) * (X @ X.T)
    alpha = np.full(n, C / 2.0)
    z = np.ones(n)  # multiplier of alpha >= 0
    u = np.ones(n)  # multiplier of alpha <= C
    nu = 0.0
    gap_tol = tol * 1e-3
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, n] = y
    kkt[n, :n] = y
    for _ in range(max_iter):
        slack = C - alpha
        r_d = Q @ alpha - 1.0 + nu * y - z + u
        r_p = float(y @ alpha)
        gap = float(alpha @ z + slack @ u)
        if gap < gap_tol and np.abs(r_d).max() < 1e-9 * (1 + np.abs(Q).max()) and abs(r_p) < 1e-9 * C * n:
            break
        mu = 0.1 * gap / (2 * n)
        r_z = alpha * z - mu
        r_u = slack * u - mu
        kkt[:n, :n] = Q
        kkt[np.arange(n), np.arange(n)] += z / alpha + u / slack
        rhs = np.concatenate([-r_d - r_z / alpha + r_u / slack, [-r_p]])
        step = np.linalg.solve(kkt, rhs)
        d_alpha, d_nu = step[:n], step[n]
        d_z = (-r_z - z * d_alpha) / alpha
        d_u = (-r_u + u * d_alpha) / slack
        t = 1.0
        for v, dv in ((alpha, d_alpha), (slack, -d_alpha), (z, d_z), (u, d_u)):
            neg = dv < 0
            if neg.any():
                t = min(t, 0.99 * float(np.min(-v[neg] / dv[neg])))
        alpha = alpha + t * d_alpha
        z, u, nu = z + t * d_z, u + t * d_u, nu + t * d_nu
    w = (alpha * y) @ X
    return w, float(nu)


SOLVERS = {"ipm": _ipm_binary, "smo": _smo_binary}


def fit_linear_svm(X: np.ndarray, y: Sequence, C: float, tol: float = SVM_TOL, solver: str = "ipm") -> LinearSVM:
    """One-vs-rest linear SVM with hinge loss; two classes use one machine."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; choose from {sorted(SOLVERS)}")
    if C <= 0:
        raise ValueError("C must be positive")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError(f"need at least 2 classes, got {len(classes)}")
    binary = SOLVERS[solver]
    if len(classes) == 2:
        w, b = binary(X, np.where(y == classes[1], 1.0, -1.0), C, tol)
        return LinearSVM(classes, w[None, :], np.array([b]))
    rows = [binary(X, np.where(y == c, 1.0, -1.0), C, tol) for c in classes]
    return LinearSVM(classes, np.stack([w for w, _ in rows]), np.array([b for _, b in rows]))


# PCA


@dataclass
class PCAResult:
    scores: np.ndarray
    components: np.ndarray  # (n_components, dim), orthonormal rows
    explained_variance: np.ndarray
    mean: np.ndarray

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        return self.explained_variance / self.total_variance

    total_variance: float = 1.0

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T


def pca_fit_transform(X: np.ndarray, n_components: int = 128) -> PCAResult:
    """Project centred rows onto the top eigenvectors of the sample covariance."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 samples")
    if n_components > min(n, d):
        raise ValueError(f"n_components={n_components} exceeds min(n_samples, dim)={min(n, d)}")
    mean = X.mean(axis=0)
    Xc = X - mean
    if d <= n:
        evals, evecs = np.linalg.eigh(Xc.T @ Xc / (n - 1))
        order = np.argsort(evals)[::-1][:n_components]
        evals, comps = evals[order], evecs[:, order].T
    else:
        # Gram trick: eigenvectors of the n x n matrix map to covariance eigenvectors
        evals, u = np.linalg.eigh(Xc @ Xc.T / (n - 1))
        order = np.argsort(evals)[::-1][:n_components]
        evals, u = evals[order], u[:, order]
        comps = (Xc.T @ u).T
        norms = np.linalg.norm(comps, axis=1, keepdims=True)
        comps = np.where(norms > 1e-12, comps / np.where(norms > 1e-12, norms, 1.0), 0.0)
    evals = np.clip(evals, 0.0, None)
    # fixed sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    scores = Xc @ comps.T
    total = float((Xc ** 2).sum() / (n - 1))
    return PCAResult(scores, comps, evals, mean, total)


def equalize_length(signals: Sequence[np.ndarray], length: int) -> np.ndarray:
    """Truncate or right-zero-pad (2, T) signals to ``length`` and flatten."""
    out = np.zeros((len(signals), signals[0].shape[0] * length))
    for i, s in enumerate(signals):
        s = s[:, :length]
        if s.shape[1] < length:
            s = np.pad(s, ((0, 0), (0, length - s.shape[1])))
        out[i] = s.reshape(-1)
    return out


def pca_pv_features(trials: Sequence[GazeTrial], n_components: int = 128, min_length: int = 1000) -> np.ndarray:
    """PCA baseline: per-modality PCA of flattened raw signals, concatenated.

    Signals are cut to the shortest trial (never below ``min_length``; shorter
    trials are zero-padded). Components are capped at min(n_samples, dim).
    """
    length = max(min(len(t) for t in trials), min_length)
    feats = []
    for modality in ("position", "velocity"):
        X = equalize_length([modality_signal(t, modality) for t in trials], length)
        k = min(n_components, *X.shape)
        feats.append(pca_fit_transform(X, k).scores)
    return np.hstack(feats)


# cross-validation


@dataclass(frozen=True)
class EvalTask:
    name: str
    label_field: str = "subject_id"
    source: str = "z_v"
    cv: str = "kfold:5"
    seed: int = 0

    @property
    def scheme(self) -> tuple[str, int]:
        if self.cv == "loocv":
            return "loocv", 0
        if self.cv == "fixed":
            return "fixed", 0
        if self.cv.startswith("kfold:"):
            k = int(self.cv.split(":", 1)[1])
            if k < 2:
                raise ValueError("k-fold needs k >= 2")
            return "kfold", k
        raise ValueError(f"unknown CV scheme {self.cv!r} (use kfold:K, loocv or fixed)")


@dataclass
class EvalReport:
    task: str
    source: str
    cv: str
    fold_accuracies: list[float]
    chosen_C: list[float]
    confusion: np.ndarray
    classes: np.ndarray
    fold_of_sample: np.ndarray
    feature_counts: dict[str, int] | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))


def stratified_folds(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Fold id per sample; each class is shuffled then dealt round-robin."""
    rng = np.random.default_rng([seed, 5])
    fold = np.empty(len(y), dtype=int)
    offset = 0
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return fold


def _inner_split(y: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified 80/20 split; every class keeps at least one training sample."""
    rng = np.random.default_rng([seed, 6])
    tr, va = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        n_val = min(int(round(INNER_VAL_FRACTION * len(idx))), len(idx) - 1)
        va.extend(idx[:n_val])
        tr.extend(idx[n_val:])
    return np.sort(np.array(tr, dtype=int)), np.sort(np.array(va, dtype=int))


def _standardize(train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return [(a - mu) / sd for a in (train, *others)]


def select_C(X: np.ndarray, y: np.ndarray, grid: Sequence[float] = C_GRID, seed: int = 0) -> float:
    """Pick C by held-out accuracy on a 20% stratified split; ties go to the smaller C."""
    tr, va = _inner_split(y, seed)
    if len(va) == 0 or len(np.unique(y[tr])) < 2:
        return float(min(grid))
    Xtr, Xva = _standardize(X[tr], X[va])
    best_c, best_acc = None, -1.0
    for c in sorted(grid):
        acc = float(np.mean(fit_linear_svm(Xtr, y[tr], c).predict(Xva) == y[va]))
        if acc > best_acc:
            best_c, best_acc = c, acc
    return float(best_c)


def fit_and_score(X_train, y_train, X_test, y_test, grid=C_GRID, seed=0) -> tuple[float, float, np.ndarray, LinearSVM]:
    if len(np.unique(y_train)) < 2:
        raise ValueError("a training fold contains a single class")
    c = select_C(X_train, y_train, grid, seed)
    Xtr, Xte = _standardize(X_train, X_test)
    svm = fit_linear_svm(Xtr, y_train, c)
    pred = svm.predict(Xte)
    return float(np.mean(pred == y_test)), c, pred, svm


def cross_validate(task: EvalTask, X: np.ndarray, y: Sequence, grid: Sequence[float] = C_GRID,
                   train_mask: np.ndarray | None = None, groups: dict[str, tuple[int, int]] | None = None
                   ) -> EvalReport:
    """Outer CV with inner C selection; features are z-scored on each training split."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    scheme, k = task.scheme
    if scheme == "kfold":
        if np.bincount(np.searchsorted(classes, y)).min() < 1 or len(y) < k:
            raise ValueError(f"{len(y)} samples cannot fill {k} folds")
        fold = stratified_folds(y, k, task.seed)
        splits = [(np.flatnonzero(fold != f), np.flatnonzero(fold == f)) for f in range(k)]
    elif scheme == "loocv":
        fold = np.arange(len(y))
        splits = [(np.flatnonzero(fold != i), np.array([i])) for i in range(len(y))]
    else:
        if train_mask is None:
            raise ValueError("fixed train/test needs a train_mask")
        train_mask = np.asarray(train_mask, dtype=bool)
        fold = np.where(train_mask, -1, 0)
        splits = [(np.flatnonzero(train_mask), np.flatnonzero(~train_mask))]
    accs, cs = [], []
    confusion = np.zeros((len(classes), len(classes)), dtype=int)
    for f, (tr, te) in enumerate(splits):
        acc, c, pred, _ = fit_and_score(X[tr], y[tr], X[te], y[te], grid, seed=task.seed + f)
        accs.append(acc)
        cs.append(c)
        np.add.at(confusion, (np.searchsorted(classes, y[te]), np.searchsorted(classes, pred)), 1)
    report = EvalReport(task.name, task.source, task.cv, accs, cs, confusion, classes, fold,
                        notes=["k-fold splits are stratified by label"] if scheme == "kfold" else [])
    if groups is not None:
        c = float(np.median(cs))
        Xs, = _standardize(X)
        report.feature_counts = feature_importance(fit_linear_svm(Xs, y, c).W, groups)
    return report


def permutation_baseline(task: EvalTask, X: np.ndarray, y: Sequence, seed: int = 0, **kw) -> EvalReport:
    """Same protocol with labels shuffled by a fixed seed."""
    y = np.asarray(y)
    shuffled = y[np.random.default_rng([seed, 9]).permutation(len(y))]
    return cross_validate(task, X, shuffled, **kw)


def feature_importance(W: np.ndarray, groups: dict[str, tuple[int, int]] | dict[str, Iterable[int]]
                       ) -> dict[str, int]:
    """Count, per column group, how many of the top ceil(20% dim) |weights| it holds."""
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    dim = W.shape[1]
    owner = np.full(dim, -1)
    names = list(groups)
    for gi, name in enumerate(names):
        cols_def = groups[name]
        cols = np.arange(*cols_def) if isinstance(cols_def, tuple) and len(cols_def) == 2 else np.asarray(list(cols_def))
        if np.any(owner[cols] != -1):
            raise ValueError(f"group {name!r} overlaps another group")
        owner[cols] = gi
    if np.any(owner == -1):
        raise ValueError("groups do not cover every column")
    top = int(math.ceil(TOP_FRACTION * dim - 1e-9))
    strength = np.abs(W).max(axis=0)
    ranked = np.argsort(-strength, kind="stable")[:top]
    counts = {name: 0 for name in names}
    for col in ranked:
        counts[names[owner[col]]] += 1
    return counts


def format_report(reports: Sequence[EvalReport]) -> str:
    """Structured text: one record per (task, representation, fold), then a summary table."""
    lines = ["task,representation,fold,accuracy,C"]
    for r in reports:
        for f, (a, c) in enumerate(zip(r.fold_accuracies, r.chosen_C)):
            lines.append(f"{r.task},{r.source},{f},{a:.6f},{c:g}")
    lines.append("")
    sources = list(dict.fromkeys(r.source for r in reports))
    tasks = list(dict.fromkeys(r.task for r in reports))
    lines.append("| Classification Task | " + " | ".join(sources) + " |")
    lines.append("|---|" + "---|" * len(sources))
    for t in tasks:
        cells = []
        for s in sources:
            match = [r for r in reports if r.task == t and r.source == s]
            cells.append(f"{100 * match[0].mean_accuracy:.1f}" if match else "-")
        lines.append(f"| {t} | " + " | ".join(cells) + " |")
    for r in reports:
        if r.feature_counts:
            lines.append("")
            lines.append(f"top-{TOP_FRACTION:.0%} feature counts ({r.task}, {r.source}): "
                         + ", ".join(f"{k}={v}" for k, v in r.feature_counts.items()))
    notes = list(dict.fromkeys(n for r in reports for n in r.notes))
    if notes:
        lines.append("")
        lines.extend(f"note: {n}" for n in notes)
    return "\n".join(lines) + "\n"
