"""Dataset ingestion (LIBSVM/CSV), sharding, and synthetic problem generators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import ConsensusProblem, LogisticObjective, QuadraticObjective, Regularizer


@dataclass
class DatasetShard:
    rows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[0] == 0:
            raise ValueError("shard needs a nonempty 2-d feature block")
        if self.labels.shape != (self.rows.shape[0],):
            raise ValueError("shard labels/rows size mismatch")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("shard labels must be +1/-1")


def _map_label(raw: float, lineno: int) -> float:
    # accepted conventions: {-1,+1} kept as-is, {0,1} mapped to {-1,+1}
    if raw in (-1.0, 1.0):
        return raw
    if raw == 0.0:
        return -1.0
    raise ValueError(f"line {lineno}: label {raw} is not in {{-1,0,+1}}")


def parse_libsvm(path, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Dense features and +1/-1 labels from a LIBSVM-format text file.

    Indices are 1-based and must be ascending within a line; missing
    entries are zero-filled. ``n`` fixes the feature count (inferred as
    the maximum index seen when omitted).
    """
    rows: list[dict[int, float]] = []
    labels: list[float] = []
    max_idx = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            try:
                raw = float(tokens[0])
            except ValueError:
                raise ValueError(f"line {lineno}: malformed label {tokens[0]!r}") from None
            labels.append(_map_label(raw, lineno))
            entries: dict[int, float] = {}
            prev = 0
            for tok in tokens[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise ValueError(f"line {lineno}: malformed entry {tok!r}") from None
                if idx < 1:
                    raise ValueError(f"line {lineno}: index {idx} is not 1-based")
                if idx <= prev:
                    raise ValueError(f"line {lineno}: indices not ascending at {tok!r}")
                prev = idx
                entries[idx] = val
                max_idx = max(max_idx, idx)
            rows.append(entries)
    if n is None:
        n = max_idx
    elif max_idx > n:
        raise ValueError(f"index {max_idx} exceeds declared dimension {n}")
    X = np.zeros((len(rows), n))
    for r, entries in enumerate(rows):
        for idx, val in entries.items():
            X[r, idx - 1] = val
    return X, np.asarray(labels)


def write_libsvm(path, X: np.ndarray, y: np.ndarray):
    """Inverse of parse_libsvm (zero entries are skipped)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    with open(path, "w") as fh:
        for row, label in zip(X, y):
            parts = [f"{int(label):+d}"]
            for j, v in enumerate(row, start=1):
                if v != 0.0:
                    parts.append(f"{j}:{v!r}")
            fh.write(" ".join(parts) + "\n")


def load_csv_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    """CSV rows "label,f1,...,fn" with labels in {-1,0,+1} (0 maps to -1)."""
    raw = np.loadtxt(path, delimiter=",", ndmin=2)
    labels = np.array([_map_label(v, i + 1) for i, v in enumerate(raw[:, 0])])
    return raw[:, 1:], labels


def partition_uniform(X: np.ndarray, y: np.ndarray, N: int,
                      seed: int) -> list[DatasetShard]:
    """Seeded shuffle then contiguous split; shard sizes differ by <= 1."""
    m = X.shape[0]
    if N > m:
        raise ValueError(f"cannot split {m} samples across {N} workers")
    perm = np.random.default_rng(seed).permutation(m)
    return [DatasetShard(X[idx], y[idx]) for idx in np.array_split(perm, N)]


# ---------------------------------------------------------------------------
# synthetic instances


def make_logistic_data(m: int, n: int, seed: int,
                       scale: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    """Non-separable binary classification data with O(scale) feature norms.

    Labels are drawn from the true logistic model, so the unregularized
    optimum is finite and the instance behaves like a real dataset.
    """
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(n)
    X = scale * rng.standard_normal((m, n))
    p = 1.0 / (1.0 + np.exp(-(X @ w_true)))
    y = np.where(rng.random(m) < p, 1.0, -1.0)
    return X, y


def make_quadratic_objective(n: int, rng: np.random.Generator,
                             sig_min: float = 1.0, sig_max: float = 5.0,
                             force_extremes: bool = False,
                             q_scale: float = 1.0) -> QuadraticObjective:
    """Random PSD quadratic with spectrum inside [sig_min, sig_max].

    force_extremes pins the smallest eigenvalue to exactly sig_min so the
    strong-convexity modulus of the built problem is known a priori.
    """
    gauss = rng.standard_normal((n, n))
    u, _ = np.linalg.qr(gauss)
    eigs = rng.uniform(sig_min, sig_max, size=n)
    if force_extremes:
        eigs[0] = sig_min
    Q = (u * eigs) @ u.T
    Q = 0.5 * (Q + Q.T)
    q = q_scale * rng.standard_normal(n)
    return QuadraticObjective(Q, q)


def make_quadratic_problem(N: int, n: int, seed: int, sig_min: float = 1.0,
                           sig_max: float = 5.0, reg: Regularizer | None = None,
                           force_extremes: bool = False,
                           q_scale: float = 1.0) -> ConsensusProblem:
    rng = np.random.default_rng(seed)
    locals_ = [make_quadratic_objective(n, rng, sig_min, sig_max,
                                        force_extremes, q_scale)
               for _ in range(N)]
    return ConsensusProblem(n, locals_, reg or Regularizer.zero())


def make_logistic_problem(m: int, n: int, N: int, seed: int,
                          bound: float = 10.0, scale: float = 0.25,
                          reg: Regularizer | None = None,
                          ) -> tuple[ConsensusProblem, list[DatasetShard]]:
    """Synthetic logistic instance split uniformly across N workers."""
    X, y = make_logistic_data(m, n, seed, scale)
    shards = partition_uniform(X, y, N, seed)
    locals_ = [LogisticObjective(s.rows, s.labels) for s in shards]
    if reg is None:
        reg = Regularizer.box(bound)
    return ConsensusProblem(n, locals_, reg), shards


def problem_from_dataset(X: np.ndarray, y: np.ndarray, N: int, seed: int,
                         reg: Regularizer) -> tuple[ConsensusProblem, list[DatasetShard]]:
    shards = partition_uniform(X, y, N, seed)
    locals_ = [LogisticObjective(s.rows, s.labels) for s in shards]
    return ConsensusProblem(X.shape[1], locals_, reg), shards
