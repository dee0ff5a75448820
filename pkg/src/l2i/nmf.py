"""Sparse NMF with unit-norm dictionary columns, activation inference and soft masks.

Objective (Euclidean, half convention)::

    J(W, H) = 0.5 * ||X - W H||_F^2 + mu * sum(H),   W, H >= 0,  ||w_k||_2 = 1

H uses the majorisation-minimisation multiplicative update
``H <- H * (W^T X) / (W^T W H + mu)``. W uses the multiplicative update
whose gradient accounts for the column normalisation,

    W <- W * (X H^T + W * colsum(W * (WH) H^T)) / ((WH) H^T + W * colsum(W * X H^T))

followed by renormalisation. That W step is not a majoriser on its own, so
each W step is safeguarded: if the objective went up, the step is pulled back
along the normalised chord towards the previous W (halving up to
``max_backtracks`` times) and, failing that, skipped. Every recorded
objective value is therefore non-increasing.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, EmptyInputError, ShapeError
from .numerics import SeededRng, TensorBlob, array_digest, load_container, save_blobs

NORM_TOL = 1e-9


@dataclass
class Dictionary:
    w: np.ndarray
    component_labels: list[str] | None = None

    def __post_init__(self):
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        if self.w.ndim != 2:
            raise ShapeError("dictionary must be a 2-D array")
        if np.any(self.w < 0):
            raise ValueError("dictionary entries must be non-negative")
        norms = np.linalg.norm(self.w, axis=0)
        if np.any(np.abs(norms - 1.0) > NORM_TOL):
            raise ValueError("dictionary columns must have unit l2 norm")
        if self.component_labels is not None and len(self.component_labels) != self.k:
            raise ShapeError("component_labels length must equal K")

    @property
    def n_bins(self) -> int:
        return self.w.shape[0]

    @property
    def k(self) -> int:
        return self.w.shape[1]


@dataclass(frozen=True)
class SparseNmfConfig:
    k: int = 20
    mu: float = 0.1
    max_iters: int = 400
    rel_tol: float = 1e-6
    seed: int = 0
    epsilon: float = 1e-12
    max_backtracks: int = 10

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")


@dataclass
class DictTrainingMatrix:
    x_train: np.ndarray
    chunk: int = 1

    def __post_init__(self):
        self.x_train = np.asarray(self.x_train, dtype=np.float64)
        if np.any(self.x_train < 0):
            raise ValueError("training matrix must be non-negative")


class NmfResult(NamedTuple):
    dictionary: Dictionary
    activations: np.ndarray
    objective_trace: list[float]


def chunk_average(x: np.ndarray, chunk: int) -> np.ndarray:
    """Average columns over non-overlapping windows; the remainder forms a short final chunk."""
    t = x.shape[1]
    starts = np.arange(0, t, chunk)
    sums = np.add.reduceat(x, starts, axis=1)
    counts = np.minimum(starts + chunk, t) - starts
    return sums / counts


def build_training_matrix(samples: Sequence[np.ndarray], chunk: int = 5) -> DictTrainingMatrix:
    if len(samples) == 0:
        raise EmptyInputError("no spectrograms to build a training matrix from")
    if chunk < 1:
        raise ConfigError("chunk must be >= 1")
    f = samples[0].shape[0]
    for s in samples:
        if s.shape[0] != f:
            raise ShapeError(f"spectrogram with {s.shape[0]} bins, expected {f}")
    cols = [chunk_average(np.asarray(s, dtype=np.float64), chunk) for s in samples]
    return DictTrainingMatrix(np.concatenate(cols, axis=1), chunk)


def objective(x: np.ndarray, w, h: np.ndarray, mu: float) -> float:
    w = w.w if isinstance(w, Dictionary) else w
    if w.shape[0] != x.shape[0] or w.shape[1] != h.shape[0] or h.shape[1] != x.shape[1]:
        raise ShapeError(f"incompatible shapes X{x.shape} W{w.shape} H{h.shape}")
    r = x - w @ h
    return float(0.5 * np.sum(r * r) + mu * np.sum(h))


def _normalize_columns(w: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(w, axis=0)
    out = w / np.where(norms > 0, norms, 1.0)
    bad = ~(norms > 0)
    if np.any(bad):
        out[:, bad] = fallback[:, bad]
    return out


def _update_h(x, w, h, mu, eps):
    num = w.T @ x
    den = w.T @ (w @ h) + mu
    return h * num / np.maximum(den, eps)


def _update_w(x, w, h, eps, free):
    lam = w @ h
    xh = x @ h.T
    lh = lam @ h.T
    num = xh + w * np.sum(w * lh, axis=0)
    den = lh + w * np.sum(w * xh, axis=0)
    cand = _normalize_columns(w * num / np.maximum(den, eps), w)
    cand[:, ~free] = w[:, ~free]
    return cand


def _safeguarded_w_step(x, w, h, mu, eps, free, f_old, max_backtracks):
    cand = _update_w(x, w, h, eps, free)
    f_new = objective(x, cand, h, mu)
    if f_new <= f_old:
        return cand, f_new
    step = 1.0
    for _ in range(max_backtracks):
        step *= 0.5
        trial = _normalize_columns((1.0 - step) * w + step * cand, w)
        trial[:, ~free] = w[:, ~free]
        f_trial = objective(x, trial, h, mu)
        if f_trial <= f_old:
            return trial, f_trial
    return w, f_old


def sparse_nmf(xt, cfg: SparseNmfConfig = SparseNmfConfig(),
               fixed_cols: Iterable[int] | None = None,
               w_init: Dictionary | np.ndarray | None = None,
               record_updates: bool = False) -> NmfResult:
    """Learn a unit-norm dictionary and activations for a non-negative matrix.

    ``objective_trace`` holds the initial objective followed by one value per
    iteration, or one value per half-update when ``record_updates`` is set.
    """
    x = xt.x_train if isinstance(xt, DictTrainingMatrix) else np.asarray(xt, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("input must be non-negative")
    f, t = x.shape
    if cfg.k > f * t:
        raise ConfigError(f"k={cfg.k} exceeds the number of matrix entries")
    if not np.any(x > 0):
        raise DegenerateInputError("training matrix is all zeros")
    eps = cfg.epsilon
    rng = SeededRng(cfg.seed)
    w = _normalize_columns(rng.uniform_open0((f, cfg.k)), np.full((f, cfg.k), f ** -0.5))
    h = rng.uniform_open0((cfg.k, t))
    free = np.ones(cfg.k, dtype=bool)
    if w_init is not None:
        w0 = w_init.w if isinstance(w_init, Dictionary) else np.asarray(w_init, dtype=np.float64)
        if w0.shape != (f, cfg.k):
            raise ShapeError(f"w_init has shape {w0.shape}, expected {(f, cfg.k)}")
        w = w0.copy()
    if fixed_cols is not None:
        idx = np.fromiter(fixed_cols, dtype=int)
        if w_init is None and idx.size:
            raise ConfigError("fixed_cols requires w_init to supply those columns")
        if np.any((idx < 0) | (idx >= cfg.k)):
            raise IndexError("fixed column index out of range")
        free[idx] = False
    w[:, free] = _normalize_columns(w[:, free], np.full((f, int(free.sum())), f ** -0.5))

    current = objective(x, w, h, cfg.mu)
    trace = [current]
    for _ in range(cfg.max_iters):
        start = current
        h = _update_h(x, w, h, cfg.mu, eps)
        current = objective(x, w, h, cfg.mu)
        if record_updates:
            trace.append(current)
        if free.any():
            w, current = _safeguarded_w_step(x, w, h, cfg.mu, eps, free, current,
                                             cfg.max_backtracks)
            if record_updates:
                trace.append(current)
        if not record_updates:
            trace.append(current)
        if start <= 0 or (start - current) / start < cfg.rel_tol:
            break
    return NmfResult(Dictionary(w), h, trace)


def infer_activations(x: np.ndarray, w: Dictionary, cfg: SparseNmfConfig = SparseNmfConfig(),
                      return_trace: bool = False):
    """Fit non-negative activations for ``x`` with the dictionary held fixed."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != w.n_bins:
        raise ShapeError(f"spectrogram has {x.shape[0]} bins, dictionary {w.n_bins}")
    rng = SeededRng(cfg.seed)
    h = rng.uniform_open0((w.k, x.shape[1]))
    current = objective(x, w.w, h, cfg.mu)
    trace = [current]
    for _ in range(cfg.max_iters):
        start = current
        h = _update_h(x, w.w, h, cfg.mu, cfg.epsilon)
        current = objective(x, w.w, h, cfg.mu)
        trace.append(current)
        if start <= 0 or (start - current) / start < cfg.rel_tol:
            break
    return (h, trace) if return_trace else h


def staged_dictionary(negatives: DictTrainingMatrix,
                      per_class: Mapping[str, DictTrainingMatrix],
                      k_noise: int = 10, k_per_class: int = 10,
                      cfg: SparseNmfConfig = SparseNmfConfig(),
                      include_noise: bool = False) -> Dictionary:
    """Noise components first, then per-class components learnt with the noise block fixed.

    Classes are processed in mapping order; the result stacks the class blocks
    (preceded by the noise block when ``include_noise``). With ``k_noise == 0``
    ``negatives`` may be ``None`` and each class block is learnt on its own.
    """
    if k_noise > 0:
        x_neg = negatives.x_train if isinstance(negatives, DictTrainingMatrix) else negatives
        if x_neg is None or x_neg.size == 0:
            raise EmptyInputError("no negative examples for the noise dictionary")
        noise_cfg = SparseNmfConfig(k=k_noise, mu=cfg.mu, max_iters=cfg.max_iters,
                                    rel_tol=cfg.rel_tol, seed=cfg.seed, epsilon=cfg.epsilon)
        w_noise = sparse_nmf(x_neg, noise_cfg).dictionary.w
    else:
        if not per_class:
            raise EmptyInputError("no class matrices and no noise block")
        first = next(iter(per_class.values()))
        f = (first.x_train if isinstance(first, DictTrainingMatrix) else first).shape[0]
        w_noise = np.zeros((f, 0))
    f = w_noise.shape[0]
    blocks, labels = [], []
    if include_noise:
        blocks.append(w_noise)
        labels += ["noise"] * k_noise
    if k_per_class > 0:
        for ci, (name, mat) in enumerate(per_class.items()):
            xc = mat.x_train if isinstance(mat, DictTrainingMatrix) else mat
            if xc.shape[0] != f:
                raise ShapeError(f"class {name!r} has {xc.shape[0]} bins, expected {f}")
            k = k_noise + k_per_class
            rng = SeededRng(cfg.seed, ci + 1)
            w0 = np.concatenate([w_noise, rng.uniform_open0((f, k_per_class))], axis=1)
            class_cfg = SparseNmfConfig(k=k, mu=cfg.mu, max_iters=cfg.max_iters,
                                        rel_tol=cfg.rel_tol, seed=cfg.seed + ci + 1,
                                        epsilon=cfg.epsilon)
            res = sparse_nmf(xc, class_cfg, fixed_cols=range(k_noise), w_init=w0)
            blocks.append(res.dictionary.w[:, k_noise:])
            labels += [name] * k_per_class
    if not blocks:
        raise ConfigError("staged dictionary would be empty")
    return Dictionary(np.concatenate(blocks, axis=1), labels)


def soft_mask_components(x: np.ndarray, w: Dictionary, h: np.ndarray, ks: Iterable[int],
                         epsilon: float = 1e-12) -> dict[int, np.ndarray]:
    """Per-component spectrograms ``X_k = (w_k h_k^T) / (W H) * X``.

    The ratio's denominator is floored at ``epsilon`` and the mask is zero
    wherever ``W H <= epsilon``.
    """
    wm = w.w if isinstance(w, Dictionary) else w
    if wm.shape[1] != h.shape[0] or wm.shape[0] != x.shape[0] or h.shape[1] != x.shape[1]:
        raise ShapeError(f"incompatible shapes X{x.shape} W{wm.shape} H{h.shape}")
    k_total = wm.shape[1]
    ks = list(ks)
    for k in ks:
        if not 0 <= k < k_total:
            raise IndexError(f"component {k} out of range for K={k_total}")
    wh = wm @ h
    valid = wh > epsilon
    scale = np.where(valid, x / np.maximum(wh, epsilon), 0.0)
    return {k: np.outer(wm[:, k], h[k]) * scale for k in ks}


def masked_sum(x: np.ndarray, w: Dictionary, h: np.ndarray, ks: Iterable[int],
               epsilon: float = 1e-12) -> np.ndarray:
    """Sum of soft-masked components over ``ks`` (zeros for an empty set)."""
    wm = w.w if isinstance(w, Dictionary) else w
    ks = sorted(set(ks))
    if any(not 0 <= k < wm.shape[1] for k in ks):
        raise IndexError(f"component index out of range for K={wm.shape[1]}")
    if not ks:
        return np.zeros_like(x, dtype=np.float64)
    wh = wm @ h
    scale = np.where(wh > epsilon, x / np.maximum(wh, epsilon), 0.0)
    return (wm[:, ks] @ h[ks]) * scale


# -- persistence ---------------------------------------------------------------

def dictionary_digest(w: Dictionary) -> str:
    return array_digest({"w": w.w})


def save_dictionary(w: Dictionary, path, meta: Mapping | None = None) -> None:
    """Write ``W`` to an L2IM container; ``meta`` typically records sample rate and STFT settings."""
    info = {"kind": "dictionary", "component_labels": w.component_labels,
            "digest": dictionary_digest(w), **(meta or {})}
    save_blobs([TensorBlob.from_array("w", w.w)], path, info)


def load_dictionary(path) -> tuple[Dictionary, dict]:
    blobs, meta = load_container(path)
    if meta.get("kind") != "dictionary" or [b.name for b in blobs] != ["w"]:
        raise ShapeError(f"{path} does not hold a dictionary")
    return Dictionary(blobs[0].array().copy(), meta.get("component_labels")), meta
