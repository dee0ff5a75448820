"""Interpreter: classifier taps -> dictionary activations -> class prediction.

``Psi`` resizes each tapped block output to ``(freq, T)``, concatenates the
channels, applies two 3x3 convolutions (to ``hidden`` then ``K`` channels),
averages away frequency and applies a ReLU, giving ``H_I`` of shape
``(K, T)`` with ``T`` the frame count of the log-magnitude spectrogram.
``Theta`` pools ``H_I`` over time (attention or max) into ``z`` and maps it
linearly to class scores.

Training minimises, per sample and averaged over a batch::

    L_fid + alpha * ||X - W H_I||_F^2 + beta * sum(H_I)
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .classifier import ClassifierModel, group_by_length, predict_features
from .dsp import AudioSignal
from .errors import ConfigError, ContractError, ShapeError
from .metrics import multilabel_fidelity, topk_fidelity
from .net import (AdamState, AttentionPool1d, Conv2d, Dense, MaxPool1dOverTime, MeanOverFreq,
                  Relu, ResizeBilinear, Sequential, adam_step, binary_cross_entropy,
                  concat_forward, params_digest, sigmoid, soft_cross_entropy, softmax)
from .nmf import Dictionary, dictionary_digest, masked_sum, soft_mask_components
from .numerics import SeededRng, dict_to_blobs, load_container, save_blobs

log = logging.getLogger(__name__)

POOLINGS = ("att", "max")
MASK_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 10.0
    beta: float = 0.8
    l1_per_frame: bool = False  # divide the l1 term by T

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class InterpreterTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 5e-4
    seed: int = 42
    pooling: str = "att"
    attention_dim: int = 32
    hidden: int = 64
    freq: int = 8
    n_val: int = 40


@dataclass(frozen=True)
class InterpretConfig:
    tau: float = 0.1
    emit_per_component: bool = False

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ConfigError("tau must lie in (0, 1]")


@dataclass
class InterpreterForward:
    h_i: np.ndarray
    attention: np.ndarray | None
    z: np.ndarray
    probs: np.ndarray


@dataclass
class RelevanceVector:
    r: np.ndarray
    predicted_class: int
    sample_id: str = ""
    degenerate: bool = False


@dataclass
class InterpretationResult:
    selected: list[int]
    relevance: RelevanceVector
    x_int: AudioSignal
    x_int_spec: np.ndarray
    per_component: dict[int, AudioSignal] = field(default_factory=dict)
    empty_selection: bool = False
    classifier_probs: np.ndarray | None = None
    interpreter_probs: np.ndarray | None = None


class InterpreterModel:
    def __init__(self, dictionary: Dictionary, class_names, mode: str, tap_set, tap_channels,
                 pooling: str = "att", hidden: int = 64, freq: int = 8, attention_dim: int = 32,
                 seed: int = 0, classifier_digest: str = "", sample_rate: int = 16000):
        if pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}")
        self.dictionary = dictionary
        self.class_names = list(class_names)
        self.mode = mode
        self.tap_set = tuple(tap_set)
        self.tap_channels = tuple(tap_channels)
        self.pooling = pooling
        self.hidden, self.freq, self.attention_dim = hidden, freq, attention_dim
        self.classifier_digest = classifier_digest
        self.sample_rate = sample_rate
        # fixed per-tap input scaling, set from training data
        self.tap_scale = {b: 1.0 for b in self.tap_set}
        k = dictionary.k
        self.resize = ResizeBilinear(freq)
        self.psi = Sequential([
            ("conv1", Conv2d(sum(self.tap_channels), hidden)), ("relu1", Relu()),
            ("conv2", Conv2d(hidden, k)), ("freqpool", MeanOverFreq()), ("relu2", Relu()),
        ], seed=seed)
        # non-negative last-layer weights: every H_I channel starts alive on non-negative taps
        self.psi.params["conv2.w"] = 0.1 * np.abs(self.psi.params["conv2.w"])
        self.pool = AttentionPool1d(k, attention_dim) if pooling == "att" else MaxPool1dOverTime()
        self.head = Dense(k, len(self.class_names), zero_init=True)
        rng = SeededRng(seed, 1)
        self.theta = {f"head.{n}": v for n, v in self.head.init(rng.child(0)).items()}
        self.theta.update({f"pool.{n}": v for n, v in self.pool.init(rng.child(1)).items()})

    @property
    def k(self) -> int:
        return self.dictionary.k

    @property
    def theta_w(self) -> np.ndarray:
        return self.theta["head.w"]

    def all_params(self) -> dict[str, np.ndarray]:
        out = {f"psi.{n}": v for n, v in self.psi.params.items()}
        out.update({f"theta.{n}": v for n, v in self.theta.items()})
        return out

    def _sub(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.theta.items() if k.startswith(prefix + ".")}

    def head_activation(self, logits):
        return softmax(logits) if self.mode == "MultiClass" else sigmoid(logits)


def _batched_taps(model: InterpreterModel, taps) -> dict[int, np.ndarray]:
    missing = [b for b in model.tap_set if b not in taps]
    if missing:
        raise ContractError(f"missing taps for blocks {missing}")
    out = {}
    for b, c in zip(model.tap_set, model.tap_channels):
        t = np.asarray(taps[b], dtype=np.float64)
        if t.ndim == 3:
            t = t[None]
        if t.ndim != 4 or t.shape[1] != c:
            raise ShapeError(f"tap {b} must be (N, {c}, F, T), got {t.shape}")
        out[b] = t
    return out


def _forward(model: InterpreterModel, taps, n_frames: int, keep: bool = False):
    taps = _batched_taps(model, taps)
    resized = [model.resize.forward({}, taps[b] * model.tap_scale[b], out_t=n_frames)[0]
               for b in model.tap_set]
    xcat, _ = concat_forward(resized)
    h, tape = model.psi.forward(xcat, keep=keep)
    if model.pooling == "att":
        (z, a), pcache = model.pool.forward(model._sub("pool"), h)
    else:
        (z, pcache), a = model.pool.forward({}, h), None
    logits, dcache = model.head.forward(model._sub("head"), z)
    probs = model.head_activation(logits)
    return InterpreterForward(h, a, z, probs), (tape, pcache, dcache)


def interpreter_forward(model: InterpreterModel, taps, n_frames: int) -> InterpreterForward:
    """Forward one sample (taps ``(C, F, T_b)``) or a batch (``(N, C, F, T_b)``)."""
    single = np.ndim(next(iter(taps.values()))) == 3 if taps else False
    fwd, _ = _forward(model, taps, n_frames)
    if single:
        a = None if fwd.attention is None else fwd.attention[0]
        return InterpreterForward(fwd.h_i[0], a, fwd.z[0], fwd.probs[0])
    return fwd


# -- losses ----------------------------------------------------------------------

def loss_fidelity(interp_probs, f_probs, mode: str) -> float:
    """Cross-entropy of the interpreter against the classifier's output (mean over rows)."""
    p = np.asarray(interp_probs, dtype=np.float64)
    f = np.asarray(f_probs, dtype=np.float64)
    if p.shape != f.shape:
        raise ShapeError(f"length mismatch {p.shape} vs {f.shape}")
    loss, _ = (soft_cross_entropy if mode == "MultiClass" else binary_cross_entropy)(p, f)
    return float(np.mean(loss))


def loss_nmf(h_i, x, w) -> float:
    wm = w.w if isinstance(w, Dictionary) else np.asarray(w)
    h = np.asarray(h_i, dtype=np.float64)
    if wm.shape[1] != h.shape[0] or wm.shape[0] != x.shape[0] or h.shape[1] != x.shape[1]:
        raise ShapeError(f"incompatible shapes X{x.shape} W{wm.shape} H{h.shape}")
    r = x - wm @ h
    return float(np.sum(r * r))


@dataclass
class PreparedSample:
    """Frozen-classifier outputs and the spectrogram target for one clip."""

    id: str
    taps: dict[int, np.ndarray]
    x: np.ndarray
    f_probs: np.ndarray


def prepare(samples, classifier: ClassifierModel) -> list[PreparedSample]:
    feats = [classifier.features(s.signal) for s in samples]
    probs, taps = predict_features(classifier, feats, with_taps=True)
    out = []
    for s, p, tp in zip(samples, probs, taps):
        x, _ = dsp.log_magnitude(dsp.stft(s.signal, classifier.stft_cfg))
        out.append(PreparedSample(s.id, tp, x, p))
    return out


def _batch_loss(model: InterpreterModel, batch: list[PreparedSample], weights: LossWeights,
                grads: bool = False):
    """Mean loss over a same-length batch; optionally with parameter gradients."""
    n = len(batch)
    t = batch[0].x.shape[1]
    taps = {b: np.stack([s.taps[b] for s in batch]) for b in model.tap_set}
    x = np.stack([s.x for s in batch])
    f = np.stack([s.f_probs for s in batch])
    fwd, (tape, pcache, dcache) = _forward(model, taps, t, keep=grads)
    w = model.dictionary.w
    resid = x - np.einsum("fk,nkt->nft", w, fwd.h_i)
    if model.mode == "MultiClass":
        fid, dprobs = soft_cross_entropy(fwd.probs, f)
    else:
        fid, dprobs = binary_cross_entropy(fwd.probs, f)
    nmf = np.sum(resid * resid, axis=(1, 2))
    l1_scale = 1.0 / t if weights.l1_per_frame else 1.0
    l1 = fwd.h_i.sum(axis=(1, 2)) * l1_scale
    total = np.mean(fid + weights.alpha * nmf + weights.beta * l1)
    parts = {"fid": float(np.mean(fid)), "nmf": float(np.mean(nmf)), "l1": float(np.mean(l1)),
             "total": float(total)}
    if not grads:
        return parts, fwd, None
    p = fwd.probs
    if model.mode == "MultiClass":
        dlogits = p * (dprobs - np.sum(dprobs * p, axis=1, keepdims=True))
    else:
        dlogits = dprobs * p * (1.0 - p)
    dlogits /= n
    dz, g_head = model.head.backward(model._sub("head"), dcache, dlogits)
    if model.pooling == "att":
        dh, g_pool = model.pool.backward(model._sub("pool"), pcache, (dz, None))
    else:
        dh, g_pool = model.pool.backward({}, pcache, dz)
    dh = dh + (-2.0 * weights.alpha / n) * np.einsum("fk,nft->nkt", w, resid)
    dh += weights.beta * l1_scale / n
    g_psi, _ = model.psi.backward(tape, dh)
    g = {f"psi.{k}": v for k, v in g_psi.items()}
    g.update({f"theta.head.{k}": v for k, v in g_head.items()})
    g.update({f"theta.pool.{k}": v for k, v in g_pool.items()})
    return parts, fwd, g


def total_loss(batch, classifier: ClassifierModel, model: InterpreterModel,
               weights: LossWeights = LossWeights()) -> tuple[float, dict]:
    """Batch-mean loss and its per-term breakdown (``fid``, ``nmf``, ``l1``, ``total``).

    ``batch`` holds samples or :class:`PreparedSample` items; clips of
    different lengths are grouped and the result weighted by group size.
    """
    items = batch if batch and isinstance(batch[0], PreparedSample) else prepare(batch, classifier)
    sums = {"fid": 0.0, "nmf": 0.0, "l1": 0.0, "total": 0.0}
    for group in group_by_length([s.x for s in items]):
        parts, _, _ = _batch_loss(model, [items[i] for i in group], weights)
        for k in sums:
            sums[k] += parts[k] * len(group)
    out = {k: v / len(items) for k, v in sums.items()}
    out["alpha_nmf"] = weights.alpha * out["nmf"]
    out["beta_l1"] = weights.beta * out["l1"]
    return out["total"], out


# -- training --------------------------------------------------------------------

def new_interpreter(classifier: ClassifierModel, w: Dictionary,
                    cfg: InterpreterTrainConfig = InterpreterTrainConfig()) -> InterpreterModel:
    return InterpreterModel(w, classifier.class_names, classifier.mode, classifier.tap_set,
                            classifier.tap_channels(), cfg.pooling, cfg.hidden, cfg.freq,
                            cfg.attention_dim, cfg.seed, classifier.digest(), classifier.sample_rate)


def tap_scales(items: list[PreparedSample], tap_set) -> dict[int, float]:
    """``1 / RMS`` of each tapped block over a set of prepared clips."""
    out = {}
    for b in tap_set:
        ms = np.mean([np.mean(s.taps[b] ** 2) for s in items])
        out[b] = float(1.0 / np.sqrt(ms)) if ms > 0 else 1.0
    return out


def _validation_score(model, items) -> float:
    f, g = predict_prepared(model, items)
    if model.mode == "MultiClass":
        return topk_fidelity(f, g, (1,))[1]
    return multilabel_fidelity(f, g).macro_auprc


def train_interpreter(classifier: ClassifierModel, dataset, w: Dictionary,
                      weights: LossWeights = LossWeights(),
                      cfg: InterpreterTrainConfig = InterpreterTrainConfig(),
                      dict_sample_rate: int | None = None, prepared=None):
    """Fit Psi and Theta with the classifier frozen; returns ``(model, trace)``.

    ``prepared`` may pass ``(train_items, val_items)`` computed by :func:`prepare`.
    """
    if dict_sample_rate is not None and dict_sample_rate != classifier.sample_rate:
        raise ConfigError(f"dictionary built at {dict_sample_rate} Hz, classifier at {classifier.sample_rate} Hz")
    if dataset.sample_rate != classifier.sample_rate:
        raise ConfigError("dataset and classifier sample rates differ")
    if w.n_bins != classifier.stft_cfg.n_bins:
        raise ShapeError(f"dictionary has {w.n_bins} bins, spectrogram has {classifier.stft_cfg.n_bins}")
    before = classifier.digest()
    if prepared is None:
        prepared = (prepare(dataset.train, classifier), prepare(dataset.test[:cfg.n_val], classifier))
    train, val = prepared
    model = new_interpreter(classifier, w, cfg)
    model.tap_scale = tap_scales(train, model.tap_set)
    params = model.all_params()
    state = AdamState(lr=cfg.lr)
    rng = SeededRng(cfg.seed, 11)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        sums = {"fid": 0.0, "nmf": 0.0, "l1": 0.0, "total": 0.0}
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            for group in group_by_length([train[i].x for i in idx]):
                batch = [train[idx[g]] for g in group]
                parts, _, grads = _batch_loss(model, batch, weights, grads=True)
                scale = len(group) / len(idx)
                adam_step(params, {k: v * scale for k, v in grads.items()}, state)
                for k in sums:
                    sums[k] += parts[k] * len(group)
        entry = {"epoch": epoch + 1, **{f"L_{k}": v / len(train) for k, v in sums.items()}}
        if val:
            entry["val_fidelity"] = _validation_score(model, val)
        trace.append(entry)
        log.info("interpreter epoch %d: %s", epoch + 1, entry)
    if classifier.digest() != before:
        raise ContractError("classifier parameters changed during interpreter training")
    return model, trace


# -- prediction, relevance and interpretation -----------------------------------------

def predict_prepared(model: InterpreterModel, items: list[PreparedSample], batch_size: int = 32):
    """``(classifier_probs, interpreter_probs)`` for prepared items."""
    f = np.stack([s.f_probs for s in items])
    g = np.zeros_like(f)
    for group in group_by_length([s.x for s in items]):
        for s in range(0, len(group), batch_size):
            idx = group[s:s + batch_size]
            taps = {b: np.stack([items[i].taps[b] for i in idx]) for b in model.tap_set}
            fwd, _ = _forward(model, taps, items[idx[0]].x.shape[1])
            g[idx] = fwd.probs
    return f, g


def batch_predict(samples, classifier: ClassifierModel, interpreter: InterpreterModel):
    return predict_prepared(interpreter, prepare(samples, classifier))


def relevance(fwd: InterpreterForward, theta_w_row_c, c: int, sample_id: str = "") -> RelevanceVector:
    """``r_k = z_k theta_ck / max_l |z_l theta_cl|``, zeros with a flag when all contributions vanish.

    The ratio is rounded to single precision (kept as float64) so that
    rescaling ``theta_c`` by a positive factor, which perturbs the products
    in the last bit, leaves ``r`` unchanged.
    """
    contrib = np.asarray(fwd.z, dtype=np.float64) * np.asarray(theta_w_row_c, dtype=np.float64)
    m = np.max(np.abs(contrib)) if contrib.size else 0.0
    if m == 0.0:
        return RelevanceVector(np.zeros_like(contrib), int(c), sample_id, degenerate=True)
    r = (contrib / m).astype(np.float32).astype(np.float64)
    return RelevanceVector(r, int(c), sample_id)


@dataclass
class _Analysis:
    x: np.ndarray
    phase: np.ndarray
    n: int
    f_probs: np.ndarray
    c: int
    fwd: InterpreterForward
    rel: RelevanceVector


def _analyse(signal: AudioSignal, model: InterpreterModel, classifier: ClassifierModel,
             sample_id: str = "") -> _Analysis:
    if signal.sample_rate != classifier.sample_rate:
        raise ConfigError(f"signal at {signal.sample_rate} Hz, classifier at {classifier.sample_rate} Hz")
    x, phase = dsp.log_magnitude(dsp.stft(signal, classifier.stft_cfg))
    feats = classifier.features(signal)
    logits, taps, _ = classifier.forward_features(feats[None])
    f_probs = classifier.head_activation(logits)[0]
    c = int(np.argmax(f_probs))
    fwd = interpreter_forward(model, {b: t[0] for b, t in taps.items()}, x.shape[1])
    rel = relevance(fwd, model.theta_w[c], c, sample_id)
    return _Analysis(x, phase, len(signal.samples), f_probs, c, fwd, rel)


def _select(rel: RelevanceVector, tau: float) -> list[int]:
    return [int(k) for k in np.flatnonzero(rel.r > tau)]


def generate_interpretation(signal: AudioSignal, model: InterpreterModel,
                            classifier: ClassifierModel, cfg: InterpretConfig = InterpretConfig(),
                            sample_id: str = "") -> InterpretationResult:
    an = _analyse(signal, model, classifier, sample_id)
    selected = _select(an.rel, cfg.tau)
    w, h = model.dictionary, an.fwd.h_i
    x_int_spec = masked_sum(an.x, w, h, selected, MASK_EPS)
    stft_cfg = classifier.stft_cfg
    x_int = dsp.inv(x_int_spec, an.phase, stft_cfg, an.n, signal.sample_rate)
    per = {}
    if cfg.emit_per_component:
        for k, xk in soft_mask_components(an.x, w, h, selected, MASK_EPS).items():
            per[k] = dsp.inv(xk, an.phase, stft_cfg, an.n, signal.sample_rate)
    return InterpretationResult(selected, an.rel, x_int, x_int_spec, per, not selected,
                                an.f_probs, an.fwd.probs)


def explain(signal: AudioSignal, model: InterpreterModel, classifier: ClassifierModel,
            sample_id: str = "") -> InterpretationResult:
    return generate_interpretation(signal, model, classifier, InterpretConfig(), sample_id)


def faithfulness_removal(signal: AudioSignal, model: InterpreterModel, classifier: ClassifierModel,
                         cfg: InterpretConfig = InterpretConfig(), return_selection: bool = False,
                         components=None):
    """``FF = f(x)_c - f(x2)_c`` with ``x2`` the clip after removing the selected components.

    ``components`` overrides the relevance-based selection (used by the random baseline).
    """
    an = _analyse(signal, model, classifier)
    selected = _select(an.rel, cfg.tau) if components is None else sorted({int(k) for k in components})
    removed = masked_sum(an.x, model.dictionary, an.fwd.h_i, selected, MASK_EPS)
    x2_spec = np.maximum(an.x - removed, 0.0)
    x2 = dsp.inv(x2_spec, an.phase, classifier.stft_cfg, an.n, signal.sample_rate)
    logits, _, _ = classifier.forward_features(classifier.features(x2)[None])
    ff = float(an.f_probs[an.c] - classifier.head_activation(logits)[0][an.c])
    return (ff, x2, selected) if return_selection else (ff, x2)


# -- persistence ------------------------------------------------------------------

def save_interpreter(model: InterpreterModel, path) -> None:
    meta = {
        "kind": "interpreter",
        "class_names": model.class_names,
        "mode": model.mode,
        "tap_set": list(model.tap_set),
        "tap_channels": list(model.tap_channels),
        "pooling": model.pooling,
        "hidden": model.hidden,
        "freq": model.freq,
        "attention_dim": model.attention_dim,
        "k": model.k,
        "sample_rate": model.sample_rate,
        "classifier_digest": model.classifier_digest,
        "tap_scale": {str(b): v for b, v in model.tap_scale.items()},
        "dictionary_digest": dictionary_digest(model.dictionary),
        "digest": params_digest(model.all_params()),
    }
    save_blobs(dict_to_blobs(model.all_params()), path, meta)


def load_interpreter(path, dictionary: Dictionary) -> InterpreterModel:
    blobs, meta = load_container(path)
    if meta.get("kind") != "interpreter":
        raise ShapeError(f"{path} does not hold an interpreter")
    if dictionary_digest(dictionary) != meta["dictionary_digest"]:
        raise ContractError("dictionary does not match the one the interpreter was trained with")
    model = InterpreterModel(dictionary, meta["class_names"], meta["mode"], meta["tap_set"],
                             meta["tap_channels"], meta["pooling"], meta["hidden"], meta["freq"],
                             meta["attention_dim"], 0, meta["classifier_digest"], meta["sample_rate"])
    model.tap_scale = {int(b): float(v) for b, v in meta["tap_scale"].items()}
    loaded = {b.name: b.array().copy() for b in blobs}
    if set(loaded) != set(model.all_params()):
        raise ShapeError("parameter names do not match the architecture")
    for name, arr in loaded.items():
        group, key = name.split(".", 1)
        (model.psi.params if group == "psi" else model.theta)[key] = arr
    return model

