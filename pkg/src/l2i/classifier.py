"""The block-structured CNN under interpretation.

Each block is ``conv3x3 -> affine -> ReLU -> conv3x3 -> ReLU ->
maxpool 2x2``; the head is a global average pool and a dense layer followed
by softmax (MultiClass) or sigmoid (MultiLabel). With a log-mel input of
``T`` frames, block ``b`` outputs ``floor(T / 2**b)`` frames and
``floor(n_mels / 2**b)`` mel rows.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp
from .dsp import AudioSignal, MelConfig, StftConfig
from .errors import ConfigError, ShapeError
from .metrics import accuracy, macro_auprc
from .net import (AdamState, ChannelAffine, Conv2d, Dense, GlobalAvgPool2d, MaxPool2d, Relu,
                  Sequential, adam_step, params_digest, sigmoid, softmax)
from .numerics import SeededRng, dict_to_blobs, load_container, save_blobs

log = logging.getLogger(__name__)


@dataclass
class ClassifierTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_halve_every: int = 0  # 0 disables the step schedule
    seed: int = 42
    channels: tuple[int, ...] = (16, 32, 64, 64)
    tap_set: tuple[int, ...] = (2, 3, 4)


@dataclass
class ClassifierOutput:
    probs: np.ndarray
    logits: np.ndarray
    taps: dict[int, np.ndarray]


@dataclass
class ClassifierModel:
    net: Sequential
    class_names: list[str]
    mode: str
    sample_rate: int
    channels: tuple[int, ...]
    tap_set: tuple[int, ...]
    stft_cfg: StftConfig = field(default_factory=StftConfig)
    mel_cfg: MelConfig = field(default_factory=MelConfig)
    norm_mean: float = 0.0
    norm_std: float = 1.0

    def __post_init__(self):
        if not set(self.tap_set) <= set(range(1, len(self.channels) + 1)):
            raise ConfigError(f"tap_set {self.tap_set} not within 1..{len(self.channels)}")
        if self.mode not in ("MultiClass", "MultiLabel"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        self._block_ends = [i for i, (n, _) in enumerate(self.net.layers) if n.endswith(".pool")]
        self._fb = dsp.mel_filterbank(self.mel_cfg, self.sample_rate, self.stft_cfg)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def digest(self) -> str:
        return params_digest(self.net.params)

    def tap_channels(self) -> list[int]:
        return [self.channels[b - 1] for b in self.tap_set]

    def features(self, signal: AudioSignal) -> np.ndarray:
        """Normalised log-mel spectrogram ``(n_mels, T)``."""
        spec = dsp.stft(signal, self.stft_cfg)
        power = spec.real ** 2 + spec.imag ** 2
        lm = np.log(self.mel_cfg.log_floor + self._fb @ power)
        return (lm - self.norm_mean) / self.norm_std

    def head_activation(self, logits: np.ndarray) -> np.ndarray:
        return softmax(logits) if self.mode == "MultiClass" else sigmoid(logits)

    def forward_features(self, feats: np.ndarray, keep: bool = False):
        """Run a ``(N, n_mels, T)`` batch; returns ``(logits, taps, tape)``."""
        logits, tape = self.net.forward(feats[:, None, :, :], keep=keep)
        taps = {b: tape.outputs[self._block_ends[b - 1]] for b in self.tap_set}
        return logits, taps, tape


def build_network(n_classes: int, channels=(16, 32, 64, 64), seed: int = 0) -> Sequential:
    layers = []
    c_in = 1
    for b, c in enumerate(channels, start=1):
        layers += [
            (f"b{b}.conv1", Conv2d(c_in, c)), (f"b{b}.affine1", ChannelAffine(c)), (f"b{b}.relu1", Relu()),
            (f"b{b}.conv2", Conv2d(c, c)), (f"b{b}.relu2", Relu()),
            (f"b{b}.pool", MaxPool2d((2, 2))),
        ]
        c_in = c
    layers += [("head.gap", GlobalAvgPool2d()), ("head.dense", Dense(c_in, n_classes, zero_init=True))]
    return Sequential(layers, seed=seed)


def new_model(class_names, mode, sample_rate, cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
              stft_cfg: StftConfig = StftConfig(), mel_cfg: MelConfig = MelConfig()) -> ClassifierModel:
    net = build_network(len(class_names), cfg.channels, cfg.seed)
    return ClassifierModel(net, list(class_names), mode, sample_rate, tuple(cfg.channels),
                           tuple(cfg.tap_set), stft_cfg, mel_cfg)


def _check_rate(model: ClassifierModel, signal: AudioSignal):
    if signal.sample_rate != model.sample_rate:
        raise ConfigError(f"signal at {signal.sample_rate} Hz, model expects {model.sample_rate} Hz")


def classify(model: ClassifierModel, signal: AudioSignal) -> ClassifierOutput:
    _check_rate(model, signal)
    logits, taps, _ = model.forward_features(model.features(signal)[None])
    return ClassifierOutput(model.head_activation(logits)[0], logits[0],
                            {b: t[0] for b, t in taps.items()})


def group_by_length(arrays) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for i, a in enumerate(arrays):
        groups.setdefault(a.shape[-1], []).append(i)
    return list(groups.values())


def predict_features(model: ClassifierModel, feats: list[np.ndarray], batch_size: int = 32,
                     with_taps: bool = False):
    """Probabilities (and optionally per-sample taps) for precomputed features."""
    probs = np.zeros((len(feats), model.n_classes))
    taps: list[dict[int, np.ndarray] | None] = [None] * len(feats)
    for group in group_by_length(feats):
        for s in range(0, len(group), batch_size):
            idx = group[s:s + batch_size]
            logits, tp, _ = model.forward_features(np.stack([feats[i] for i in idx]))
            probs[idx] = model.head_activation(logits)
            if with_taps:
                for j, i in enumerate(idx):
                    taps[i] = {b: t[j] for b, t in tp.items()}
    return (probs, taps) if with_taps else probs


def predict(model: ClassifierModel, signals: list[AudioSignal], batch_size: int = 32) -> np.ndarray:
    for s in signals:
        _check_rate(model, s)
    return predict_features(model, [model.features(s) for s in signals], batch_size)


def _loss_and_dlogits(model, logits, y):
    n = logits.shape[0]
    if model.mode == "MultiClass":
        p = softmax(logits)
        loss = -np.sum(y * np.log(np.clip(p, 1e-300, None))) / n
        return loss, (p - y) / n
    p = sigmoid(logits)
    pc = np.clip(p, 1e-300, 1 - 1e-16)
    loss = -np.sum(y * np.log(pc) + (1 - y) * np.log1p(-pc)) / n
    return loss, (p - y) / n


def evaluate_classifier(model: ClassifierModel, samples, probs: np.ndarray | None = None) -> dict:
    if probs is None:
        probs = predict(model, [s.signal for s in samples])
    labels = np.stack([s.label for s in samples])
    if model.mode == "MultiClass":
        return {"accuracy": accuracy(probs, labels), "n_samples": len(samples)}
    return {"macro_auprc": macro_auprc(probs, labels), "n_samples": len(samples)}


def train_classifier(dataset, cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
                     stft_cfg: StftConfig = StftConfig(), mel_cfg: MelConfig = MelConfig()):
    """Train from scratch with Adam; returns ``(model, report)``."""
    if not dataset.train:
        raise ConfigError("empty training split")
    y = np.stack([s.label for s in dataset.train])
    if dataset.mode == "MultiClass" and len(np.unique(y.argmax(axis=1))) < 2:
        raise ConfigError("MultiClass training needs at least two classes present")
    model = new_model(dataset.class_names, dataset.mode, dataset.sample_rate, cfg, stft_cfg, mel_cfg)
    for s in dataset.train + dataset.test:
        _check_rate(model, s.signal)
    raw = [model.features(s.signal) for s in dataset.train]
    flat = np.concatenate([f.ravel() for f in raw])
    model.norm_mean, model.norm_std = float(flat.mean()), float(flat.std() or 1.0)
    feats = [(f - model.norm_mean) / model.norm_std for f in raw]
    test_feats = [model.features(s.signal) for s in dataset.test]

    state = AdamState(lr=cfg.lr)
    rng = SeededRng(cfg.seed, 7)
    report = {"epochs": [], "initial_loss": None}
    for epoch in range(cfg.epochs):
        if cfg.lr_halve_every:
            state.lr = cfg.lr * 0.5 ** (epoch // cfg.lr_halve_every)
        order = rng.permutation(len(feats))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            for group in group_by_length([feats[i] for i in idx]):
                sel = [idx[g] for g in group]
                xb = np.stack([feats[i] for i in sel])
                logits, _, tape = model.forward_features(xb, keep=True)
                loss, dlogits = _loss_and_dlogits(model, logits, y[sel])
                if report["initial_loss"] is None:
                    report["initial_loss"] = float(loss)
                grads, _ = model.net.backward(tape, dlogits * len(sel) / len(idx))
                adam_step(model.net.params, grads, state)
                losses.append(loss * len(sel))
        entry = {"epoch": epoch + 1, "train_loss": float(np.sum(losses) / len(order))}
        if test_feats:
            probs = predict_features(model, test_feats)
            entry.update({f"test_{k}": v for k, v in
                          evaluate_classifier(model, dataset.test, probs).items() if k != "n_samples"})
        report["epochs"].append(entry)
        log.info("classifier epoch %d: %s", epoch + 1, entry)
    return model, report


# -- persistence ---------------------------------------------------------------

def save_classifier(model: ClassifierModel, path) -> None:
    meta = {
        "kind": "classifier",
        "class_names": model.class_names,
        "mode": model.mode,
        "sample_rate": model.sample_rate,
        "channels": list(model.channels),
        "tap_set": list(model.tap_set),
        "stft": asdict(model.stft_cfg),
        "mel": asdict(model.mel_cfg),
        "norm": [model.norm_mean, model.norm_std],
        "architecture": model.net.spec(),
        "digest": model.digest(),
    }
    save_blobs(dict_to_blobs(model.net.params), path, meta)


def load_classifier(path) -> ClassifierModel:
    blobs, meta = load_container(path)
    if meta.get("kind") != "classifier":
        raise ShapeError(f"{path} does not hold a classifier")
    params = {b.name: b.array().copy() for b in blobs}
    net = build_network(len(meta["class_names"]), tuple(meta["channels"]))
    if set(params) != set(net.params):
        raise ShapeError("parameter names do not match the architecture")
    net.params = params
    model = ClassifierModel(net, meta["class_names"], meta["mode"], meta["sample_rate"],
                            tuple(meta["channels"]), tuple(meta["tap_set"]),
                            StftConfig(**meta["stft"]), MelConfig(**meta["mel"]),
                            meta["norm"][0], meta["norm"][1])
    return model
