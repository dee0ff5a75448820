"""Preset-to-models pipeline shared by the scripts and the acceptance suite."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

from . import synthgen
from .classifier import ClassifierModel, ClassifierTrainConfig, train_classifier
from .config import RunConfig
from .dsp import MelConfig, StftConfig
from .errors import ConfigError
from .interpreter import (InterpreterModel, InterpreterTrainConfig, LossWeights, PreparedSample,
                          prepare, train_interpreter)
from .nmf import Dictionary, SparseNmfConfig, build_training_matrix, staged_dictionary

log = logging.getLogger(__name__)


def stft_config(cfg: RunConfig) -> StftConfig:
    return StftConfig(fft_size=cfg.stft.fft_size, hop=cfg.stft.hop)


def mel_config(cfg: RunConfig) -> MelConfig:
    return MelConfig(n_mels=cfg.mel.n_mels, f_min=cfg.mel.f_min, f_max=cfg.mel.f_max or None)


def nmf_config(cfg: RunConfig, k: int | None = None) -> SparseNmfConfig:
    n = cfg.nmf
    return SparseNmfConfig(k=k or n.k, mu=n.mu, max_iters=n.max_iters, rel_tol=n.rel_tol, seed=cfg.seed)


def dataset_spec(cfg: RunConfig, preset: str | None = None) -> synthgen.DatasetSpec:
    name = preset or cfg.dataset.preset
    if name not in synthgen.PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(synthgen.PRESETS)}")
    overrides = {"seed": cfg.seed}
    if cfg.dataset.n_train:
        overrides["n_train"] = cfg.dataset.n_train
    if cfg.dataset.n_test:
        overrides["n_test"] = cfg.dataset.n_test
    if cfg.dataset.clip_seconds:
        overrides["clip_seconds"] = cfg.dataset.clip_seconds
    return synthgen.PRESETS[name](**overrides)


def staged_from_spectrograms(xs, samples, class_names, cfg: RunConfig) -> Dictionary:
    """Noise block from label-free clips, then one block per class from its positive clips."""
    neg = [x for x, s in zip(xs, samples) if not s.label.any()]
    if cfg.nmf.k_noise > 0 and not neg:
        raise ConfigError("no label-free training clips for the noise block; set nmf.k_noise=0")
    per_class = {}
    for ci, name in enumerate(class_names):
        pos = [x for x, s in zip(xs, samples) if s.label[ci] > 0]
        if pos:
            per_class[name] = build_training_matrix(pos, cfg.nmf.chunk)
    negatives = build_training_matrix(neg, cfg.nmf.chunk) if neg else None
    return staged_dictionary(negatives, per_class, cfg.nmf.k_noise, cfg.nmf.k_per_class,
                             nmf_config(cfg), cfg.nmf.include_noise)


@dataclass
class PipelineResult:
    config: RunConfig
    dataset: synthgen.Dataset
    classifier: ClassifierModel
    classifier_report: dict
    dictionary: Dictionary
    prepared_train: list[PreparedSample]
    prepared_test: list[PreparedSample]
    interpreters: dict[str, InterpreterModel] = field(default_factory=dict)
    traces: dict[str, list] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def run_pipeline(cfg: RunConfig, poolings=None, dataset: synthgen.Dataset | None = None) -> PipelineResult:
    """Generate data, train the classifier, learn the staged dictionary, train interpreters."""
    t0 = time.perf_counter()
    timings = {}

    def mark(stage):
        timings[stage] = time.perf_counter() - t0
        log.info("%s done after %.1f s", stage, timings[stage])

    ds = dataset if dataset is not None else synthgen.generate_dataset(dataset_spec(cfg))
    mark("data")
    c = cfg.classifier
    ccfg = ClassifierTrainConfig(epochs=c.epochs, batch_size=c.batch_size, lr=c.lr,
                                 lr_halve_every=c.lr_halve_every, seed=cfg.seed)
    clf, report = train_classifier(ds, ccfg, stft_config(cfg), mel_config(cfg))
    mark("classifier")
    train, test = prepare(ds.train, clf), prepare(ds.test, clf)
    w = staged_from_spectrograms([s.x for s in train], ds.train, ds.class_names, cfg)
    mark("dictionary")
    res = PipelineResult(cfg, ds, clf, report, w, train, test, timings=timings)
    i = cfg.interpreter
    weights = LossWeights(i.alpha, i.beta, i.l1_per_frame)
    for pooling in poolings or (i.pooling,):
        icfg = InterpreterTrainConfig(epochs=i.epochs, batch_size=i.batch_size, lr=i.lr, seed=cfg.seed,
                                      pooling=pooling, attention_dim=i.attention_dim)
        model, trace = train_interpreter(clf, ds, w, weights, icfg, prepared=(train, test[:icfg.n_val]))
        res.interpreters[pooling], res.traces[pooling] = model, trace
        mark(f"interpreter_{pooling}")
    return res

