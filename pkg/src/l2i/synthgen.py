"""Synthetic sound-event corpora, corruption protocols and WAV-folder ingestion."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import AudioSignal, load_wav, save_wav
from .errors import ConfigError, DegenerateInputError, FormatError, IoError
from .numerics import SeededRng, key_from_string

KINDS = ("Tone", "HarmonicStack", "Chirp", "NoiseBurst", "AmTone")
MODES = ("MultiClass", "MultiLabel")
FADE_SECONDS = 0.03
# events keep this far from band edges so window leakage stays in band
GUARD_HZ = 50.0


@dataclass(frozen=True)
class ClassSpec:
    name: str
    kind: str
    band: tuple[float, float]
    duration_range: tuple[float, float] = (0.5, 1.2)
    amplitude_range: tuple[float, float] = (0.3, 0.8)
    fundamental_range: tuple[float, float] | None = None

    def inner_band(self) -> tuple[float, float]:
        lo, hi = self.band
        g = min(GUARD_HZ, 0.2 * (hi - lo))
        return lo + g, hi - g


@dataclass(frozen=True)
class DatasetSpec:
    classes: tuple[ClassSpec, ...]
    mode: str = "MultiClass"
    n_train: int = 200
    n_test: int = 80
    clip_seconds: float = 1.5
    sample_rate: int = 16000
    background_snr_db: float | None = None
    max_events_per_clip: int = 1
    n_background_only: int = 0
    seed: int = 42

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        if self.mode == "MultiClass" and len(self.classes) < 2:
            raise ConfigError("MultiClass needs at least two classes")
        nyq = self.sample_rate / 2
        for c in self.classes:
            if c.kind not in KINDS:
                raise ConfigError(f"class {c.name!r}: unknown kind {c.kind!r}")
            lo, hi = c.band
            if not 0 <= lo < hi < nyq:
                raise ConfigError(f"class {c.name!r}: band {c.band} outside (0, Nyquist)")
            if c.duration_range[0] > self.clip_seconds:
                raise ConfigError(f"class {c.name!r}: events longer than the clip")
        bands = sorted(c.band for c in self.classes)
        for (a_lo, a_hi), (b_lo, b_hi) in zip(bands, bands[1:]):
            if b_lo < a_hi:
                raise ConfigError(f"overlapping class bands {(a_lo, a_hi)} and {(b_lo, b_hi)}")
        if self.max_events_per_clip < 1 or self.max_events_per_clip > len(self.classes):
            raise ConfigError("max_events_per_clip must be in [1, number of classes]")

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]


@dataclass
class Sample:
    signal: AudioSignal
    label: np.ndarray
    id: str


@dataclass
class Dataset:
    train: list[Sample]
    test: list[Sample]
    class_names: list[str]
    mode: str = "MultiClass"
    bands: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def sample_rate(self) -> int:
        return (self.train or self.test)[0].signal.sample_rate


def toy4(**overrides) -> DatasetSpec:
    classes = (
        ClassSpec("tone", "Tone", (200.0, 400.0)),
        ClassSpec("harmonic", "HarmonicStack", (500.0, 900.0), fundamental_range=(500.0, 700.0)),
        ClassSpec("chirp", "Chirp", (1000.0, 2000.0)),
        ClassSpec("noise_burst", "NoiseBurst", (3000.0, 4000.0)),
    )
    return replace(DatasetSpec(classes=classes), **overrides)


def toy_urban(**overrides) -> DatasetSpec:
    classes = (
        ClassSpec("hum", "Tone", (150.0, 400.0)),
        ClassSpec("horn", "HarmonicStack", (500.0, 900.0), fundamental_range=(500.0, 700.0)),
        ClassSpec("siren", "Chirp", (1000.0, 2000.0)),
        ClassSpec("hiss", "NoiseBurst", (2500.0, 3500.0)),
        ClassSpec("bell", "AmTone", (4000.0, 5000.0)),
        ClassSpec("whistle", "Tone", (5500.0, 7000.0)),
    )
    spec = DatasetSpec(classes=classes, mode="MultiLabel", n_train=300, n_test=100,
                       background_snr_db=5.0, max_events_per_clip=2, n_background_only=40)
    return replace(spec, **overrides)


PRESETS = {"toy4": toy4, "toy-urban": toy_urban}


def _envelope(n: int, sr: int) -> np.ndarray:
    fade = min(int(FADE_SECONDS * sr), n // 2)
    env = np.ones(n)
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        env[:fade] = ramp
        env[n - fade:] = ramp[::-1]
    return env


def _bandlimited_noise(n: int, sr: int, lo: float, hi: float, rng: SeededRng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n=n)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-300)


def synth_event(cls: ClassSpec, n: int, sr: int, rng: SeededRng) -> np.ndarray:
    """One unit-envelope event of ``n`` samples at a random amplitude."""
    t = np.arange(n) / sr
    lo, hi = cls.inner_band()
    amp = rng.uniform(*cls.amplitude_range)
    phase = rng.uniform(0, 2 * np.pi)
    if cls.kind == "Tone":
        x = np.sin(2 * np.pi * rng.uniform(lo, hi) * t + phase)
    elif cls.kind == "HarmonicStack":
        f_lo, f_hi = cls.fundamental_range or (lo, 0.5 * (lo + hi))
        f0 = rng.uniform(max(f_lo, lo), min(f_hi, hi))
        # partials are harmonics 5, 6, 7, ... of f0 / 5 that fit inside the band
        step = f0 / 5.0
        x = np.zeros(n)
        j = 0
        while f0 + j * step <= hi:
            x += np.sin(2 * np.pi * (f0 + j * step) * t + rng.uniform(0, 2 * np.pi)) / (j + 1)
            j += 1
        x /= np.sqrt(np.mean(x ** 2) * 2) + 1e-300
    elif cls.kind == "Chirp":
        f_a, f_b = rng.uniform(lo, hi, size=2)
        dur = n / sr
        inst = f_a * t + 0.5 * (f_b - f_a) * t * t / dur
        x = np.sin(2 * np.pi * inst + phase)
    elif cls.kind == "NoiseBurst":
        x = _bandlimited_noise(n, sr, lo, hi, rng) / np.sqrt(2.0)
    elif cls.kind == "AmTone":
        fc = rng.uniform(lo + 20.0, hi - 20.0)
        rate = rng.uniform(3.0, 8.0)
        depth = rng.uniform(0.5, 0.9)
        x = (1.0 + depth * np.sin(2 * np.pi * rate * t)) / (1.0 + depth) * np.sin(2 * np.pi * fc * t + phase)
    else:
        raise ConfigError(f"unknown kind {cls.kind!r}")
    return amp * x * _envelope(n, sr)


def _place_event(clip: np.ndarray, cls: ClassSpec, sr: int, rng: SeededRng) -> None:
    n_clip = clip.size
    dur = rng.uniform(*cls.duration_range)
    n = min(n_clip, max(1, int(round(dur * sr))))
    start = int(rng.integers(0, n_clip - n + 1))
    clip[start:start + n] += synth_event(cls, n, sr, rng)


def _nominal_event_power(spec: DatasetSpec) -> float:
    powers = []
    for c in spec.classes:
        a = np.mean(c.amplitude_range)
        duty = min(1.0, np.mean(c.duration_range) / spec.clip_seconds)
        powers.append(0.5 * a * a * duty)
    return float(np.mean(powers))


def _make_sample(spec: DatasetSpec, split: str, index: int, background_only: bool = False) -> Sample:
    sid = f"{split}-{index:05d}" if not background_only else f"{split}-bg-{index:05d}"
    rng = SeededRng(spec.seed, key_from_string(sid))
    sr = spec.sample_rate
    n_clip = int(round(spec.clip_seconds * sr))
    clip = np.zeros(n_clip)
    c = len(spec.classes)
    label = np.zeros(c)
    if not background_only:
        if spec.mode == "MultiClass":
            chosen = [int(rng.integers(0, c))]
        else:
            m = int(rng.integers(1, spec.max_events_per_clip + 1))
            chosen = sorted(int(i) for i in rng.choice(c, size=m, replace=False))
        for ci in chosen:
            _place_event(clip, spec.classes[ci], sr, rng)
            label[ci] = 1.0
    if spec.background_snr_db is not None:
        noise = rng.standard_normal(n_clip)
        p_sig = np.mean(clip ** 2) if not background_only else _nominal_event_power(spec)
        target = p_sig / 10 ** (spec.background_snr_db / 10.0)
        clip += noise * np.sqrt(target / np.mean(noise ** 2))
    return Sample(AudioSignal(clip, sr), label, sid)


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic corpus; each sample is seeded from ``(seed, id)``."""
    spec.validate()
    train = [_make_sample(spec, "train", i) for i in range(spec.n_train)]
    if spec.mode == "MultiLabel" and spec.background_snr_db is not None:
        train += [_make_sample(spec, "train", i, background_only=True)
                  for i in range(spec.n_background_only)]
    test = [_make_sample(spec, "test", i) for i in range(spec.n_test)]
    bands = {c.name: tuple(c.band) for c in spec.classes}
    return Dataset(train, test, spec.class_names, spec.mode, bands)


def corrupt_with_noise(s: Sample, snr_db: float, seed: int) -> Sample:
    """Add white noise so that ``10 log10(P_signal / P_noise) == snr_db``."""
    x = s.signal.samples
    p_sig = float(np.mean(x ** 2))
    if p_sig <= 0:
        raise DegenerateInputError(f"sample {s.id} has zero power")
    noise = SeededRng(seed, key_from_string(s.id)).standard_normal(x.size)
    noise *= math.sqrt(p_sig / (np.mean(noise ** 2) * 10 ** (snr_db / 10.0)))
    return Sample(AudioSignal(x + noise, s.signal.sample_rate), s.label.copy(),
                  f"{s.id}~noise{snr_db:g}dB")


def corrupt_with_mix(a: Sample, b: Sample, gain_b: float = 1.0) -> Sample:
    """``a + gain_b * b`` with the shorter signal zero-padded; keeps ``a``'s label."""
    if a.signal.sample_rate != b.signal.sample_rate:
        raise ConfigError("cannot mix signals with different sample rates")
    xa, xb = a.signal.samples, b.signal.samples
    n = max(xa.size, xb.size)
    out = np.zeros(n)
    out[:xa.size] += xa
    out[:xb.size] += gain_b * xb
    return Sample(AudioSignal(out, a.signal.sample_rate), a.label.copy(), f"{a.id}+{b.id}")


# -- on-disk datasets ------------------------------------------------------------

def _parse_labels(field_value: str) -> list[str]:
    return [p.strip() for p in field_value.split(";") if p.strip()]


def ingest_wav_folder(audio_dir, labels_csv, mode: str = "MultiClass",
                      class_names: Sequence[str] | None = None) -> Dataset:
    """Build a dataset from a folder of WAVs and a ``filename,split,label`` CSV."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    audio_dir = Path(audio_dir)
    try:
        with open(labels_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {labels_csv}: {exc}") from exc
    if rows and not {"filename", "split", "label"} <= set(rows[0]):
        raise FormatError("labels CSV needs columns filename, split, label")
    names = list(class_names) if class_names is not None else []
    parsed = []
    for row in rows:
        split = row["split"].strip()
        if split not in ("train", "test"):
            raise FormatError(f"unknown split {split!r} for {row['filename']}")
        labels = _parse_labels(row["label"] or "")
        if mode == "MultiClass" and len(labels) != 1:
            raise FormatError(f"{row['filename']}: MultiClass rows need exactly one label")
        for lab in labels:
            if lab not in names:
                if class_names is not None:
                    raise FormatError(f"{row['filename']}: unknown class {lab!r}")
                names.append(lab)
        parsed.append((row["filename"], split, labels))
    train, test, rate = [], [], None
    for fname, split, labels in parsed:
        path = audio_dir / fname
        if not path.exists():
            raise IoError(f"missing audio file: {fname}")
        sig = load_wav(path)
        if rate is None:
            rate = sig.sample_rate
        elif sig.sample_rate != rate:
            raise ConfigError(f"{fname}: sample rate {sig.sample_rate} differs from {rate}")
        y = np.zeros(len(names))
        for lab in labels:
            y[names.index(lab)] = 1.0
        (train if split == "train" else test).append(Sample(sig, y, Path(fname).stem))
    return Dataset(train, test, names, mode)


def write_dataset(ds: Dataset, out_dir) -> Path:
    """Write WAVs plus ``manifest.csv`` (ingestable) and ``classes.csv`` (order and bands)."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "split", "label"])
        for split, samples in (("train", ds.train), ("test", ds.test)):
            for s in samples:
                fname = f"{s.id}.wav"
                save_wav(s.signal, out / "audio" / fname)
                labels = [ds.class_names[i] for i in np.flatnonzero(s.label)]
                w.writerow([fname, split, ";".join(labels)])
    with open(out / "classes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "band_lo", "band_hi"])
        for name in ds.class_names:
            lo, hi = ds.bands.get(name, ("", ""))
            w.writerow([name, lo, hi])
    with open(out / "info.json", "w") as fh:
        json.dump({"mode": ds.mode, "n_train": len(ds.train), "n_test": len(ds.test)}, fh, indent=2)
    return out / "manifest.csv"


def read_dataset(data_dir, mode: str | None = None) -> Dataset:
    """Load a directory written by :func:`write_dataset`; ``mode`` defaults to the recorded one."""
    data_dir = Path(data_dir)
    if mode is None:
        info = data_dir / "info.json"
        mode = json.loads(info.read_text())["mode"] if info.exists() else "MultiClass"
    names, bands = None, {}
    classes_csv = data_dir / "classes.csv"
    if classes_csv.exists():
        with open(classes_csv, newline="") as fh:
            rows = list(csv.DictReader(fh))
        names = [r["name"] for r in rows]
        bands = {r["name"]: (float(r["band_lo"]), float(r["band_hi"]))
                 for r in rows if r["band_lo"] not in ("", None)}
    ds = ingest_wav_folder(data_dir / "audio", data_dir / "manifest.csv", mode, names)
    ds.bands = bands
    return ds
