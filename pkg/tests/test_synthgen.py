import numpy as np
import pytest
from scipy.io import wavfile

from l2i import synthgen as sg
from l2i.dsp import AudioSignal, band_energy_fraction
from l2i.errors import ConfigError, DegenerateInputError, FormatError, IoError


@pytest.fixture(scope="module")
def toy4_train():
    return sg.generate_dataset(sg.toy4(n_train=200, n_test=4))


def test_toy4_shape_and_labels(toy4_train):
    ds = toy4_train
    assert len(ds.train) == 200 and ds.n_classes == 4 and ds.sample_rate == 16000
    for s in ds.train:
        assert s.label.sum() == 1 and set(np.unique(s.label)) <= {0.0, 1.0}
        assert len(s.signal) == 24000
    assert len({int(s.label.argmax()) for s in ds.train}) == 4


def test_toy4_band_purity(toy4_train):
    ds = toy4_train
    purity = [band_energy_fraction(s.signal, ds.bands[ds.class_names[int(s.label.argmax())]])
              for s in ds.train]
    assert min(purity) >= 0.95


def test_deterministic():
    spec = sg.toy4(n_train=5, n_test=2)
    a, b = sg.generate_dataset(spec), sg.generate_dataset(spec)
    for sa, sb in zip(a.train + a.test, b.train + b.test):
        assert sa.signal.samples.tobytes() == sb.signal.samples.tobytes() and sa.id == sb.id


def test_seed_changes_data():
    a = sg.generate_dataset(sg.toy4(n_train=2, n_test=1, seed=1))
    b = sg.generate_dataset(sg.toy4(n_train=2, n_test=1, seed=2))
    assert not np.array_equal(a.train[0].signal.samples, b.train[0].signal.samples)


def test_multilabel_event_counts():
    ds = sg.generate_dataset(sg.toy_urban(n_train=60, n_test=20, n_background_only=5))
    counts = [int(s.label.sum()) for s in ds.train + ds.test]
    assert set(counts) <= {0, 1, 2}
    event_clips = [c for s, c in zip(ds.train + ds.test, counts) if "-bg-" not in s.id]
    assert set(event_clips) == {1, 2}
    assert sum(1 for s in ds.train if "-bg-" in s.id) == 5


def test_multilabel_background_snr():
    spec = sg.toy_urban(n_train=1, n_test=1, n_background_only=0)
    noisy = sg._make_sample(spec, "train", 0)
    clean = sg._make_sample(sg.toy_urban(background_snr_db=None), "train", 0)
    noise = noisy.signal.samples - clean.signal.samples
    snr = 10 * np.log10(np.mean(clean.signal.samples ** 2) / np.mean(noise ** 2))
    assert snr == pytest.approx(5.0, abs=1e-9)


@pytest.mark.parametrize("bands", [((100, 500), (400, 900)), ((100, 500), (100, 500))])
def test_overlapping_bands(bands):
    classes = tuple(sg.ClassSpec(f"c{i}", "Tone", b) for i, b in enumerate(bands))
    with pytest.raises(ConfigError):
        sg.generate_dataset(sg.DatasetSpec(classes=classes))


def test_invalid_counts():
    with pytest.raises(ConfigError):
        sg.generate_dataset(sg.toy4(n_train=0))


@pytest.mark.parametrize("kind", sg.KINDS)
def test_each_kind_stays_in_band(kind):
    cls = sg.ClassSpec("x", kind, (1000.0, 2000.0), fundamental_range=(1000.0, 1200.0))
    x = sg.synth_event(cls, 16000, 16000, sg.SeededRng(0))
    assert band_energy_fraction(AudioSignal(x, 16000), cls.band) >= 0.95


# -- corruption ------------------------------------------------------------------

def _sample(x, sid="s"):
    return sg.Sample(AudioSignal(np.asarray(x, dtype=np.float64), 16000), np.array([0.0, 1.0]), sid)


def test_noise_zero_db():
    s = _sample(np.sin(np.arange(8000) * 0.1))
    out = sg.corrupt_with_noise(s, 0.0, seed=3)
    noise = out.signal.samples - s.signal.samples
    snr = 10 * np.log10(np.mean(s.signal.samples ** 2) / np.mean(noise ** 2))
    assert abs(snr) < 0.01
    assert np.array_equal(out.label, s.label) and s.id in out.id


def test_noise_sixty_db():
    s = _sample(np.sin(np.arange(8000) * 0.1))
    out = sg.corrupt_with_noise(s, 60.0, seed=3)
    rel = np.linalg.norm(out.signal.samples - s.signal.samples) / np.linalg.norm(s.signal.samples)
    assert rel < 0.002


def test_noise_same_seed_same_noise():
    s = _sample(np.ones(100))
    a, b = sg.corrupt_with_noise(s, 5.0, 7), sg.corrupt_with_noise(s, 5.0, 7)
    assert np.array_equal(a.signal.samples, b.signal.samples)
    assert not np.array_equal(a.signal.samples, sg.corrupt_with_noise(s, 5.0, 8).signal.samples)


def test_noise_zero_power():
    with pytest.raises(DegenerateInputError):
        sg.corrupt_with_noise(_sample(np.zeros(10)), 0.0, 1)


def test_mix_rules():
    a = _sample(np.random.default_rng(0).normal(size=16000), "a")
    b = _sample(np.random.default_rng(1).normal(size=8000), "b")
    b.label = np.array([1.0, 0.0])
    assert np.array_equal(sg.corrupt_with_mix(a, b, 0.0).signal.samples, a.signal.samples)
    assert np.array_equal(sg.corrupt_with_mix(a, a, 1.0).signal.samples, 2 * a.signal.samples)
    mixed = sg.corrupt_with_mix(b, a)
    assert len(mixed.signal) == 16000
    assert np.array_equal(mixed.label, b.label) and mixed.id == "b+a"


def test_mix_rate_mismatch():
    a = _sample(np.ones(10))
    b = sg.Sample(AudioSignal(np.ones(10), 8000), a.label, "b")
    with pytest.raises(ConfigError):
        sg.corrupt_with_mix(a, b)


# -- ingestion -------------------------------------------------------------------

def _folder(tmp_path, rows, rates=None):
    audio = tmp_path / "audio"
    audio.mkdir()
    for i, (fname, _, _) in enumerate(rows):
        rate = (rates or {}).get(fname, 16000)
        wavfile.write(audio / fname, rate, np.full(200, 0.1 * (i + 1), dtype=np.float32))
    csv_path = tmp_path / "labels.csv"
    csv_path.write_text("filename,split,label\n" + "".join(f"{f},{s},{l}\n" for f, s, l in rows))
    return audio, csv_path


def test_ingest_two_classes(tmp_path):
    rows = [("a.wav", "train", "dog"), ("b.wav", "train", "cat"), ("c.wav", "test", "dog"),
            ("d.wav", "test", "cat")]
    audio, csv_path = _folder(tmp_path, rows)
    ds = sg.ingest_wav_folder(audio, csv_path, "MultiClass")
    assert ds.class_names == ["dog", "cat"] and ds.n_classes == 2
    assert [list(s.label) for s in ds.train] == [[1, 0], [0, 1]]
    assert [s.id for s in ds.test] == ["c", "d"]


def test_ingest_missing_file(tmp_path):
    audio, csv_path = _folder(tmp_path, [("a.wav", "train", "dog")])
    with open(csv_path, "a") as fh:
        fh.write("ghost.wav,train,dog\n")
    with pytest.raises(IoError, match="ghost.wav"):
        sg.ingest_wav_folder(audio, csv_path)


def test_ingest_multilabel(tmp_path):
    audio, csv_path = _folder(tmp_path, [("a.wav", "train", "dog;music"), ("b.wav", "test", "music")])
    ds = sg.ingest_wav_folder(audio, csv_path, "MultiLabel")
    assert list(ds.train[0].label) == [1.0, 1.0] and list(ds.test[0].label) == [0.0, 1.0]


def test_ingest_bad_split(tmp_path):
    audio, csv_path = _folder(tmp_path, [("a.wav", "validation", "dog")])
    with pytest.raises(FormatError):
        sg.ingest_wav_folder(audio, csv_path)


def test_ingest_mixed_rates(tmp_path):
    audio, csv_path = _folder(tmp_path, [("a.wav", "train", "x"), ("b.wav", "train", "y")],
                              rates={"b.wav": 8000})
    with pytest.raises(ConfigError):
        sg.ingest_wav_folder(audio, csv_path)


def test_write_read_roundtrip(tmp_path):
    ds = sg.generate_dataset(sg.toy_urban(n_train=4, n_test=2, n_background_only=1))
    sg.write_dataset(ds, tmp_path / "d")
    back = sg.read_dataset(tmp_path / "d")
    assert back.mode == "MultiLabel" and back.class_names == ds.class_names
    assert back.bands == ds.bands
    for a, b in zip(ds.train + ds.test, back.train + back.test):
        assert np.array_equal(a.label, b.label) and a.id == b.id
        assert np.max(np.abs(a.signal.samples - b.signal.samples)) < 1e-6
