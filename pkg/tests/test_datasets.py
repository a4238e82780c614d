import numpy as np
import pytest

from milscene import datasets as ds
from milscene import featex
from milscene.datasets import ClipRecord, MetaError, SynthConfig
from milscene.milhead import SceneTaxonomy


def write(path, text):
    path.write_text(text)
    return path


# ----------------------------------------------------------------------------
# metadata


def test_parse_single_row(tmp_path):
    meta = write(tmp_path / "meta.tsv", "filename\tscene_label\naudio/a.wav\tpark\n")
    [rec] = ds.parse_meta(meta)
    assert rec.path == tmp_path / "audio" / "a.wav"
    assert rec.scene == SceneTaxonomy().index("park") and rec.device is None
    assert rec.clip_id == "a"


def test_unknown_scene_names_row_and_value(tmp_path):
    meta = write(tmp_path / "meta.tsv", "filename\tscene_label\na.wav\tpark\nb.wav\tspaceport\n")
    with pytest.raises(MetaError, match=r":3: unknown scene 'spaceport'"):
        ds.parse_meta(meta)


def test_device_column(tmp_path):
    meta = write(tmp_path / "meta.tsv",
                 "filename\tscene_label\tsource_label\na.wav\tbus\ta\nb.wav\ttram\ts3\n\n")
    recs = ds.parse_meta(meta)
    assert [r.device for r in recs] == ["a", "s3"]
    assert [r.scene for r in recs] == [8, 9]


def test_bad_header_rejected(tmp_path):
    meta = write(tmp_path / "meta.tsv", "file\tlabel\na.wav\tbus\n")
    with pytest.raises(MetaError, match="header"):
        ds.parse_meta(meta)


def test_audio_root_overrides_meta_directory(tmp_path):
    (tmp_path / "evaluation_setup").mkdir()
    meta = write(tmp_path / "evaluation_setup" / "fold1_train.csv", "filename\tscene_label\naudio/a.wav\tpark\n")
    assert ds.parse_meta(meta, audio_root=tmp_path)[0].path == tmp_path / "audio" / "a.wav"


def test_missing_audio_is_not_checked_at_parse_time(tmp_path):
    meta = write(tmp_path / "meta.tsv", "filename\tscene_label\nnowhere.wav\tmetro\n")
    assert not ds.parse_meta(meta)[0].path.exists()


def test_meta_round_trip(tmp_path):
    tax = SceneTaxonomy.first(3)
    recs = [ClipRecord(tmp_path / "audio" / "x.wav", 2, "b"), ClipRecord(tmp_path / "y.wav", 0, None)]
    ds.write_meta(tmp_path / "m.tsv", recs, tax)
    back = ds.parse_meta(tmp_path / "m.tsv", tax)
    assert [(r.path, r.scene, r.device) for r in back] == [(recs[0].path, 2, "b"), (recs[1].path, 0, None)]


# ----------------------------------------------------------------------------
# synthetic corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    cfg = SynthConfig(n_classes=4, clips_per_class=10, seed=7)
    out = tmp_path_factory.mktemp("synth")
    return cfg, ds.synth_generate(cfg, out)


def test_synth_counts_and_balance(corpus):
    cfg, meta = corpus
    recs = ds.parse_meta(meta, SceneTaxonomy.first(4))
    assert len(recs) == 40
    assert len(list((meta.parent / "audio").glob("*.wav"))) == 40
    assert np.bincount([r.scene for r in recs]).tolist() == [10, 10, 10, 10]


def test_synth_is_bitwise_reproducible(corpus, tmp_path):
    cfg, meta = corpus
    again = ds.synth_generate(cfg, tmp_path)
    for a, b in zip(sorted((meta.parent / "audio").glob("*.wav")), sorted((again.parent / "audio").glob("*.wav"))):
        assert a.name == b.name and a.read_bytes() == b.read_bytes()


def test_every_clip_peaks_at_a_class_tone(corpus):
    cfg, meta = corpus
    for rec in ds.parse_meta(meta, SceneTaxonomy.first(4)):
        x = featex.decode_wav(rec.path).samples[0]
        spec = np.abs(np.fft.rfft(x))
        freqs = np.fft.rfftfreq(len(x), 1 / cfg.sample_rate)
        peak = freqs[np.argmax(spec)]
        assert min(abs(peak - f) for f in cfg.event_tones[rec.scene]) < 5.0, rec.path.name


def test_clip_events_are_class_tones():
    cfg = SynthConfig(n_classes=4, seed=3)
    for cls in range(4):
        x, events = ds.synth_clip(cfg, cls, 0)
        assert len(x) == 32000 and np.abs(x).max() <= 1.0
        assert 1 <= len(events) <= 3
        assert all(f in cfg.event_tones[cls] for _, f in events)
        assert all(0 <= onset <= 2.0 - cfg.burst_seconds for onset, _ in events)


def test_ambiguity_pairs_share_background_family():
    cfg = SynthConfig(n_classes=4)
    assert cfg.ambiguity_pairs == [(0, 1), (2, 3)]
    assert cfg.family(0) == cfg.family(1) != cfg.family(2) == cfg.family(3)
    odd = SynthConfig(n_classes=3)
    assert len({odd.family(c) for c in range(3)}) == 2


def _mean_band_power(family, seeds):
    spectra = []
    for s in seeds:
        x = ds.background(family, 32000, 16000, np.random.default_rng(s), 0.05)
        spectra.append(np.abs(np.fft.rfft(x)) ** 2)
    bands = np.array_split(np.mean(spectra, axis=0), 32)
    return np.log(np.array([b.mean() for b in bands]))


def test_background_statistics_depend_only_on_family():
    same_a = _mean_band_power(0, range(0, 40))
    same_b = _mean_band_power(0, range(100, 140))
    other = _mean_band_power(1, range(0, 40))
    assert np.abs(same_a - same_b).max() < 0.35
    assert np.abs(same_a - other).max() > 1.0


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_classes=1)
    with pytest.raises(ValueError):
        SynthConfig(clip_seconds=0.25)
    with pytest.raises(ValueError):
        SynthConfig(n_classes=3, event_tones=[[100.0]])


def test_taxonomy_size_must_match(tmp_path):
    with pytest.raises(ValueError):
        ds.synth_generate(SynthConfig(n_classes=3), tmp_path, SceneTaxonomy.first(4))


# ----------------------------------------------------------------------------
# feature loading


def test_load_examples_uses_cache(corpus, tmp_path, monkeypatch):
    _, meta = corpus
    recs = ds.parse_meta(meta, SceneTaxonomy.first(4))[:3]
    monkeypatch.setenv("MILSCENE_THREADS", "2")
    first = ds.load_examples(recs, tmp_path / "cache")
    assert len(list((tmp_path / "cache").glob("*.lmel"))) == 3
    assert all(e.features.shape == (256, 63) and e.features.dtype == np.float32 for e in first)
    second = ds.load_examples(recs, tmp_path / "cache", threads=1)
    for a, b in zip(first, second):
        assert np.array_equal(a.features, b.features) and a.label == b.label and a.clip_id == b.clip_id


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv("MILSCENE_THREADS", "3")
    assert ds._threads() == 3
    monkeypatch.delenv("MILSCENE_THREADS")
    assert ds._threads() >= 1
