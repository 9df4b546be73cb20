import hashlib

import numpy as np
import pytest

from eegmoe.signals import (Corpus, GroupTable, Montage, SUPERSET, SynthParadigmSpec, UnknownChannelError,
                            default_paradigms, design_bandpass, fir_bandpass, generate_corpus, patch)
from eegmoe.signals.filters import frequency_response

FS = 256

# Region and network tables, transcribed independently of the packaged asset.
GOLDEN_GROUPS = {
    "Prefrontal": "FP1, FPZ, FP2, AF9, AF7, AF5, AF3, AF1, AFZ, AF2, AF4, AF6, AF8, AF10",
    "Frontal": "F9, F7, F5, F3, F1, FZ, F2, F4, F6, F8, F10, FT9, FT7, FC5, FC3, FC1, FCZ, FC2, FC4, FC6, FT8, FT10",
    "Central": "FC1, FCZ, FC2, C5, C3, C1, CZ, C2, C4, C6, CP1, CPZ, CP2",
    "Parietal": "TP9, TP7, CP5, CP3, CP1, CPZ, CP2, CP4, CP6, TP8, TP10, P9, P7, P5, P3, P1, PZ, P2, P4, P6, P8, P10",
    "Occipital": "PO9, PO7, PO5, PO3, PO1, POZ, PO2, PO4, PO6, PO8, PO10, O1, OZ, O2, I1, IZ, I2",
    "Left Temporal": "T1, T7, T9, FT7, FT9, TP7, TP9",
    "Right Temporal": "T2, T8, T10, FT8, FT10, TP8, TP10",
    "Midline": "FPZ, AFZ, FZ, FCZ, CZ, CPZ, PZ, POZ, OZ, IZ",
    "DMN": "FP1, FPZ, FP2, AFZ, FZ, FCZ, CZ, CPZ, PZ, POZ, OZ, P5, P7, P6, P8, TP7, TP8, AF1, AF2",
    "ECN": "AF1, AF2, AF3, AF4, AF5, AF6, AF7, AF8, AF9, AF10, F1, F3, F5, F2, F4, F6, FC1, FC3, FC2, FC4, "
           "P1, P3, P2, P4, CP1, CP3, CP2, CP4",
    "SN": "FZ, FCZ, CZ, F1, F2, FC1, FC2, C1, C2, FC3, FC4, C3, C4",
    "DAN": "F1, F3, F2, F4, P1, P3, P5, P2, P4, P6, PO3, PO4",
    "VAN": "F10, F8, FT10, FT8, T8, TP8, C6, CP6, P10, P8, P6, T10, TP10",
    "Visual": "P9, P10, PO9, PO7, PO5, PO3, PO1, POZ, PO2, PO4, PO6, PO8, PO10, O1, OZ, O2, I1, IZ, I2, T10",
    "Somatomotor": "FC5, FC3, FC1, FC2, FC4, FC6, C5, C3, C1, CZ, C2, C4, C6, CP5, CP3, CP1, CP2, CP4, CP6",
    "Language": "F9, F7, F5, FT9, FT7, T7, TP7, C5, CP5, P9, P7, P5, T9, TP9",
}


def test_group_table_matches_golden_tables():
    table = GroupTable.load()
    assert len(table) == 16
    assert table.names == list(GOLDEN_GROUPS)
    for name, members in table.groups:
        assert list(members) == [m.strip() for m in GOLDEN_GROUPS[name].split(",")]
    for _, members in table.groups:
        assert all(m in SUPERSET for m in members)


def test_montage_rejects_unknown_and_duplicates():
    with pytest.raises(UnknownChannelError):
        Montage(("FP1", "XX9"))
    with pytest.raises(ValueError):
        Montage(("FP1", "fp1"))
    assert Montage(("T3",)).channel_names == ("T7",)


def test_membership_allows_overlap():
    table = GroupTable.load()
    mem = table.membership(Montage(("CZ", "O1")))
    assert mem[:, 0].sum() == 5     # Central, Midline, DMN, SN, Somatomotor
    assert mem[:, 1].sum() == 2     # Occipital, Visual


# --- filter -----------------------------------------------------------------

def _tone(freq, seconds=30, amp=1.0):
    t = np.arange(seconds * FS) / FS
    return amp * np.sin(2 * np.pi * freq * t)


def _steady(x, taps):
    m = len(taps)
    return x[m:-m]


def test_fir_dc_rejection():
    taps = design_bandpass(1, 100, FS)
    x = np.ones(40 * FS)
    y = _steady(fir_bandpass(x, 1, 100, FS), taps)
    assert np.max(np.abs(y)) < 1e-3


def _gain(freq):
    taps = design_bandpass(1, 100, FS)
    x = _tone(freq)
    y = _steady(fir_bandpass(x, 1, 100, FS), taps)
    xs = _steady(x, taps)
    return np.sqrt((y ** 2).mean() / (xs ** 2).mean())


def test_fir_passband_tone_preserved():
    assert abs(_gain(10.0) - 1.0) < 0.05


def test_fir_stopband_tone_attenuated():
    assert 20 * np.log10(_gain(120.0)) <= -40


def test_fir_stopband_edges_40db():
    taps = design_bandpass(1, 100, FS)
    resp = frequency_response(taps, [0.5, 120.0], FS)
    assert np.all(20 * np.log10(resp) <= -40)
    assert len(taps) % 2 == 1
    np.testing.assert_allclose(taps, taps[::-1])


def test_fir_linear_time_invariant():
    a, b = _tone(7.0, 8), _tone(33.0, 8, 0.3)
    np.testing.assert_allclose(fir_bandpass(a + b, 1, 100), fir_bandpass(a, 1, 100) + fir_bandpass(b, 1, 100),
                               atol=1e-9)


@pytest.mark.parametrize("low,high", [(0, 10), (10, 5), (1, 128), (-1, 10)])
def test_fir_invalid_edges(low, high):
    with pytest.raises(ValueError):
        fir_bandpass(np.zeros(512), low, high, FS)


# --- patching ---------------------------------------------------------------

def test_patch_drops_remainder():
    out = patch(np.zeros((2, int(10.5 * FS))), FS)
    assert out.shape == (1, 10, 2, 256)


def test_patch_exact_second():
    assert patch(np.zeros((3, FS)), FS).shape[1] == 1


def test_patch_shape_bookkeeping():
    assert patch(np.zeros((19, 30 * FS)), FS).shape == (1, 30, 19, 256)


def test_patch_too_short():
    with pytest.raises(ValueError):
        patch(np.zeros((2, FS - 1)), FS)


def test_patch_is_bijection_on_prefix():
    x = np.random.default_rng(0).normal(size=(3, 5 * FS + 17))
    p = patch(x, FS)[0]                                 # (T, C, P)
    rebuilt = p.transpose(1, 0, 2).reshape(3, -1)
    np.testing.assert_array_equal(rebuilt, x[:, : 5 * FS])


# --- corpus -----------------------------------------------------------------

def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_corpus_bookkeeping_and_balance(tmp_path):
    specs = default_paradigms()
    root = generate_corpus(specs, 64, seed=3, out_dir=tmp_path / "c", n_patches=2)
    corpus = Corpus(root)
    total = sum(len(corpus.split(s)) for s in ("train", "valid", "test"))
    assert total == 192
    for p in range(3):
        labels = np.concatenate([corpus.split(s).label[corpus.split(s).paradigm_id == p]
                                 for s in ("train", "valid", "test")])
        counts = np.bincount(labels, minlength=2)
        assert abs(counts[0] - counts[1]) <= 1
    batch = corpus.split("train")
    assert batch.signal.shape[1:] == (2, 12, 256)


def test_corpus_deterministic(tmp_path):
    specs = default_paradigms()[:2]
    a = generate_corpus(specs, 6, seed=11, out_dir=tmp_path / "a", n_patches=1)
    b = generate_corpus(specs, 6, seed=11, out_dir=tmp_path / "b", n_patches=1)
    for name in ("train.bin", "valid.bin", "test.bin", "meta.json"):
        assert _digest(a / name) == _digest(b / name)


def test_corpus_errors(tmp_path):
    specs = default_paradigms()
    with pytest.raises(ValueError):
        generate_corpus(specs[:1], 4, 0, tmp_path / "x")
    with pytest.raises(ValueError):
        generate_corpus(specs, 0, 0, tmp_path / "x")
    dup = [specs[0], SynthParadigmSpec(**{**specs[1].__dict__, "paradigm_id": 0})]
    with pytest.raises(ValueError, match="duplicate"):
        generate_corpus(dup, 4, 0, tmp_path / "x")


def _band_power_db(signals, band):
    x = signals.reshape(-1, signals.shape[-1])
    psd = (np.abs(np.fft.rfft(x * np.hanning(x.shape[-1]), axis=-1)) ** 2).mean(0)
    f = np.fft.rfftfreq(x.shape[-1], 1 / FS)
    sel = (f >= band[0]) & (f < band[1])
    return 10 * np.log10(psd[sel].mean())


def test_alpha_only_paradigm_has_alpha_peak(tmp_path):
    alpha = SynthParadigmSpec("alpha_only", 0, {"alpha": 1.0}, carrier_band="alpha")
    other = default_paradigms()[1]
    root = generate_corpus([alpha, other], 8, seed=5, out_dir=tmp_path / "c", n_patches=2)
    corpus = Corpus(root)
    sig = np.concatenate([corpus.split(s).signal[corpus.split(s).paradigm_id == 0] for s in ("train", "valid", "test")])
    alpha_db = _band_power_db(sig, (8, 13))
    for band in [(1, 4), (4, 8), (13, 30), (30, 45)]:
        assert alpha_db - _band_power_db(sig, band) >= 6
