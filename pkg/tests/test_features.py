import numpy as np
import pytest

from swayid import features
from swayid.errors import ConfigError, InputFormatError
from swayid.features import (
    InputStats,
    N_WINDOWS,
    TRACE_LEN,
    WINDOW,
    compute_input_stats,
    decode,
    encode,
    input_normalize,
)


def test_shape_and_channels():
    image = encode(np.zeros(TRACE_LEN))
    assert image.shape == (N_WINDOWS, WINDOW, 2)


def test_zero_trace_all_zero():
    image = encode(np.zeros(TRACE_LEN))
    assert np.all(image == 0.0)


def test_constant_trace_concentrates_at_dc():
    c = -0.37
    image = encode(np.full(TRACE_LEN, c))
    modulus = image[:, :, 0]
    assert np.allclose(modulus[:, 0], WINDOW * abs(c), rtol=1e-12)
    assert np.all(modulus[:, 1:] < 1e-9)


def test_single_tone_hits_conjugate_bins():
    n = np.arange(TRACE_LEN)
    trace = np.cos(2 * np.pi * 7 * (n % WINDOW) / WINDOW)
    image = encode(trace)
    modulus = image[:, :, 0]
    assert np.allclose(modulus[:, 7], 55.0, atol=1e-9)
    assert np.allclose(modulus[:, WINDOW - 7], 55.0, atol=1e-9)
    others = np.delete(modulus, [7, WINDOW - 7], axis=1)
    assert np.all(others < 1e-8)


def test_round_trip_random():
    rng = np.random.default_rng(3)
    trace = rng.normal(scale=0.05, size=TRACE_LEN)
    rec = decode(encode(trace))
    assert np.sqrt(np.mean((rec - trace) ** 2)) < 1e-9


def test_zero_image_decodes_to_zero():
    assert np.all(decode(np.zeros((N_WINDOWS, WINDOW, 2))) == 0.0)


def test_parseval_per_window():
    rng = np.random.default_rng(11)
    trace = rng.normal(size=TRACE_LEN)
    image = encode(trace)
    windows = trace.reshape(N_WINDOWS, WINDOW)
    for w in range(0, N_WINDOWS, 13):
        time_power = np.sum(windows[w] ** 2)
        freq_power = np.sum(image[w, :, 0] ** 2) / WINDOW
        assert freq_power == pytest.approx(time_power, rel=1e-9)


def test_modulus_scales_linearly_phase_fixed():
    rng = np.random.default_rng(4)
    trace = rng.normal(size=TRACE_LEN)
    a = 3.5
    base = encode(trace)
    scaled = encode(a * trace)
    assert np.allclose(scaled[:, :, 0], a * base[:, :, 0], rtol=1e-9)
    sig = base[:, :, 0] > 1e-9
    assert np.allclose(scaled[:, :, 1][sig], base[:, :, 1][sig], atol=1e-9)


def test_phase_range_and_zero_bins():
    rng = np.random.default_rng(9)
    image = encode(rng.normal(size=TRACE_LEN))
    phase = image[:, :, 1]
    assert np.all(phase > -np.pi - 1e-12)
    assert np.all(phase <= np.pi + 1e-12)
    zero_image = encode(np.zeros(TRACE_LEN))
    assert np.all(zero_image[:, :, 1] == 0.0)


def test_window_shift_permutes_rows():
    rng = np.random.default_rng(6)
    trace = rng.normal(size=TRACE_LEN)
    shifted = np.roll(trace, WINDOW)
    a = encode(trace)
    b = encode(shifted)
    assert np.allclose(b, np.roll(a, 1, axis=0), atol=1e-12)


def test_length_validation():
    with pytest.raises(InputFormatError):
        encode(np.zeros(1000))
    with pytest.raises(InputFormatError):
        encode(np.zeros(TRACE_LEN + 1), pad=True)
    padded = encode(np.ones(1000), pad=True)
    assert padded.shape == (N_WINDOWS, WINDOW, 2)
    with pytest.raises(InputFormatError):
        decode(np.zeros((10, 10, 2)))


def test_input_stats_normalize():
    rng = np.random.default_rng(8)
    images = np.stack([encode(rng.normal(size=TRACE_LEN)) for _ in range(6)])
    stats = compute_input_stats(images)
    normalized = np.stack([input_normalize(im, stats) for im in images])
    for c in range(2):
        assert abs(normalized[..., c].mean()) < 1e-9
        assert normalized[..., c].std() == pytest.approx(1.0, abs=1e-9)


def test_input_stats_identity():
    rng = np.random.default_rng(10)
    image = encode(rng.normal(size=TRACE_LEN))
    out = input_normalize(image, InputStats.identity())
    assert np.allclose(out, image, atol=0, rtol=0)


def test_input_stats_log_modulus_recorded():
    rng = np.random.default_rng(12)
    images = np.stack([encode(rng.normal(size=TRACE_LEN)) for _ in range(3)])
    stats = compute_input_stats(images, log_modulus=True)
    assert stats.log_modulus
    normalized = input_normalize(images[0], stats)
    manual = (np.log1p(images[0][..., 0]) - stats.mean[0]) / stats.std[0]
    assert np.allclose(normalized[..., 0], manual)
    assert stats.to_dict() == InputStats.from_dict(stats.to_dict()).to_dict()


def test_degenerate_stats_rejected():
    images = np.zeros((2, N_WINDOWS, WINDOW, 2))
    with pytest.raises(ConfigError):
        compute_input_stats(images)
    with pytest.raises(ConfigError):
        input_normalize(np.zeros((N_WINDOWS, WINDOW, 2)),
                        InputStats((0.0, 0.0), (1.0, 0.0), False))


def test_save_image_csv(tmp_path):
    rng = np.random.default_rng(14)
    image = encode(rng.normal(size=TRACE_LEN))
    paths = features.save_image_csv(tmp_path / "img", image)
    assert len(paths) == 2
    mod = np.genfromtxt(paths[0], delimiter=",")
    ph = np.genfromtxt(paths[1], delimiter=",")
    assert mod.shape == (N_WINDOWS, WINDOW)
    assert np.allclose(mod, image[:, :, 0], rtol=1e-8, atol=1e-9)
    assert np.allclose(ph, image[:, :, 1], rtol=1e-8, atol=1e-9)
