from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import octahedron_array
from core.array import auto_trunc, band_intensity_doa
from core.config import EncodingConfig, RoomSamplingConfig
from core.room import (
    calibrate_absorption,
    check_placement,
    default_max_order,
    direct_onset,
    enumerate_image_sources,
    estimate_t60,
    gate_start,
    mic_spectra,
    rir_length,
    rt60_to_absorption,
    sample_placement,
    sample_room,
    schroeder_decay,
    simulate_mic_rirs,
    simulate_sh_rir,
)
from core.types import AbsorptionModel, ArraySpec, FoaConvention, Placement, RoomSpec, great_circle

FS = 24000
ANECHOIC = RoomSamplingConfig(max_order=0)


def shoebox() -> RoomSpec:
    return RoomSpec(dims=(8.0, 6.0, 4.0), rt60=0.3)


def placement_at(array_pos, offset) -> Placement:
    array_pos = np.asarray(array_pos, dtype=float)
    return Placement(source_pos=array_pos + np.asarray(offset, dtype=float), array_pos=array_pos)


@pytest.mark.parametrize(
    ("dims", "rt60", "expected"),
    [((10.0, 10.0, 10.0), 0.5, 0.53667), ((3.0, 3.0, 3.0), 0.1, 0.805)],
)
def test_sabine_absorption(dims, rt60, expected) -> None:
    alpha = rt60_to_absorption(RoomSpec(dims=dims, rt60=rt60), AbsorptionModel.SABINE)
    assert alpha == pytest.approx(expected, abs=1e-5)


@pytest.mark.parametrize("model", list(AbsorptionModel))
def test_absorption_decreases_with_rt60(model: AbsorptionModel) -> None:
    values = [rt60_to_absorption(RoomSpec(dims=(12.0, 10.0, 5.0), rt60=t), model) for t in (0.5, 1.0, 2.0, 4.0)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert all(0 < a < 1 for a in values)


def test_unrealizable_rt60_raises() -> None:
    with pytest.raises(ValueError, match="cannot reach"):
        rt60_to_absorption(RoomSpec(dims=(3.0, 3.0, 3.0), rt60=0.05), AbsorptionModel.SABINE)


def test_default_max_order() -> None:
    assert default_max_order(0.5) == 20
    assert default_max_order(0.01) == 40
    assert default_max_order(1.0) == 0


def test_first_order_image_count() -> None:
    placement = placement_at((3.0, 2.5, 1.5), (1.5, 0.5, 0.2))
    direct_only = enumerate_image_sources(shoebox(), placement, max_order=0, min_gain=0.0)
    first = enumerate_image_sources(shoebox(), placement, max_order=1, min_gain=0.0)
    assert len(direct_only) == 1
    assert len(first) == 7
    assert first[0].order == 0
    assert first[0].distance == pytest.approx(placement.distance)
    assert sorted(img.order for img in first) == [0, 1, 1, 1, 1, 1, 1]
    distances = [img.distance for img in first]
    assert distances == sorted(distances)


def test_direct_delay_in_samples() -> None:
    placement = placement_at((2.0, 3.0, 2.0), (3.43, 0.0, 0.0))
    assert direct_onset(placement, 343.0, FS) == pytest.approx(240.0)
    direct = enumerate_image_sources(shoebox(), placement, max_order=0)[0]
    assert direct.delay == pytest.approx(0.01)


def test_placement_checks() -> None:
    room = shoebox()
    with pytest.raises(ValueError, match="inside"):
        check_placement(room, placement_at((7.5, 3.0, 2.0), (1.0, 0.0, 0.0)))
    with pytest.raises(ValueError, match="distance"):
        check_placement(room, placement_at((4.0, 3.0, 2.0), (0.1, 0.0, 0.0)))


def test_anechoic_onsets_match_geometry() -> None:
    array = octahedron_array(radius=0.005)
    room = shoebox()
    placement = placement_at((3.0, 2.5, 1.8), (1.7, 0.9, 0.4))
    rirs = simulate_mic_rirs(room, placement, array, rir_length(room.rt60, FS), ANECHOIC)
    expected = direct_onset(placement, room.speed_of_sound, FS)
    for mic in rirs:
        assert abs(int(np.argmax(np.abs(mic))) - expected) <= 1.0
    start = gate_start(placement, array, room.speed_of_sound, ANECHOIC.onset_guard)
    assert np.all(rirs[:, :start] == 0.0)


def test_simulation_is_deterministic(em32: ArraySpec) -> None:
    room = shoebox()
    placement = placement_at((3.0, 2.5, 1.8), (1.2, -0.8, 0.3))
    length = rir_length(room.rt60, FS)
    first = simulate_sh_rir(room, placement, em32, EncodingConfig(), length)
    second = simulate_sh_rir(room, placement, em32, EncodingConfig(), length)
    assert first.channels.shape == (4, length)
    assert np.array_equal(first.channels, second.channels)


def test_more_reflections_add_energy(octahedron: ArraySpec) -> None:
    room = shoebox()
    placement = placement_at((3.0, 2.5, 1.8), (1.2, 0.8, 0.3))
    length = rir_length(room.rt60, FS)
    energies = []
    for order in (1, 3):
        ir = simulate_sh_rir(room, placement, octahedron, EncodingConfig(), length, RoomSamplingConfig(max_order=order))
        energies.append(float(np.sum(ir.channels[0] ** 2)))
    assert energies[1] > energies[0]


def test_mirrored_source_swaps_mirrored_mics(octahedron: ArraySpec) -> None:
    room = shoebox()
    center = (4.0, 2.5, 1.8)
    length = rir_length(room.rt60, FS)
    cfg = RoomSamplingConfig(max_order=3)
    right = simulate_mic_rirs(room, placement_at(center, (1.4, 0.6, 0.3)), octahedron, length, cfg)
    left = simulate_mic_rirs(room, placement_at(center, (-1.4, 0.6, 0.3)), octahedron, length, cfg)
    swapped = right[[1, 0, 2, 3, 4, 5]]
    np.testing.assert_allclose(swapped, left, atol=1e-8 * np.abs(right).max())


def test_anechoic_w_channel_is_a_near_step(em32: ArraySpec) -> None:
    room = shoebox()
    placement = placement_at((3.0, 2.5, 1.8), (1.5, 1.0, -0.4))
    ir = simulate_sh_rir(room, placement, em32, EncodingConfig(), rir_length(room.rt60, FS), ANECHOIC)
    start = gate_start(placement, em32, room.speed_of_sound, ANECHOIC.onset_guard)
    decay = schroeder_decay(ir.channels[0, start:])
    after = int(math.ceil(direct_onset(placement, room.speed_of_sound, FS))) + int(0.005 * FS) - start
    assert decay[after] < -60.0


def test_anechoic_direct_sound_doa(em32: ArraySpec) -> None:
    room = shoebox()
    placement = placement_at((3.0, 2.5, 1.8), (-1.1, 1.3, 0.7))
    ir = simulate_sh_rir(room, placement, em32, EncodingConfig(), rir_length(room.rt60, FS), ANECHOIC)
    doa = band_intensity_doa(ir.channels, FS)
    assert math.degrees(great_circle(doa, placement.source_direction())) < 2.0
    assert ir.metadata is not None
    assert ir.metadata.distance == pytest.approx(placement.distance)


def test_t60_of_simulated_room(em32: ArraySpec) -> None:
    room = shoebox()
    placement = placement_at((3.0, 2.5, 1.8), (1.5, 1.0, -0.4))
    ir = simulate_sh_rir(room, placement, em32, EncodingConfig(), rir_length(room.rt60, FS))
    onset = int(direct_onset(placement, room.speed_of_sound, FS))
    assert estimate_t60(ir.channels[0], FS, start=onset) == pytest.approx(0.3, rel=0.1)


def test_calibrated_absorption_tracks_rt60() -> None:
    placement = placement_at((3.0, 2.5, 1.8), (1.5, 1.0, -0.4))
    alphas = []
    for rt60 in (0.25, 0.4, 0.8):
        room = RoomSpec(dims=(8.0, 6.0, 4.0), rt60=rt60)
        alphas.append(calibrate_absorption(room, placement, FS, rir_length(rt60, FS)))
    assert all(a > b for a, b in zip(alphas, alphas[1:]))
    assert all(0 < a < 1 for a in alphas)


def test_calibration_can_be_switched_off(octahedron: ArraySpec) -> None:
    room = shoebox()
    placement = placement_at((3.0, 2.5, 1.8), (1.5, 1.0, -0.4))
    length = rir_length(room.rt60, FS)
    calibrated = mic_spectra(room, placement, octahedron, 16384, length)
    closed_form = mic_spectra(room, placement, octahedron, 16384, length, RoomSamplingConfig(calibrate_rt60=False))
    assert not np.allclose(calibrated, closed_form)


def test_ungated_response_is_silent_before_the_direct_sound(octahedron: ArraySpec) -> None:
    room = shoebox()
    placement = placement_at((2.0, 2.5, 1.8), (3.0, 1.5, 0.5))
    nfft = 16384
    spectra = mic_spectra(room, placement, octahedron, nfft, rir_length(room.rt60, FS))
    rirs = np.fft.irfft(spectra, n=nfft, axis=1)
    onset = int(direct_onset(placement, room.speed_of_sound, FS))
    before = float(np.sum(rirs[:, : onset - 128] ** 2))
    direct = float(np.sum(rirs[:, onset - 8 : onset + 9] ** 2))
    assert 10 * np.log10(before / direct) < -50.0


def test_rounded_late_reflections_stay_close_to_exact_delays(octahedron: ArraySpec) -> None:
    room = shoebox()
    placement = placement_at((3.0, 2.5, 1.8), (1.2, 0.8, 0.3))
    length = rir_length(room.rt60, FS)
    nfft = 16384
    hybrid = mic_spectra(room, placement, octahedron, nfft, length, RoomSamplingConfig(max_order=6))
    exact = mic_spectra(room, placement, octahedron, nfft, length, RoomSamplingConfig(max_order=6, exact_order=6))
    error = np.abs(hybrid - exact) ** 2
    power = np.abs(exact) ** 2
    assert 10 * np.log10(error.sum() / power.sum()) < -20.0
    low = np.fft.rfftfreq(nfft, d=1.0 / FS) < 2000.0
    assert 10 * np.log10(error[:, low].sum() / power[:, low].sum()) < -30.0


def test_modal_truncation_order_is_honoured(octahedron: ArraySpec) -> None:
    room = shoebox()
    placement = placement_at((3.0, 2.5, 1.8), (1.2, 0.8, 0.3))
    length = rir_length(room.rt60, FS)
    cfg = RoomSamplingConfig(max_order=2)
    auto = auto_trunc(math.pi * FS / room.speed_of_sound * octahedron.radius)
    default = simulate_sh_rir(room, placement, octahedron, EncodingConfig(), length, cfg)
    same = simulate_sh_rir(room, placement, octahedron, EncodingConfig(trunc_order=auto), length, cfg)
    short = simulate_sh_rir(room, placement, octahedron, EncodingConfig(trunc_order=1), length, cfg)
    np.testing.assert_array_equal(default.channels, same.channels)
    assert not np.allclose(default.channels, short.channels)


def test_truncation_order_below_one_rejected(octahedron: ArraySpec) -> None:
    room = shoebox()
    placement = placement_at((3.0, 2.5, 1.8), (1.2, 0.8, 0.3))
    with pytest.raises(ValueError, match="trunc"):
        mic_spectra(room, placement, octahedron, 16384, rir_length(room.rt60, FS), RoomSamplingConfig(max_order=0), trunc=0)


def test_complex_convention_has_no_time_signal(em32: ArraySpec) -> None:
    room = shoebox()
    cfg = EncodingConfig(convention=FoaConvention.COMPLEX)
    with pytest.raises(ValueError):
        simulate_sh_rir(room, placement_at((3.0, 2.5, 1.8), (1.0, 0.0, 0.0)), em32, cfg, rir_length(0.3, FS))


def test_short_length_rejected(em32: ArraySpec) -> None:
    room = shoebox()
    with pytest.raises(ValueError, match="1.2"):
        simulate_sh_rir(room, placement_at((3.0, 2.5, 1.8), (1.0, 0.0, 0.0)), em32, EncodingConfig(), 1000)


def test_estimate_t60_of_exponential_decay() -> None:
    t = np.arange(FS) / FS
    noise = np.random.default_rng(3).standard_normal(t.size)
    ir = noise * 10 ** (-3 * t / 0.4)
    assert estimate_t60(ir, FS) == pytest.approx(0.4, rel=0.05)


@pytest.mark.slow
def test_random_rooms_match_requested_rt60(em32: ArraySpec) -> None:
    cfg = RoomSamplingConfig()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        room, _ = sample_room(rng, cfg)
        placement = sample_placement(rng, room, cfg)
        ir = simulate_sh_rir(room, placement, em32, EncodingConfig(), rir_length(room.rt60, FS), cfg)
        expected = direct_onset(placement, room.speed_of_sound, FS)
        w = ir.channels[0]
        window = int(expected) + 24
        assert abs(int(np.argmax(np.abs(w[:window]))) - expected) <= 1.0
        start = gate_start(placement, em32, room.speed_of_sound, cfg.onset_guard)
        assert np.all(w[:start] == 0.0)
        assert estimate_t60(w, FS, start=int(expected)) == pytest.approx(room.rt60, rel=0.2)
