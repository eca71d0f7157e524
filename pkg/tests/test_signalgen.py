import dataclasses
import math

import numpy as np
import pytest

from fedprint import signalgen as sg


def rng(seed=0):
    return np.random.default_rng(seed)


class TestGenerateRN16:
    def test_same_seed_same_payload(self):
        a = sg.generate_rn16(rng(7))
        b = sg.generate_rn16(rng(7))
        assert a.payload_bits == b.payload_bits

    def test_different_states_differ(self):
        r = rng(1)
        frames = [sg.generate_rn16(r) for _ in range(8)]
        assert len({f.payload_bits for f in frames}) > 1

    def test_preamble_constant(self):
        r = rng(2)
        assert all(sg.generate_rn16(r).preamble_symbols == sg.PREAMBLE_SYMBOLS
                   for _ in range(5))

    def test_per_bit_mean_near_half(self):
        # binomial bound: 10000 draws keep each bit's mean within [0.47, 0.53]
        r = rng(3)
        bits = np.array([sg.generate_rn16(r).payload_bits for _ in range(10000)])
        means = bits.mean(axis=0)
        assert means.min() >= 0.47 and means.max() <= 0.53


class TestFM0Encode:
    def test_samples_per_bit(self):
        frame = sg.generate_rn16(rng(0))
        bb = sg.fm0_encode(frame, 5e6)
        # 6 preamble + 16 payload + 1 dummy bits at 125 samples/bit
        assert int((bb != 0).sum()) == 23 * 125

    def test_padded_to_comm_len(self):
        bb = sg.fm0_encode(sg.generate_rn16(rng(0)), 5e6)
        assert bb.size == 3400
        assert np.all(bb[23 * 125 :] == 0)

    def test_all_zero_payload_inverts_every_half_bit(self):
        frame = sg.RN16Frame(payload_bits=(0,) * 16)
        bb = sg.fm0_encode(frame, 5e6)
        spb, half = 125, 62
        start = 6 * spb  # payload region
        for b in range(16):
            bit = bb[start + b * spb : start + (b + 1) * spb]
            assert np.all(bit[:half] == -bit[half])  # mid-bit inversion
            if b:
                prev = bb[start + b * spb - 1]
                assert bit[0] == -prev  # boundary inversion

    def test_data_one_has_no_midbit_inversion(self):
        frame = sg.RN16Frame(payload_bits=(1,) * 16)
        bb = sg.fm0_encode(frame, 5e6)
        spb = 125
        start = 6 * spb
        for b in range(16):
            bit = bb[start + b * spb : start + (b + 1) * spb]
            assert np.all(bit == bit[0])

    def test_rejects_sub_nyquist_rate(self):
        with pytest.raises(sg.SignalGenError):
            sg.fm0_encode(sg.generate_rn16(rng(0)), sample_rate_hz=60_000)


class TestApplyImpairments:
    def test_identity_profile_is_passthrough(self):
        bb = sg.fm0_encode(sg.generate_rn16(rng(0)))
        out = sg.apply_impairments(bb, sg.TagProfile(tag_id=0))
        np.testing.assert_array_equal(out.samples.real, bb)
        np.testing.assert_array_equal(out.samples.imag, np.zeros_like(bb))

    def test_cfo_phase_ramp(self):
        bb = sg.fm0_encode(sg.generate_rn16(rng(0)))
        ident = sg.apply_impairments(bb, sg.TagProfile(tag_id=0)).samples
        shifted = sg.apply_impairments(bb, sg.TagProfile(tag_id=0, cfo_hz=1000.0)).samples
        n = np.arange(bb.size)
        expected = ident * np.exp(1j * 2 * np.pi * 1000.0 * n / 5e6)
        np.testing.assert_allclose(shifted, expected, atol=1e-12)

    def test_dc_offset_on_zero_baseband(self):
        out = sg.apply_impairments(
            np.zeros(100), sg.TagProfile(tag_id=0, dc_offset=0.1 + 0j)
        )
        np.testing.assert_array_equal(out.samples, np.full(100, 0.1 + 0j))

    def test_nonfinite_input_rejected(self):
        bad = np.array([1.0, np.inf, 0.0])
        with pytest.raises(sg.SignalGenError):
            sg.apply_impairments(bad, sg.TagProfile(tag_id=0))

    def test_phase_noise_needs_rng(self):
        with pytest.raises(sg.SignalGenError):
            sg.apply_impairments(np.ones(10),
                                 sg.TagProfile(tag_id=0, phase_noise_std_rad=1e-3))


class TestApplyChannel:
    def _wave(self, samples=None):
        if samples is None:
            samples = sg.fm0_encode(sg.generate_rn16(rng(0))) + 0j
        return sg.IQWaveform(samples, 5e6, tag_id=0, scenario_name="")

    def test_reference_identity(self):
        w = self._wave()
        out = sg.apply_channel(w, sg.ChannelScenario("SCEN-020-OTA", 20.0))
        np.testing.assert_array_equal(out.samples, w.samples)

    def test_distance_amplitude_ratio(self):
        w = self._wave()
        near = sg.apply_channel(w, sg.ChannelScenario("SCEN-020-OTA", 20.0))
        far = sg.apply_channel(w, sg.ChannelScenario("SCEN-100-OTA", 100.0))
        mask = w.samples != 0
        ratio = np.abs(far.samples[mask]) / np.abs(near.samples[mask])
        np.testing.assert_allclose(ratio, 0.2, atol=1e-9)

    def test_tissue_attenuation_db(self):
        w = self._wave()
        scen = sg.ChannelScenario("SCEN-020-PM1", 20.0,
                                  obstacle=sg.TissueObstacle(3.0, 1.6))
        out = sg.apply_channel(w, scen)
        p_in = np.mean(np.abs(w.samples) ** 2)
        p_out = np.mean(np.abs(out.samples) ** 2)
        assert abs(10 * math.log10(p_in / p_out) - 4.8) < 0.01

    def test_all_zero_signal_rejected(self):
        w = self._wave(np.zeros(100, dtype=complex))
        with pytest.raises(sg.SignalGenError):
            sg.apply_channel(w, sg.ChannelScenario("SCEN-020-OTA", 20.0, snr_db=10.0),
                             rng(0))

    def test_awgn_calibration_within_half_db(self):
        # empirical SNR over 100 waveforms stays within +/- 0.5 dB of request
        target = 10.0
        scen = sg.ChannelScenario("SCEN-020-OTA", 20.0, snr_db=target, seed=0)
        r = rng(11)
        ratios = []
        for i in range(100):
            bb = sg.fm0_encode(sg.generate_rn16(r))
            w = self._wave(bb + 0j)
            out = sg.apply_channel(w, scen, r)
            noise = out.samples - w.samples
            mask = w.samples != 0
            sig_p = np.mean(np.abs(w.samples[mask]) ** 2)
            noise_p = np.mean(np.abs(noise) ** 2)
            ratios.append(10 * math.log10(sig_p / noise_p))
        assert abs(np.mean(ratios) - target) < 0.5

    def test_interferer_power(self):
        w = self._wave()
        scen = sg.ChannelScenario("SCEN-020-OTA", 20.0,
                                  interferers=((3e5, 0.0),))
        out = sg.apply_channel(w, scen)
        tone = out.samples - w.samples
        mask = w.samples != 0
        sig_p = np.mean(np.abs(w.samples[mask]) ** 2)
        tone_p = np.mean(np.abs(tone) ** 2)
        assert abs(10 * math.log10(tone_p / sig_p)) < 0.1


class TestScenarioName:
    @pytest.mark.parametrize("dist,code", [(20, None), (50, "PM0"), (100, "PM1")])
    def test_roundtrip(self, dist, code):
        name = sg.encode_scenario_name(dist, code)
        d, c = sg.parse_scenario_name(name)
        assert sg.encode_scenario_name(d, c) == name
        assert (d, c) == (float(dist), code)

    def test_rejects_bad_name(self):
        with pytest.raises(sg.SignalGenError):
            sg.parse_scenario_name("OTA-20")

    def test_catalog_roundtrip(self, tmp_path):
        scens = [
            sg.ChannelScenario("SCEN-020-OTA", 20.0, snr_db=12.0,
                               interferers=((3e5, -3.0),), seed=4),
            sg.ChannelScenario("SCEN-050-PM1", 50.0,
                               obstacle=sg.default_obstacle("PM1"), seed=5),
        ]
        path = tmp_path / "catalog.json"
        sg.write_scenario_catalog(path, scens)
        back = sg.read_scenario_catalog(path)
        assert back == scens


class TestPopulationAndSynthesis:
    def test_profiles_distinct(self):
        pop = sg.generate_tag_population(20, seed=0)
        assert len({(p.cfo_hz, p.iq_gain_imbalance) for p in pop}) == 20

    def test_different_seeds_differ(self):
        a = sg.generate_tag_population(5, seed=0)
        b = sg.generate_tag_population(5, seed=1)
        assert any(pa.cfo_hz != pb.cfo_hz for pa, pb in zip(a, b))

    def test_fingerprint_separability(self):
        # noiseless impaired waveforms of the same payload never alias
        pop = sg.generate_tag_population(6, seed=2)
        bb = sg.fm0_encode(sg.generate_rn16(rng(0)))
        waves = [
            sg.apply_impairments(
                bb, dataclasses.replace(p, phase_noise_std_rad=0.0)
            ).samples
            for p in pop
        ]
        for i in range(len(waves)):
            for j in range(i + 1, len(waves)):
                assert np.mean(np.abs(waves[i] - waves[j])) > 0

    def test_cardinality(self):
        pop = sg.generate_tag_population(5, seed=0)
        scen = sg.ChannelScenario("SCEN-020-OTA", 20.0, snr_db=20.0, seed=1)
        waves = sg.synthesize_scenario(pop, scen, comms_per_tag=8)
        assert len(waves) == 40
        assert all(w.scenario_name == scen.name for w in waves)

    def test_deterministic_corpus(self):
        pop = sg.generate_tag_population(3, seed=0)
        scen = sg.ChannelScenario("SCEN-020-OTA", 20.0, snr_db=15.0, seed=9)
        a = sg.synthesize_scenario(pop, scen, 4)
        b = sg.synthesize_scenario(pop, scen, 4)
        for wa, wb in zip(a, b):
            assert wa.samples.tobytes() == wb.samples.tobytes()

    def test_duplicate_tag_id_rejected(self):
        p = sg.TagProfile(tag_id=1)
        with pytest.raises(sg.SignalGenError):
            sg.synthesize_scenario([p, p], sg.ChannelScenario("SCEN-020-OTA", 20.0), 1)

    def test_comm_length_default(self):
        pop = sg.generate_tag_population(1, seed=0)
        scen = sg.ChannelScenario("SCEN-020-OTA", 20.0, snr_db=20.0, seed=1)
        (w,) = sg.synthesize_scenario(pop, scen, 1)
        assert w.samples.size == 3400
        assert np.all(np.isfinite(w.samples))
