import numpy as np
import pytest

from fedprint import datapipe as dp
from fedprint import signalgen as sg


def make_waves(n_tags=3, comms=10, comm_len=3400, seed=0):
    pop = sg.generate_tag_population(n_tags, seed=seed)
    scen = sg.ChannelScenario("SCEN-020-OTA", 20.0, snr_db=20.0, seed=seed)
    return sg.synthesize_scenario(pop, scen, comms, comm_len=comm_len)


class TestSliceWaveform:
    def test_slice_count_is_floor(self):
        w = sg.IQWaveform(np.arange(3400) + 0j, 5e6, 4, "SCEN-020-OTA")
        slices = dp.slice_waveform(w, 1024)
        assert len(slices) == 3  # floor(3400 / 1024)

    def test_slice_content_and_layout(self):
        samples = (np.arange(8) + 1j * np.arange(8, 16)).astype(np.complex64)
        w = sg.IQWaveform(samples, 5e6, 2, "SCEN-020-OTA")
        (a, b) = dp.slice_waveform(w, 4)
        assert a.data.shape == (4, 2) and a.data.dtype == np.float32
        np.testing.assert_array_equal(a.data[:, 0], [0, 1, 2, 3])
        np.testing.assert_array_equal(a.data[:, 1], [8, 9, 10, 11])
        np.testing.assert_array_equal(b.data[:, 0], [4, 5, 6, 7])
        assert a.label == 2 and a.scenario_name == "SCEN-020-OTA"

    def test_exact_multiple(self):
        w = sg.IQWaveform(np.zeros(2048, dtype=complex), 5e6, 0, "x")
        assert len(dp.slice_waveform(w, 1024)) == 2

    def test_bad_window(self):
        w = sg.IQWaveform(np.zeros(10, dtype=complex), 5e6, 0, "x")
        with pytest.raises(ValueError):
            dp.slice_waveform(w, 0)


class TestSplitCorpus:
    def test_ratios_at_comm_granularity(self):
        waves = make_waves(n_tags=2, comms=20)
        splits = dp.split_corpus(waves, 1024, seed=1)
        # 20 comms/tag -> 16/2/2 comms -> x3 slices each
        assert len(splits.train) == 2 * 16 * 3
        assert len(splits.validation) == 2 * 2 * 3
        assert len(splits.test) == 2 * 2 * 3

    def test_no_comm_straddles_splits(self):
        waves = make_waves(n_tags=2, comms=20)
        splits = dp.split_corpus(waves, 1024, seed=1)
        sets = [
            {s.comm_id for s in part}
            for part in (splits.train, splits.validation, splits.test)
        ]
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])

    def test_deterministic_under_seed(self):
        waves = make_waves(n_tags=2, comms=10)
        a = dp.split_corpus(waves, 1024, seed=7)
        b = dp.split_corpus(waves, 1024, seed=7)
        assert [s.comm_id for s in a.train] == [s.comm_id for s in b.train]
        c = dp.split_corpus(waves, 1024, seed=8)
        assert [s.comm_id for s in a.train] != [s.comm_id for s in c.train]

    def test_fraction_applied_before_ratios(self):
        waves = make_waves(n_tags=1, comms=20)
        splits = dp.split_corpus(waves, 1024, fraction=0.5, seed=0)
        # keep 10 comms -> 8/1/1
        assert len(splits.train) == 8 * 3
        assert len(splits.validation) == 1 * 3
        assert len(splits.test) == 1 * 3
        assert splits.fraction_used == 0.5

    def test_stratified_every_tag_in_every_split(self):
        waves = make_waves(n_tags=3, comms=10)
        splits = dp.split_corpus(waves, 1024, seed=0)
        for part in (splits.train, splits.validation, splits.test):
            assert {s.label for s in part} == {0, 1, 2}

    def test_too_few_comms_raises(self):
        waves = make_waves(n_tags=1, comms=2)
        with pytest.raises(dp.SplitError):
            dp.split_corpus(waves, 1024, seed=0)

    def test_bad_fraction_and_ratios(self):
        waves = make_waves(n_tags=1, comms=10)
        with pytest.raises(dp.SplitError):
            dp.split_corpus(waves, 1024, fraction=0.0)
        with pytest.raises(dp.SplitError):
            dp.split_corpus(waves, 1024, ratios=(0.5, 0.2, 0.2))


class TestStackSlices:
    def test_shapes_and_dtypes(self):
        waves = make_waves(n_tags=2, comms=10)
        splits = dp.split_corpus(waves, 1024, seed=0)
        X, y = dp.stack_slices(splits.train)
        assert X.shape == (len(splits.train), 2, 1024)
        assert X.dtype == np.float32 and y.dtype == np.int64
        np.testing.assert_array_equal(X[0], splits.train[0].data.T)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dp.stack_slices([])


class TestDiskFormat:
    def test_roundtrip_bitwise(self, tmp_path):
        waves = make_waves(n_tags=2, comms=5)
        scen = sg.ChannelScenario("SCEN-020-OTA", 20.0, snr_db=20.0, seed=0)
        dp.write_corpus(tmp_path, waves, scenarios=[scen], seed=0)
        back = dp.read_corpus(tmp_path)
        key = lambda w: (w.tag_id, w.scenario_name)
        orig = sorted(waves, key=key)
        # reader returns files in manifest order (sorted), comms in order
        assert len(back) == len(orig)
        for a, b in zip(orig, back):
            assert (a.tag_id, a.scenario_name) == (b.tag_id, b.scenario_name)
            assert a.samples.astype(np.complex64).tobytes() == \
                b.samples.astype(np.complex64).tobytes()

    def test_manifest_contents(self, tmp_path):
        waves = make_waves(n_tags=2, comms=3)
        scen = sg.ChannelScenario("SCEN-020-OTA", 20.0, snr_db=20.0, seed=0)
        dp.write_corpus(tmp_path, waves, scenarios=[scen], seed=5)
        m = dp.read_manifest(tmp_path)
        assert m["format"] == "FPRN" and m["seed"] == 5
        assert len(m["files"]) == 2
        assert m["files"][0]["path"] == "tag00000_SCEN-020-OTA.fprn"
        assert m["files"][0]["comm_count"] == 3
        assert m["scenarios"][0]["name"] == "SCEN-020-OTA"

    def test_truncated_record_names_offset(self, tmp_path):
        waves = make_waves(n_tags=1, comms=2, comm_len=100)
        dp.write_corpus(tmp_path, waves)
        path = tmp_path / "tag00000_SCEN-020-OTA.fprn"
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(dp.CorpusFormatError) as exc:
            dp.read_corpus(tmp_path)
        # record 1 truncated at header + 1 full record + partial
        expected_offset = dp._HEADER.size + 800 + (800 - 10)
        assert f"byte {expected_offset}" in str(exc.value)

    def test_truncated_header(self, tmp_path):
        waves = make_waves(n_tags=1, comms=1, comm_len=100)
        dp.write_corpus(tmp_path, waves)
        path = tmp_path / "tag00000_SCEN-020-OTA.fprn"
        path.write_bytes(path.read_bytes()[:5])
        with pytest.raises(dp.CorpusFormatError, match="truncated header"):
            dp.read_corpus(tmp_path)

    def test_bad_magic(self, tmp_path):
        waves = make_waves(n_tags=1, comms=1, comm_len=100)
        dp.write_corpus(tmp_path, waves)
        path = tmp_path / "tag00000_SCEN-020-OTA.fprn"
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(dp.CorpusFormatError, match="magic"):
            dp.read_corpus(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(dp.CorpusFormatError, match="manifest"):
            dp.read_corpus(tmp_path)

    def test_split_after_roundtrip_matches(self, tmp_path):
        waves = make_waves(n_tags=2, comms=10)
        dp.write_corpus(tmp_path, waves)
        back = dp.read_corpus(tmp_path)
        a = dp.split_corpus(sorted(waves, key=lambda w: w.tag_id), 1024, seed=3)
        b = dp.split_corpus(back, 1024, seed=3)
        Xa, ya = dp.stack_slices(a.train)
        Xb, yb = dp.stack_slices(b.train)
        assert Xa.tobytes() == Xb.tobytes()
        np.testing.assert_array_equal(ya, yb)
