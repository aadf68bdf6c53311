import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textcast import data as D
from textcast.rng import stream


def series(values, sid="s1", freq="weekly"):
    return D.TimeSeries(sid, freq, np.asarray(values, dtype=np.float64))


class TestSeriesIO:
    def test_two_lines_two_series(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("a\tweekly\t1,2,3\nb\tdaily\t4.5,6\n")
        loaded = D.load_series(path)
        assert len(loaded) == 2
        assert loaded[0].series_id == "a"
        assert np.array_equal(loaded[1].values, [4.5, 6.0])

    def test_empty_value_field_names_the_record(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("a\tweekly\t1,,3\n")
        with pytest.raises(D.SeriesParseError, match="'a'"):
            D.load_series(path)

    def test_non_numeric_value_is_parse_error_with_line(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("a\tweekly\t1,2\nb\tweekly\t3,oops\n")
        with pytest.raises(D.SeriesParseError, match=":2:"):
            D.load_series(path)

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("a\t1,2,3\n")
        with pytest.raises(D.SeriesParseError):
            D.load_series(path)

    def test_round_trip_bit_exact(self, tmp_path):
        rng = stream(0, "io")
        original = [series(rng.normal(0, 100, size=7), sid=f"s{i}") for i in range(3)]
        path = tmp_path / "rt.tsv"
        D.save_series(path, original)
        loaded = D.load_series(path)
        for a, b in zip(original, loaded):
            assert np.array_equal(a.values, b.values)

    def test_audit_callback_sees_path(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("a\tweekly\t1,2\n")
        seen = []
        D.load_series(path, audit=seen.append)
        assert seen == [str(path)]


class TestMitigation:
    def test_no_outliers_unchanged(self):
        s = series([3.0, 4.0, 5.0, 4.0, 3.0, 4.5])
        out = D.mitigate_anomalies(s)
        assert np.array_equal(out.values, s.values)

    def test_spike_clamped_to_upper_bound(self):
        s = series([1.0, 1.0, 1.0, 1.0, 100.0])
        out = D.mitigate_anomalies(s, k=3.0)
        # deviation median is 0, so the mean absolute deviation (19.8)
        # stands in: bound = 1 + 3 * 1.4826 * 19.8
        bound = 1.0 + 3.0 * 1.4826 * 19.8
        assert out.values[-1] == pytest.approx(bound)
        assert np.array_equal(out.values[:4], np.ones(4))

    def test_constant_series_unchanged(self):
        s = series([7.0] * 6)
        out = D.mitigate_anomalies(s)
        assert np.array_equal(out.values, s.values)

    def test_idempotent_on_noisy_series(self):
        rng = stream(1, "mit")
        for trial in range(20):
            vals = rng.normal(10, 2, size=40)
            vals[int(rng.integers(0, 40))] += 50  # one spike
            once = D.mitigate_anomalies(series(vals))
            twice = D.mitigate_anomalies(once)
            assert np.array_equal(once.values, twice.values)

    def test_length_unchanged(self):
        s = series([1, 2, 3, 400, 5, 6])
        assert D.mitigate_anomalies(s).values.size == 6

    def test_invalid_k(self):
        with pytest.raises(ValueError):
            D.mitigate_anomalies(series([1, 2, 3]), k=0.0)


class TestMakeWindows:
    def test_counting_formula(self):
        s = series(np.arange(10.0))
        windows = D.make_windows(s, D.WindowSpec(3, 2))
        assert len(windows) == 6

    def test_boundary_single_window(self):
        s = series(np.arange(5.0))
        windows = D.make_windows(s, D.WindowSpec(3, 2))
        assert len(windows) == 1

    def test_short_series_yield_nothing(self):
        s = series(np.arange(4.0))
        assert D.make_windows(s, D.WindowSpec(3, 2)) == []

    def test_first_window_covers_prefix(self):
        s = series(np.arange(10.0) * 2)
        w = D.make_windows(s, D.WindowSpec(3, 2))[0]
        assert w.start == 0
        assert np.array_equal(w.x, s.values[:3])
        assert np.array_equal(w.y, s.values[3:5])

    def test_content_fidelity(self):
        s = series(stream(2, "win").normal(size=15))
        for w in D.make_windows(s, D.WindowSpec(4, 3)):
            joined = np.concatenate([w.x, w.y])
            assert np.array_equal(joined, s.values[w.start:w.start + 7])


class TestLeaveOneOut:
    def _windows(self, n_series=5, length=10, n=3, h=2):
        out = []
        for i in range(n_series):
            s = series(stream(3, "loo", i).normal(size=length), sid=f"s{i:02d}")
            out.extend(D.make_windows(s, D.WindowSpec(n, h)))
        return out

    def test_one_test_window_per_series(self):
        # h=2: per series the held-out window plus the one overlapping its
        # target range leave the train partition
        windows = self._windows()
        train, test = D.split_leave_one_out(windows)
        assert len(test) == 5
        assert len(train) == len(windows) - 5 * 2

    def test_horizon_one_keeps_all_earlier_windows(self):
        windows = []
        for i in range(3):
            s = series(stream(31, "h1", i).normal(size=9), sid=f"s{i}")
            windows.extend(D.make_windows(s, D.WindowSpec(3, 1)))
        train, test = D.split_leave_one_out(windows)
        assert len(test) == 3
        assert len(train) == len(windows) - 3

    def test_test_window_has_max_start(self):
        windows = self._windows()
        _, test = D.split_leave_one_out(windows)
        for w in test:
            starts = [v.start for v in windows if v.series_id == w.series_id]
            assert w.start == max(starts)

    def test_111_series_dataset_gives_111_test_windows(self):
        windows = []
        for i in range(111):
            s = series(stream(4, "nn5", i).normal(size=20), sid=f"atm{i:03d}")
            windows.extend(D.make_windows(s, D.WindowSpec(9, 5)))
        _, test = D.split_leave_one_out(windows)
        assert len(test) == 111

    def test_single_window_series_warns_and_goes_to_test(self):
        s = series(np.arange(5.0), sid="tiny")
        windows = D.make_windows(s, D.WindowSpec(3, 2))
        with pytest.warns(UserWarning):
            train, test = D.split_leave_one_out(windows)
        assert train == []
        assert len(test) == 1

    def test_no_target_leakage(self):
        windows = self._windows(n_series=4, length=14, n=4, h=3)
        train, test = D.split_leave_one_out(windows)
        for tw in test:
            t_targets = set(range(tw.start + 4, tw.start + 7))
            for trw in train:
                if trw.series_id != tw.series_id:
                    continue
                tr_targets = set(range(trw.start + 4, trw.start + 7))
                assert not (t_targets & tr_targets)


class TestTailSplit:
    def _windows(self, count=100):
        s = series(stream(5, "tail").normal(size=count + 6), sid="one")
        return D.make_windows(s, D.WindowSpec(4, 3))

    def test_ten_percent(self):
        windows = self._windows(100)
        train, test = D.split_tail(windows, fraction=0.1)
        assert len(test) == 10
        assert len(train) == len(windows) - 10

    def test_chronology(self):
        windows = self._windows(50)
        train, test = D.split_tail(windows, fraction=0.2)
        assert max(w.start for w in train) < min(w.start for w in test)

    def test_zero_shot_discards_train(self):
        windows = self._windows(50)
        train, test = D.split_tail(windows, fraction=0.1, zero_shot=True)
        assert train == []
        assert test

    def test_count_variant(self):
        windows = self._windows(30)
        train, test = D.split_tail(windows, count=7)
        assert len(test) == 7

    def test_bad_fraction(self):
        windows = self._windows(10)
        with pytest.raises(ValueError):
            D.split_tail(windows, fraction=1.5)
        with pytest.raises(ValueError):
            D.split_tail(windows, fraction=0.1, count=3)


class TestRegistry:
    # the nine comparative rows and three zero-shot rows
    EXPECTED = {
        "electricity": (65, 8, "comparative"),
        "m1_monthly": (15, 18, "comparative"),
        "m1_quarterly": (5, 8, "comparative"),
        "m3_monthly": (15, 18, "comparative"),
        "m3_quarterly": (5, 8, "comparative"),
        "nn5_daily": (9, 56, "comparative"),
        "nn5_weekly": (65, 8, "comparative"),
        "weather": (512, 96, "comparative"),
        "ili": (96, 24, "comparative"),
        "traffic": (65, 8, "zero_shot"),
        "etth1": (24, 48, "zero_shot"),
        "etth2": (24, 48, "zero_shot"),
    }

    @pytest.mark.parametrize("name", sorted(EXPECTED))
    def test_registry_row(self, name):
        entry = D.REGISTRY[name]
        n, h, study = self.EXPECTED[name]
        assert entry.spec.input_size == n
        assert entry.spec.horizon == h
        assert entry.study == study

    def test_registry_complete(self):
        assert set(D.REGISTRY) == set(self.EXPECTED)
        comparative = [e for e in D.REGISTRY.values() if e.study == "comparative"]
        zero_shot = [e for e in D.REGISTRY.values() if e.study == "zero_shot"]
        assert len(comparative) == 9
        assert len(zero_shot) == 3


class TestWindowIO:
    def test_round_trip(self, tmp_path):
        s = series(stream(6, "wio").normal(size=12), sid="w")
        windows = D.make_windows(s, D.WindowSpec(4, 2))
        path = tmp_path / "w.tsv"
        D.save_windows(path, windows)
        loaded = D.load_windows(path)
        assert len(loaded) == len(windows)
        for a, b in zip(windows, loaded):
            assert a.series_id == b.series_id and a.start == b.start
            assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)

    def test_manifest_rows(self, tmp_path):
        s = series(np.arange(10.0), sid="m")
        windows = D.make_windows(s, D.WindowSpec(3, 2))
        path = tmp_path / "m.manifest.tsv"
        D.save_window_manifest(path, windows, D.WindowSpec(3, 2), "train")
        lines = path.read_text().splitlines()
        assert len(lines) == len(windows)
        assert lines[0] == "m\t0\t3\t2\ttrain"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6), st.integers(1, 4), st.integers(8, 30))
def test_property_window_count_and_fidelity(seed, n, h, length):
    s = series(stream(seed, "prop").normal(size=length), sid="p")
    windows = D.make_windows(s, D.WindowSpec(n, h))
    expected = max(0, length - n - h + 1) if length >= n + h else 0
    assert len(windows) == expected
    for w in windows:
        assert np.array_equal(np.concatenate([w.x, w.y]),
                              s.values[w.start:w.start + n + h])
