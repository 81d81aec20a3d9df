"""Feature archives, synthetic speakers, CMVN and trial lists."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gatedxvec.data import (FeatureArchive, FeatureFormatError, SynthSpec, Trial, TrialFormatError, cmvn,
                            feature_bytes, generate_synthetic, holdout_split, read_features,
                            read_features_csv, read_trials, write_features, write_trials)


class TestCmvn:
    def test_column(self):
        np.testing.assert_allclose(cmvn(np.array([[1.0], [2.0], [3.0]]))[:, 0], [-1.2247, 0, 1.2247], atol=1e-4)

    def test_constant_column_floored(self):
        out = cmvn(np.array([[5.0, 1.0], [5.0, 2.0]]))
        np.testing.assert_array_equal(out[:, 0], 0.0)

    @given(hnp.arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 4)),
                      elements=st.floats(-100, 100)))
    @settings(max_examples=60)
    def test_statistics_and_idempotence(self, x):
        y = cmvn(x)
        var = x.var(axis=0)
        assert np.abs(y.mean(axis=0)).max() <= 1e-10
        ok = var > 1e-6
        assert np.abs(y.var(axis=0)[ok] - 1).max(initial=0) <= 1e-8
        assert np.abs(cmvn(y) - y)[:, ok].max(initial=0) <= 1e-10


class TestSynthetic:
    def test_counts_and_ids(self):
        a = generate_synthetic(SynthSpec(3, 4, (10, 20), 5, seed=1))
        assert len(a) == 12 and a.speakers() == ["spk0", "spk1", "spk2"]
        assert all(10 <= a[u].features.shape[0] <= 20 and a[u].features.shape[1] == 5 for u in a)

    def test_same_seed_bitwise(self):
        spec = SynthSpec(4, 3, (30, 40), 6, seed=9)
        assert feature_bytes(generate_synthetic(spec)) == feature_bytes(generate_synthetic(spec))
        assert feature_bytes(generate_synthetic(spec)) != feature_bytes(generate_synthetic(SynthSpec(4, 3, (30, 40), 6, seed=10)))

    def test_linear_classifier_on_frame_means(self):
        a = generate_synthetic(SynthSpec(2, 50, (100, 100), 10, spread=3.0, noise=0.5, seed=2))
        x = np.stack([a[u].features.mean(axis=0) for u in a])
        y = np.array([a[u].speaker == "spk1" for u in a], float)
        tr = np.arange(len(y)) % 2 == 0
        design = np.c_[x, np.ones(len(x))]
        w, *_ = np.linalg.lstsq(design[tr], 2 * y[tr] - 1, rcond=None)
        acc = ((design[~tr] @ w > 0) == (y[~tr] > 0)).mean()
        assert acc >= 0.99

    def test_uncorrelated_frames(self):
        x = generate_synthetic(SynthSpec(1, 1, (10000, 10000), 1, correlation=0.0, seed=3))["spk0-utt0"].features[:, 0]
        x = x - x.mean()
        r = (x[:-1] @ x[1:]) / (x @ x)
        assert abs(r) <= 0.05

    def test_correlation_is_respected(self):
        x = generate_synthetic(SynthSpec(1, 1, (20000, 20000), 1, correlation=0.7, seed=4))["spk0-utt0"].features[:, 0]
        x = x - x.mean()
        assert abs((x[:-1] @ x[1:]) / (x @ x) - 0.7) <= 0.03

    @pytest.mark.parametrize("bad", [dict(num_speakers=0), dict(frames=(5, 2)), dict(noise=0.0),
                                     dict(correlation=1.0)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            SynthSpec(**bad).validate()


class TestFeatureFiles:
    def test_round_trip_bitwise(self, tmp_path):
        a = generate_synthetic(SynthSpec(2, 3, (5, 9), 4, seed=5))
        write_features(a, tmp_path / "f.gnf")
        b = read_features(tmp_path / "f.gnf")
        assert list(a) == list(b)
        for u in a:
            assert a[u].speaker == b[u].speaker
            assert a[u].features.tobytes() == b[u].features.tobytes()

    def test_header_layout(self):
        a = FeatureArchive()
        a.add("u", np.zeros((2, 3)), "s")
        blob = feature_bytes(a)
        assert blob[:4] == b"GNFV"
        assert int.from_bytes(blob[4:8], "little") == 1 and int.from_bytes(blob[8:12], "little") == 1

    def test_truncated(self, tmp_path):
        a = generate_synthetic(SynthSpec(2, 2, (5, 5), 3, seed=6))
        (tmp_path / "f.gnf").write_bytes(feature_bytes(a)[:-7])
        with pytest.raises(FeatureFormatError, match="truncated"):
            read_features(tmp_path / "f.gnf")

    def test_trailing_bytes(self, tmp_path):
        a = generate_synthetic(SynthSpec(1, 1, (5, 5), 3, seed=6))
        (tmp_path / "f.gnf").write_bytes(feature_bytes(a) + b"\0")
        with pytest.raises(FeatureFormatError, match="trailing"):
            read_features(tmp_path / "f.gnf")

    def test_csv_cross_check(self, tmp_path):
        rows = ["u1,alice,1.5,2.0", "u1,alice,-3.25,4.0", "u1,alice,0.0,1e-3", "u2,bob,7.0,8.0"]
        (tmp_path / "f.csv").write_text("\n".join(rows) + "\n")
        a = FeatureArchive()
        a.add("u1", [[1.5, 2.0], [-3.25, 4.0], [0.0, 1e-3]], "alice")
        a.add("u2", [[7.0, 8.0]], "bob")
        write_features(a, tmp_path / "f.gnf")
        b, c = read_features(tmp_path / "f.gnf"), read_features_csv(tmp_path / "f.csv")
        assert feature_bytes(b) == feature_bytes(c)

    def test_duplicate_and_dimension_errors(self):
        a = FeatureArchive()
        a.add("u", np.zeros((2, 3)), "s")
        with pytest.raises(FeatureFormatError, match="duplicate"):
            a.add("u", np.zeros((2, 3)), "s")
        with pytest.raises(FeatureFormatError, match="dim"):
            a.add("v", np.zeros((2, 4)), "s")


class TestTrials:
    def test_single_line(self, tmp_path):
        (tmp_path / "t").write_text("u1 u2 target\n")
        assert read_trials(tmp_path / "t") == [Trial("u1", "u2", True)]

    def test_empty(self, tmp_path):
        (tmp_path / "t").write_text("")
        assert read_trials(tmp_path / "t") == []

    def test_thousand_lines(self, tmp_path):
        rng = np.random.default_rng(7)
        labels = rng.choice(["target", "nontarget"], size=1000, p=[0.1, 0.9])
        text = "".join(f"e{i % 37} t{i} {lab}\n" for i, lab in enumerate(labels))
        (tmp_path / "t").write_text(text)
        trials = read_trials(tmp_path / "t")
        assert len(trials) == text.count("\n")
        assert sum(t.is_target for t in trials) == text.count(" target\n")
        assert sum(not t.is_target for t in trials) == text.count(" nontarget\n")

    def test_round_trip(self, tmp_path):
        trials = [Trial("a", "b", True), Trial("a", "c", False)]
        write_trials(trials, tmp_path / "t")
        assert read_trials(tmp_path / "t") == trials

    @pytest.mark.parametrize("text,match", [("u1 u2\n", ":1:"), ("u1 u2 maybe\n", ":1:"),
                                            ("a b target\na b target\n", "duplicate")])
    def test_malformed(self, tmp_path, text, match):
        (tmp_path / "t").write_text(text)
        with pytest.raises(TrialFormatError, match=match):
            read_trials(tmp_path / "t")


class TestHoldout:
    def test_split_and_full_cross_pairing(self):
        a = generate_synthetic(SynthSpec(3, 6, (5, 5), 2, seed=8))
        tr, ev, trials = holdout_split(a, 4, 2)
        assert len(tr) == 6 and len(ev) == 12
        assert not set(tr) & set(ev)
        assert len(trials) == (3 * 2) * (3 * 2)
        assert sum(t.is_target for t in trials) == 3 * 2 * 2
        assert all(t.is_target == (ev[t.enroll].speaker == ev[t.test].speaker) for t in trials)

    def test_invalid(self):
        a = generate_synthetic(SynthSpec(2, 3, (5, 5), 2, seed=8))
        with pytest.raises(ValueError):
            holdout_split(a, 3, 1)
        with pytest.raises(ValueError):
            holdout_split(a, 2, 2)
