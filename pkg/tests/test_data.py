"""Layout, masking, ingestion, synthesis and the cached container."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convdef.data import (
    CountMatrix,
    CsvSchema,
    DataError,
    MaskSpec,
    SynthSpec,
    apply_mask,
    concat_samples,
    ingest_csv,
    ingest_csv_with_report,
    load_counts,
    save_counts,
    split_loyo,
    synth_generate,
)


def toy_matrix(n=4, d=6, p=3, seed=0):
    rng = np.random.default_rng(seed)
    counts = rng.poisson(2.0, (n, d * p)).astype(np.int64)
    return CountMatrix(counts=counts, mask=np.ones_like(counts, bool), n_days=d, n_locations=p)


class TestCountMatrix:
    def test_flat_index_is_day_major(self):
        cm = toy_matrix()
        assert cm.flat_index(0, 0) == 0
        assert cm.flat_index(1, 0) == 3
        assert cm.flat_index(2, 1) == 7

    def test_layout_must_match_dim(self):
        with pytest.raises(DataError):
            CountMatrix(
                counts=np.zeros((2, 10), np.int64),
                mask=np.ones((2, 10), bool),
                n_days=3,
                n_locations=3,
            )

    def test_negative_counts_rejected(self):
        with pytest.raises(DataError):
            CountMatrix(
                counts=np.full((1, 4), -1, np.int64),
                mask=np.ones((1, 4), bool),
                n_days=2,
                n_locations=2,
            )


class TestMasking:
    def test_alternate_weeks_hidden_count(self):
        cm = toy_matrix(n=1, d=357, p=77, seed=1)
        masked = apply_mask(cm, MaskSpec("alternate_weeks"))
        assert masked.hidden_count() == 25 * 7 * 77  # 13475

    def test_three_week_blocks_hidden_count(self):
        cm = toy_matrix(n=1, d=357, p=77, seed=2)
        masked = apply_mask(cm, MaskSpec("alternate_3week_blocks"))
        assert masked.hidden_count() == 8 * 21 * 77  # 12936

    def test_reveal_saturates(self):
        cm = toy_matrix(n=1, d=357, p=77, seed=3)
        masked = apply_mask(cm, MaskSpec("alternate_3week_blocks", reveal_count=1617))
        assert masked.hidden_count() == 0

    def test_reveal_count_bounds(self):
        cm = toy_matrix(n=1, d=357, p=77)
        with pytest.raises(DataError):
            apply_mask(cm, MaskSpec("alternate_3week_blocks", reveal_count=1618))

    def test_idempotent(self):
        cm = toy_matrix(n=2, d=42, p=3, seed=4)
        ms = MaskSpec("alternate_weeks", reveal_count=5, seed=9)
        once = apply_mask(cm, ms)
        twice = apply_mask(once, ms)
        np.testing.assert_array_equal(once.mask, twice.mask)

    def test_reveals_nest(self):
        cm = toy_matrix(n=1, d=357, p=7, seed=5)
        small = apply_mask(cm, MaskSpec("alternate_3week_blocks", reveal_count=10, seed=3))
        big = apply_mask(cm, MaskSpec("alternate_3week_blocks", reveal_count=40, seed=3))
        # every cell revealed at 10 is still revealed at 40
        assert np.all(big.mask[small.mask])

    def test_indivisible_layout_raises(self):
        cm = toy_matrix(n=1, d=40, p=2)
        with pytest.raises(DataError):
            apply_mask(cm, MaskSpec("alternate_weeks"))

    def test_unknown_scheme(self):
        with pytest.raises(DataError):
            MaskSpec("every_other_day")

    @given(st.integers(0, 2**31 - 1), st.integers(0, 21 * 3))
    @settings(max_examples=25, deadline=None)
    def test_partition_sizes(self, seed, reveal):
        cm = toy_matrix(n=1, d=42, p=3, seed=6)
        masked = apply_mask(cm, MaskSpec("alternate_weeks", reveal_count=reveal, seed=seed))
        hidden_weeks = 3  # weeks 2, 4, 6 of 6
        want = hidden_weeks * 7 * 3 - hidden_weeks * reveal
        assert masked.hidden_count() == want


class TestSynth:
    def test_deterministic(self):
        a, ta = synth_generate(SynthSpec(seed=7))
        b, tb = synth_generate(SynthSpec(seed=7))
        np.testing.assert_array_equal(a.counts, b.counts)
        np.testing.assert_array_equal(ta, tb)

    def test_constant_profile_is_homogeneous(self):
        g = SynthSpec(
            n_locations=3,
            n_weeks=3,
            n_samples=2,
            week_profile=(1.0,) * 7,
            base_rates=(2.0, 4.0, 6.0),
            block_sigma=0.0,
            seed=1,
        )
        _, truth = synth_generate(g)
        per_loc = truth.reshape(2, 21, 3)
        assert np.allclose(per_loc, per_loc[:, :1, :])

    def test_zero_amplitude_days_have_zero_counts(self):
        g = SynthSpec(
            n_locations=2,
            n_weeks=4,
            n_samples=3,
            week_profile=(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0),
            base_rates=(3.0, 3.0),
            block_sigma=0.0,
            seed=2,
        )
        cm, _ = synth_generate(g)
        grid = cm.counts.reshape(3, 28, 2)
        weekday = np.arange(28) % 7
        assert grid[:, weekday != 6, :].sum() == 0
        assert grid[:, weekday == 6, :].sum() > 0

    def test_empirical_mean_matches_planted_rate(self):
        # replicate-sampling oracle: many samples of a block-constant field
        g = SynthSpec(
            n_locations=2,
            n_weeks=3,
            n_samples=10_000,
            week_profile=(0.5, 1.0, 1.5, 1.0, 1.0, 2.0, 1.0),
            base_rates=(2.0, 5.0),
            block_sigma=0.0,
            seed=3,
        )
        cm, truth = synth_generate(g)
        mean = cm.counts.mean(axis=0)
        se = np.sqrt(truth[0] / 10_000)
        assert np.all(np.abs(mean - truth[0]) < 3 * se + 1e-9)


class TestSplit:
    def test_fourteen_fold(self):
        cm = toy_matrix(n=14)
        train, test = split_loyo(cm, 0)
        assert train.n_samples == 13
        assert test.n_samples == 1

    def test_two_samples(self):
        cm = toy_matrix(n=2)
        train, test = split_loyo(cm, 1)
        assert train.n_samples == 1
        np.testing.assert_array_equal(test.counts[0], cm.counts[1])

    def test_round_trip(self):
        cm = toy_matrix(n=5)
        train, test = split_loyo(cm, 2)
        merged = concat_samples(train, test)
        order = np.argsort(merged.sample_labels)
        np.testing.assert_array_equal(merged.counts[order], cm.counts)

    def test_index_error(self):
        with pytest.raises(IndexError):
            split_loyo(toy_matrix(n=3), 3)


CSV_HEADER = "Date,Primary Type,Community Area\n"


def write_csv(tmp_path, rows, name="crimes.csv"):
    path = tmp_path / name
    path.write_text(CSV_HEADER + "".join(r + "\n" for r in rows))
    return path


class TestIngest:
    def test_three_row_aggregation(self, tmp_path):
        # 2015-01-04 is the first Sunday of 2015 (day 0)
        path = write_csv(
            tmp_path,
            [
                "2015-01-04,THEFT,5",
                "2015-01-04,THEFT,5",
                "2015-01-05,THEFT,1",
            ],
        )
        cm = ingest_csv(path)
        assert cm.n_samples == 1
        assert cm.counts.sum() == 3
        assert cm.counts[0, cm.flat_index(0, 4)] == 2
        assert cm.counts[0, cm.flat_index(1, 0)] == 1

    def test_portal_date_format(self, tmp_path):
        path = write_csv(tmp_path, ["01/04/2015 03:30:00 PM,THEFT,12"])
        cm = ingest_csv(path)
        assert cm.counts[0, cm.flat_index(0, 11)] == 1

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text(CSV_HEADER)
        with pytest.raises(DataError, match="no rows"):
            ingest_csv(path)

    def test_type_filter_drops_other_rows(self, tmp_path):
        path = write_csv(
            tmp_path,
            ["2015-01-04,THEFT,3", "2015-01-04,BATTERY,3", "2015-01-04,THEFT,3"],
        )
        cm = ingest_csv(path)
        assert cm.counts.sum() == 2

    def test_truncation_window(self, tmp_path):
        # day 357 from the first Sunday (2015-01-04) is 2015-12-27: excluded;
        # days before the first Sunday are excluded as well
        path = write_csv(
            tmp_path,
            ["2015-01-01,THEFT,1", "2015-12-27,THEFT,1", "2015-12-26,THEFT,1"],
        )
        cm, report = ingest_csv_with_report(CsvSchema() and path)
        assert cm.counts.sum() == 1
        assert report.truncated == 2

    def test_conservation(self, tmp_path):
        rng = np.random.default_rng(8)
        rows = []
        for _ in range(300):
            day = int(rng.integers(4, 300))
            rows.append(f"2015-{1 + day // 29:02d}-{1 + day % 28:02d},THEFT,{int(rng.integers(1, 78))}")
        path = write_csv(tmp_path, rows)
        cm, report = ingest_csv_with_report(path)
        assert cm.counts.sum() == report.accepted
        assert report.accepted + report.truncated == 300

    def test_rejects_below_threshold_are_dropped(self, tmp_path):
        rows = ["2015-01-04,THEFT,5"] * 200 + ["notadate,THEFT,5"]
        path = write_csv(tmp_path, rows)
        cm, report = ingest_csv_with_report(path)
        assert report.rejected == 1
        assert cm.counts.sum() == 200

    def test_rejects_above_threshold_abort(self, tmp_path):
        rows = ["2015-01-04,THEFT,5"] * 10 + ["notadate,THEFT,5"] * 2
        path = write_csv(tmp_path, rows)
        with pytest.raises(DataError, match="1%"):
            ingest_csv(path)

    def test_location_out_of_range_rejected(self, tmp_path):
        rows = ["2015-01-04,THEFT,5"] * 200 + ["2015-01-04,THEFT,78"]
        path = write_csv(tmp_path, rows)
        _, report = ingest_csv_with_report(path)
        assert report.rejected == 1

    def test_one_sample_per_year(self, tmp_path):
        path = write_csv(
            tmp_path, ["2014-02-02,THEFT,1", "2015-02-02,THEFT,1", "2014-03-02,THEFT,2"]
        )
        cm = ingest_csv(path)
        assert cm.n_samples == 2
        assert cm.sample_labels == [2014, 2015]


class TestContainer:
    def test_round_trip(self, tmp_path):
        cm = toy_matrix(n=3, d=14, p=5, seed=11)
        cm.mask[1, 3:40] = False
        path = tmp_path / "counts.bin"
        save_counts(path, cm)
        back = load_counts(path)
        np.testing.assert_array_equal(back.counts, cm.counts)
        np.testing.assert_array_equal(back.mask, cm.mask)
        assert (back.n_days, back.n_locations) == (14, 5)
        assert back.sample_labels == cm.sample_labels

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTME\x00\x00\x00" + b"\x00" * 64)
        with pytest.raises(DataError, match="magic"):
            load_counts(path)
