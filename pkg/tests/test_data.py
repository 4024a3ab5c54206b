import logging

import numpy as np
import pytest

from tsnas.data import (
    RawSeries,
    WindowedDataset,
    from_manifest,
    gen_synthetic,
    load_csv,
    make_windows,
    short_term_windows,
    window_count,
)
from tsnas.errors import ConfigError, IngestionError


def write(tmp_path, text, name="s.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_window_count_formula():
    assert window_count(100, 10, 5) == 86
    assert window_count(14, 10, 5) == 0
    ds = WindowedDataset("train", np.arange(100.0)[:, None], 10, 5, np.zeros(1), np.ones(1))
    assert len(ds) == 86
    x, y = ds.batch([0, 85])
    assert x.shape == (2, 1, 10) and y.shape == (2, 1, 5)
    np.testing.assert_array_equal(x[1, 0], np.arange(85.0, 95.0))
    np.testing.assert_array_equal(y[1, 0], np.arange(95.0, 100.0))


def test_windows_are_contiguous_in_input_then_target():
    ds = WindowedDataset("train", np.arange(30.0)[:, None], 4, 3, np.zeros(1), np.ones(1))
    x, y = ds.batch(np.arange(len(ds)))
    np.testing.assert_array_equal(y[:, 0, 0], x[:, 0, -1] + 1)


def test_splits_are_disjoint_and_use_train_statistics():
    values = np.concatenate([np.zeros(600), np.full(200, 10.0), np.full(200, 20.0)]) + np.arange(1000) * 1e-3
    series = RawSeries("s", ["v"], values)
    splits = make_windows(series, 24, 8, (0.6, 0.2, 0.2))
    train = splits["train"]
    assert train.mean[0] == pytest.approx(values[:600].mean())
    assert len(train) == 600 - 32 + 1 and len(splits["val"]) == 200 - 32 + 1
    np.testing.assert_allclose(splits["test"].denormalize(splits["test"].series.T).T, values[800:][:, None])


def test_zero_fraction_split_omitted():
    series = gen_synthetic("sines", 400, 1, seed=0)
    assert set(make_windows(series, 16, 4, (0.8, 0.0, 0.2))) == {"train", "test"}


@pytest.mark.parametrize("fractions", [(0.5, 0.6), (1.2, -0.2), ()])
def test_bad_split_fractions(fractions):
    with pytest.raises(ConfigError):
        make_windows(gen_synthetic("sines", 400, seed=0), 16, 4, fractions)


def test_series_too_short():
    with pytest.raises(ConfigError):
        make_windows(gen_synthetic("sines", 20, seed=0), 16, 8)


def test_short_term_protocol():
    series = RawSeries("m4", ["v"], np.arange(1.0, 61.0))
    s = short_term_windows(series, 6)
    assert s["train"].lookback == 12
    assert len(s["test"]) == 1
    _, y = s["test"].batch([0])
    np.testing.assert_allclose(s["test"].denormalize(y)[0, 0], np.arange(55.0, 61.0))
    assert len(s["val"]) >= 1
    # validation windows come after training windows and never touch the test horizon
    assert s["val"].series.shape[0] <= 54


def test_load_csv_roundtrip(tmp_path):
    series = gen_synthetic("ar", 50, 2, seed=3)
    path = tmp_path / "ar.csv"
    series.to_csv(path)
    back = load_csv(path)
    np.testing.assert_array_equal(back.values, series.values)
    assert back.columns == ["c0", "c1"]


def test_load_csv_fills_gaps(tmp_path):
    p = write(tmp_path, "date,a,b\n2020-01-01,,1\n2020-01-02,2,\n2020-01-03,,3\n2020-01-04,4,nan\n")
    s = load_csv(p)
    np.testing.assert_array_equal(s.values[:, 0], [2, 2, 2, 4])
    np.testing.assert_array_equal(s.values[:, 1], [1, 1, 3, 3])


def test_load_csv_all_nan_column(tmp_path):
    p = write(tmp_path, "date,a\n1,\n2,\n")
    with pytest.raises(IngestionError, match="a"):
        load_csv(p)


def test_load_csv_reports_line_and_column(tmp_path):
    p = write(tmp_path, "date,a,b\n1,0.5,1\n2,0.7,oops\n")
    with pytest.raises(IngestionError, match=r"row 3, col 'b'"):
        load_csv(p)


def test_load_csv_sorts_out_of_order_rows(tmp_path, caplog):
    p = write(tmp_path, "date,a\n2020-01-03,3\n2020-01-01,1\n2020-01-02,2\n")
    with caplog.at_level(logging.WARNING):
        s = load_csv(p)
    np.testing.assert_array_equal(s.values[:, 0], [1, 2, 3])
    assert "out of order" in caplog.text


def test_load_csv_column_subset_and_missing(tmp_path):
    p = write(tmp_path, "date,a,b\n1,1,10\n2,2,20\n")
    assert load_csv(p, {"columns": ["b"]}).values[:, 0].tolist() == [10, 20]
    with pytest.raises(IngestionError):
        load_csv(p, {"columns": ["z"]})


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(IngestionError):
        load_csv(tmp_path / "none.csv")


@pytest.mark.parametrize("kind, params", [("sines", {}), ("ar", {"coefficients": [0.5, 0.2]}),
                                          ("teacher", {"spec": {"blocks": [{"enc_attn": "Conv_3",
                                                                            "enc_ffn": "Skip",
                                                                            "attn": "EP_Attn", "act": "ReLU",
                                                                            "k": 1.0}]}})])
def test_generators_are_reproducible_from_manifest(kind, params):
    a = gen_synthetic(kind, 120, 1, seed=11, params=params)
    b = from_manifest(a.manifest)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.isfinite(a.values).all() and a.values.std() > 0
    c = gen_synthetic(kind, 120, 1, seed=12, params=params)
    assert not np.array_equal(a.values, c.values)


def test_noiseless_sines_are_exact():
    s = gen_synthetic("sines", 48, 1, seed=0, params={"periods": [12.0], "noise": 0.0})
    np.testing.assert_allclose(s.values[:12], s.values[12:24], atol=1e-12)


def test_teacher_requires_spec_and_unknown_kind():
    with pytest.raises(ConfigError):
        gen_synthetic("teacher", 50, seed=0)
    with pytest.raises(ConfigError):
        gen_synthetic("chaos", 50, seed=0)
