import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynuq.dmd import fit_dmd, fit_edmd, fit_hodmd, forecast_dmd_intervals, forecast_edmd, forecast_hodmd
from dynuq.forecast import ForecastResult
from dynuq.io import (
    DataFormatError,
    DatasetManifest,
    load_forecast,
    load_model,
    load_snapshots,
    read_matrix,
    save_forecast,
    save_model,
    write_matrix,
)
from dynuq.ppgp import PPGPRegressor, forecast_chains

doubles = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=doubles),
       st.booleans())
def test_matrix_round_trip_is_exact(tmp_path, A, header):
    path = tmp_path / "a.csv"
    write_matrix(path, A, time_header=header)
    np.testing.assert_array_equal(read_matrix(path), A)


def test_time_header(tmp_path):
    path = tmp_path / "a.csv"
    write_matrix(path, np.ones((2, 3)), time_header=True)
    assert path.read_text().splitlines()[0] == "t0,t1,t2"


@pytest.mark.parametrize("text,line,column", [
    ("1,2\n3,x\n", 2, 2),
    ("1,2\nnan,4\n", 2, 1),
    ("1,2,3\n4,inf,6\n", 2, 2),
])
def test_bad_cells_report_location(tmp_path, text, line, column):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DataFormatError) as err:
        read_matrix(path)
    assert (err.value.line, err.value.column) == (line, column)
    assert f"bad.csv:{line}:{column}" in str(err.value)


def test_nonfinite_allowed_on_request(tmp_path):
    path = tmp_path / "a.csv"
    path.write_text("1,nan\n")
    assert np.isnan(read_matrix(path, allow_nonfinite=True)[0, 1])


def test_ragged_and_empty(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("1,2\n3\n")
    with pytest.raises(DataFormatError, match="ragged") as err:
        read_matrix(path)
    assert err.value.line == 2
    path.write_text("\n")
    with pytest.raises(DataFormatError):
        read_matrix(path)


def make_dataset(tmp_path, Y, n_train, derivs=None):
    write_matrix(tmp_path / "states.csv", Y)
    manifest = DatasetManifest(snapshots="states.csv", n_train=n_train)
    if derivs is not None:
        write_matrix(tmp_path / "derivs.csv", derivs)
        manifest.derivs = "derivs.csv"
    manifest.to_json(tmp_path / "manifest.json")
    return DatasetManifest.from_json(tmp_path / "manifest.json")


class TestManifest:
    def test_sixteen_row_fixture(self, tmp_path, rng):
        # a 4 x 4 complex-free block flattened row-wise per time point
        G = rng.normal(size=(30, 4, 4))
        Y = G.reshape(30, 16).T
        train, test, derivs = load_snapshots(make_dataset(tmp_path, Y, 20))
        assert train.shape == (16, 20) and test.shape == (16, 10)
        assert derivs is None
        np.testing.assert_array_equal(np.hstack([train, test]), Y)

    def test_derivs_loaded(self, tmp_path, rng):
        Y = rng.normal(size=(3, 8))
        _, _, derivs = load_snapshots(make_dataset(tmp_path, Y, 5, derivs=2 * Y))
        np.testing.assert_array_equal(derivs, 2 * Y)

    def test_derivs_shape_checked(self, tmp_path, rng):
        Y = rng.normal(size=(3, 8))
        with pytest.raises(DataFormatError):
            load_snapshots(make_dataset(tmp_path, Y, 5, derivs=Y[:, :7]))

    def test_split_checked(self, tmp_path, rng):
        with pytest.raises(ValueError):
            load_snapshots(make_dataset(tmp_path, rng.normal(size=(2, 5)), 5))

    def test_unknown_field(self, tmp_path):
        (tmp_path / "m.json").write_text(json.dumps({"snapshots": "a", "n_train": 2, "x": 1}))
        with pytest.raises(DataFormatError, match="unknown"):
            DatasetManifest.from_json(tmp_path / "m.json")

    def test_malformed_json_location(self, tmp_path):
        (tmp_path / "m.json").write_text('{"snapshots": "a",\n "n_train": }')
        with pytest.raises(DataFormatError) as err:
            DatasetManifest.from_json(tmp_path / "m.json")
        assert err.value.line == 2


class TestForecastFiles:
    def test_round_trip(self, tmp_path, rng):
        mean = rng.normal(size=(3, 4))
        res = ForecastResult(mean, mean - 1, mean + 2, level=0.8, seed=9, meta={"mode": "x"})
        save_forecast(res, tmp_path / "f.csv")
        back = load_forecast(tmp_path / "f.csv")
        np.testing.assert_array_equal(back.mean, mean)
        np.testing.assert_array_equal(back.upper, mean + 2)
        assert back.level == 0.8 and back.seed == 9 and back.meta == {"mode": "x"}

    def test_schema(self, tmp_path):
        res = ForecastResult(np.zeros((2, 3)), -np.ones((2, 3)), np.ones((2, 3)))
        save_forecast(res, tmp_path / "f.csv", write_meta=False)
        lines = (tmp_path / "f.csv").read_text().splitlines()
        assert lines[0] == "coord,step,mean,lower,upper"
        assert len(lines) == 7
        assert lines[1].split(",")[:2] == ["0", "1"] and lines[-1].split(",")[:2] == ["1", "3"]
        assert not (tmp_path / "f.csv.json").exists()
        assert load_forecast(tmp_path / "f.csv").level == 0.95

    def test_incomplete_grid(self, tmp_path):
        (tmp_path / "f.csv").write_text("coord,step,mean,lower,upper\n0,1,0,0,0\n1,2,0,0,0\n")
        with pytest.raises(DataFormatError, match="grid"):
            load_forecast(tmp_path / "f.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "f.csv").write_text("a,b\n")
        with pytest.raises(DataFormatError):
            load_forecast(tmp_path / "f.csv")


class TestModelFiles:
    def test_ppgp(self, tmp_path, rng):
        X = rng.uniform(size=(15, 2))
        Y = np.column_stack([np.sin(3 * X[:, 0]), X[:, 1] ** 2]) + 0.01 * rng.normal(size=(15, 2))
        est = PPGPRegressor(structure="product").fit(X, Y)
        save_model(est, tmp_path / "m", extra={"lags": 1})
        back, extra = load_model(tmp_path / "m")
        assert extra == {"lags": 1}
        assert back.kernel_spec_ == est.kernel_spec_
        Xs = rng.uniform(size=(5, 2))
        np.testing.assert_array_equal(back.predict(Xs), est.predict(Xs))
        a = forecast_chains(est, Y[-1], 3, n_chains=5, seed=1)
        b = forecast_chains(back, Y[-1], 3, n_chains=5, seed=1)
        np.testing.assert_array_equal(a.samples, b.samples)

    @pytest.mark.filterwarnings("ignore::dynuq.dmd.UnstableSpectrumWarning")
    def test_dmd_family(self, tmp_path, rng):
        Y = rng.normal(size=(4, 30)).cumsum(axis=1)
        cases = [
            (fit_dmd(Y), lambda m: forecast_dmd_intervals(m, Y[:, -1], 5)),
            (fit_hodmd(Y, d=3, delta_t=2), lambda m: forecast_hodmd(m, Y[:, -3:], 5)),
            (fit_edmd(Y, "polynomial:2"), lambda m: forecast_edmd(m, Y[:, -1], 5)),
        ]
        for i, (model, fc) in enumerate(cases):
            save_model(model, tmp_path / str(i))
            back, _ = load_model(tmp_path / str(i))
            a, b = fc(model), fc(back)
            np.testing.assert_array_equal(a.mean, b.mean)
            np.testing.assert_array_equal(a.upper, b.upper)

    def test_rbf_dictionary(self, tmp_path, rng):
        Y = rng.normal(size=(2, 20))
        write_matrix(tmp_path / "c.csv", Y[:, :3])
        from dynuq.dmd import Dictionary

        dic = Dictionary.parse(f"rbf:{tmp_path / 'c.csv'}:0.7", loader=read_matrix)
        model = fit_edmd(Y, dic)
        save_model(model, tmp_path / "m")
        back, _ = load_model(tmp_path / "m")
        np.testing.assert_array_equal(back.dictionary.centers, Y[:, :3])
        np.testing.assert_array_equal(forecast_edmd(back, Y[:, -1], 2).mean,
                                      forecast_edmd(model, Y[:, -1], 2).mean)

    def test_unknown_kind(self, tmp_path):
        (tmp_path / "model.json").write_text('{"kind": "svm"}')
        with pytest.raises(DataFormatError):
            load_model(tmp_path)

    def test_unsupported_object(self, tmp_path):
        with pytest.raises(TypeError):
            save_model(object(), tmp_path)
