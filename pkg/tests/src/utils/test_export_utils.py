import numpy as np
import pandas as pd

from ode_cpd.src.observations import ObservationSet
from ode_cpd.src.utils.export_utils import (
    get_artifact_path,
    parse_header,
    read_csv,
    read_json,
    read_observations,
    read_yaml,
    write_csv,
    write_json,
    write_observations,
    write_yaml,
)


def test_write_csv_format(tmp_path):
    df = pd.DataFrame({"t": [0.0, 1.0], "x": [1.5, np.nan]})
    path = write_csv(df, str(tmp_path / "a.csv"), "abc123", 7)

    with open(path, "rb") as fp:
        raw = fp.read()

    assert b"\r\n" not in raw
    assert raw.decode("utf-8").splitlines() == [
        "# config_hash=abc123 seed=7",
        "t,x",
        "0.0,1.5",
        "1.0,",
    ]


def test_read_csv_returns_header(tmp_path):
    df = pd.DataFrame({"t": [0.0, 1.0], "x": [1.5, np.nan]})
    path = write_csv(df, str(tmp_path / "a.csv"), "abc123", 7)

    loaded, header = read_csv(path)

    assert header == {"config_hash": "abc123", "seed": "7"}
    assert list(loaded.columns) == ["t", "x"]
    assert np.isnan(loaded["x"].iloc[1])


def test_parse_header():
    assert parse_header("t,x") == {}
    assert parse_header("# seed=3 note") == {"seed": "3"}


def test_observations_file(tmp_path):
    obs = ObservationSet(
        [0.0, 0.5, 1.0], [[1.0, np.nan], [2.0, 3.0], [np.nan, 4.0]], ("S", "I")
    )
    path = str(tmp_path / "observations.csv")

    write_observations(obs, path, "h", 1)
    loaded = read_observations(path)

    assert loaded.component_names == ("S", "I")
    np.testing.assert_array_equal(loaded.times, obs.times)
    np.testing.assert_array_equal(loaded.mask, obs.mask)
    np.testing.assert_allclose(loaded.values[obs.mask], obs.values[obs.mask])


def test_yaml_and_json_hold_numpy_values(tmp_path):
    content = {"truth": np.array([20, 40]), "rate": np.float64(0.5), "ok": True}

    write_yaml(str(tmp_path / "truth.yaml"), content)
    write_json(str(tmp_path / "report.json"), content)

    expected = {"truth": [20, 40], "rate": 0.5, "ok": True}
    assert read_yaml(str(tmp_path / "truth.yaml")) == expected
    assert read_json(str(tmp_path / "report.json")) == expected


def test_artifact_paths():
    assert get_artifact_path("out", "detections").endswith("detections.csv")
    assert get_artifact_path("out", "samples").endswith("samples.parquet")
