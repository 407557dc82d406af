import csv

import numpy as np
import pytest

from motiongen.data import MotionSequence
from motiongen.errors import DomainError
from motiongen.plots import render_metrics, render_trajectories


def test_trajectories_outputs(tmp_path):
    motion = MotionSequence(np.random.default_rng(0).standard_normal((20, 4)), source_id="clip")
    png, csv_path = render_trajectories(motion, [0, 2], tmp_path, stem="clip")
    assert png.exists() and png.stat().st_size > 0
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["frame", "dim_0", "dim_2"]
    assert len(rows) == 21  # header + one row per frame


def test_trajectories_bad_dim(tmp_path):
    motion = MotionSequence(np.zeros((5, 3)))
    with pytest.raises(DomainError):
        render_trajectories(motion, [3], tmp_path)


def test_metrics_outputs(tmp_path):
    png, csv_path = render_metrics({"fid": 0.5, "recon": 1.25}, tmp_path)
    assert png.exists()
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["metric", "value"]
    values = {name: float(v) for name, v in rows[1:]}
    assert values == {"fid": 0.5, "recon": 1.25}


def test_csv_values_round_trip_exactly(tmp_path):
    value = 0.123456789123456789
    _, csv_path = render_metrics({"x": value}, tmp_path)
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert float(rows[1][1]) == float(value)
