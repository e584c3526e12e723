import json

import numpy as np
import pytest
import torch

from errors import ConfigurationError, UnsupportedDimensionError
from exports import (
    FORMAT_VERSION,
    MetricsWriter,
    export_kde_grid,
    kde_grid,
    read_metrics,
    read_samples_csv,
    write_json_report,
    write_manifest,
    write_samples_csv,
)
from numerics import DTYPE, derive_generator
from targets import gmm_target

pytestmark = pytest.mark.unit


def test_samples_csv_has_header_and_one_row_per_sample(tmp_path):
    """Samples round-trip through CSV with full float64 precision."""
    samples = torch.tensor([[0.1, 1.0 / 3.0], [-2.5, 1e-17], [3.0, 4.0], [np.pi, -np.e]], dtype=DTYPE)

    path = write_samples_csv(samples, tmp_path / "out" / "samples.csv")
    lines = path.read_text().splitlines()

    assert len(lines) == 5
    assert lines[0] == "x0,x1"
    assert torch.equal(read_samples_csv(path), samples)


def test_reading_a_foreign_csv_fails(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n")

    with pytest.raises(ConfigurationError):
        read_samples_csv(path)


def test_single_sample_density_peaks_at_its_location():
    grid = kde_grid(torch.zeros(1, 2, dtype=DTYPE), (-4, 4, -4, 4), 21)

    peak = grid.loc[grid["density"].idxmax()]

    assert len(grid) == 21 * 21
    assert peak["x"] == pytest.approx(0.0, abs=1e-12)
    assert peak["y"] == pytest.approx(0.0, abs=1e-12)


def test_gmm_samples_show_nine_modes():
    """The KDE of exact GMM draws has nine strong local maxima."""
    samples = gmm_target().exact_sampler(5000, derive_generator(0, "exact"))
    grid = kde_grid(samples, (-8, 8, -8, 8), 61)
    density = grid["density"].to_numpy().reshape(61, 61)

    padded = np.pad(density, 1, constant_values=-np.inf)
    neighbours = np.stack(
        [padded[1 + di : 62 + di, 1 + dj : 62 + dj] for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    )
    peaks = (density > neighbours.max(axis=0)) & (density >= 0.5 * density.max())

    assert int(peaks.sum()) == 9


def test_kde_rejects_bad_input():
    with pytest.raises(UnsupportedDimensionError):
        kde_grid(torch.zeros(5, 3, dtype=DTYPE), (-1, 1, -1, 1), 10)
    with pytest.raises(ConfigurationError):
        kde_grid(torch.zeros(0, 2, dtype=DTYPE), (-1, 1, -1, 1), 10)
    with pytest.raises(ConfigurationError):
        kde_grid(torch.zeros(5, 2, dtype=DTYPE), (-1, 1), 10)


def test_export_kde_grid_writes_csv(tmp_path):
    samples = torch.randn(50, 2, generator=torch.Generator().manual_seed(0), dtype=DTYPE)

    path = export_kde_grid(samples, (-3, 3, -3, 3), 5, tmp_path / "kde.csv")

    assert path.read_text().splitlines()[0] == "x,y,density"


def test_metrics_writer_appends_versioned_records(tmp_path):
    writer = MetricsWriter(tmp_path / "metrics.jsonl")
    writer({"step": 0, "loss": 1.5})
    writer({"step": 1, "loss": torch.tensor(0.5, dtype=DTYPE)})

    records = read_metrics(tmp_path / "metrics.jsonl")

    assert [r["step"] for r in records] == [0, 1]
    assert records[1]["loss"] == 0.5
    assert all(r["format_version"] == FORMAT_VERSION for r in records)


def test_metrics_writer_truncates_an_existing_file(tmp_path):
    path = tmp_path / "metrics.jsonl"
    path.write_text('{"old": true}\n')

    MetricsWriter(path)

    assert read_metrics(path) == []


def test_json_report_serializes_arrays(tmp_path):
    path = write_json_report(tmp_path / "report.json", {"values": np.array([1.0, 2.0])})

    assert json.loads(path.read_text())["values"] == [1.0, 2.0]


def test_manifest_records_versions_and_digest(tmp_path):
    """The manifest carries the command, settings, digest and library versions."""
    path = write_manifest(tmp_path, "sample", {"seed": 3}, "ab" * 32, {"samples": "samples.csv"})
    manifest = json.loads(path.read_text())

    assert path.name == "manifest.json"
    assert manifest["command"] == "sample"
    assert manifest["checkpoint_sha256"] == "ab" * 32
    assert manifest["config"] == {"seed": 3}
    assert {"python", "torch", "numpy", "scipy", "pandas"} <= set(manifest["versions"])
