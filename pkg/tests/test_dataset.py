import csv
import struct

import numpy as np
import pytest

from backstep import dataset as kds
from backstep.dataset import (
    ChecksumError,
    DatasetFormatError,
    TruncatedFileError,
    VersionMismatchError,
    generate,
    load,
    reconstruct_sample,
    save,
)


@pytest.fixture(scope="module")
def small():
    return generate(n_runs=3, T=1.0, seed=7)


@pytest.fixture
def saved(tmp_path, small):
    path = tmp_path / "d.kds"
    save(small, path)
    return path


def test_sample_count_and_layout(small):
    assert len(small) == 3 * 100
    assert small.beta_hat.shape == (300, 101)
    assert small.kernels.shape == (300, 101)
    assert set(small.run_ids.tolist()) == {0, 1, 2}
    assert np.all((small.sigmas >= 2.7) & (small.sigmas <= 3.2))
    assert not small.blown.any()
    np.testing.assert_allclose(small.times[:100], np.arange(100) * 0.01, atol=1e-12)
    assert len(set(small.keys())) == len(small)


def test_first_sample_is_initial_estimate(small):
    np.testing.assert_array_equal(small.beta_hat[0], 1.0)
    np.testing.assert_allclose(small.kernels[0], -np.exp(small.sensors), atol=0.03)


def test_kernels_satisfy_volterra(small):
    assert small.residual_check(fraction=0.05, seed=1) <= 1.0


def test_save_load_bitwise(tmp_path, small, saved):
    back = load(saved)
    for name in ("sensors", "beta_hat", "kernels", "run_ids", "sigmas", "times", "blown"):
        np.testing.assert_array_equal(getattr(back, name), getattr(small, name))
    assert (back.seed, back.dx, back.gamma, back.B) == (7, small.dx, small.gamma, small.B)
    again = tmp_path / "again.kds"
    save(back, again)
    assert again.read_bytes() == saved.read_bytes()


def test_generation_is_reproducible(tmp_path, saved):
    other = tmp_path / "other.kds"
    save(generate(n_runs=3, T=1.0, seed=7), other)
    assert other.read_bytes() == saved.read_bytes()
    different = tmp_path / "different.kds"
    save(generate(n_runs=3, T=1.0, seed=8), different)
    assert different.read_bytes() != saved.read_bytes()


def test_process_pool_matches_serial(monkeypatch, small):
    monkeypatch.setenv("BACKSTEP_NO_THREADS", "2")
    par = generate(n_runs=3, T=1.0, seed=7, workers=2)
    np.testing.assert_array_equal(par.kernels, small.kernels)
    np.testing.assert_array_equal(par.run_ids, small.run_ids)


def test_corruption_is_detected(tmp_path, saved):
    raw = bytearray(saved.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    bad = tmp_path / "flip.kds"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load(bad)


def test_version_mismatch(tmp_path, saved):
    raw = bytearray(saved.read_bytes())
    raw[4:6] = struct.pack("<H", 2)
    bad = tmp_path / "v2.kds"
    bad.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load(bad)


@pytest.mark.parametrize("keep", [10, 200, -4])
def test_truncation(tmp_path, saved, keep):
    bad = tmp_path / "short.kds"
    bad.write_bytes(saved.read_bytes()[:keep])
    with pytest.raises(TruncatedFileError):
        load(bad)


def test_bad_magic_and_trailing_bytes(tmp_path, saved):
    raw = saved.read_bytes()
    bad = tmp_path / "magic.kds"
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DatasetFormatError):
        load(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(DatasetFormatError):
        load(bad)


def test_provenance_reconstruction(small):
    for index in (0, 57, 250):
        bh, k = reconstruct_sample(small, index)
        np.testing.assert_allclose(bh, small.beta_hat[index], rtol=0, atol=1e-12)
        np.testing.assert_allclose(k, small.kernels[index], rtol=0, atol=1e-12)


def test_blown_runs_are_flagged(caplog):
    with caplog.at_level("WARNING"):
        ds = generate(n_runs=1, sigma_low=2.9, sigma_high=2.91, T=30.0, gamma=10.0)
    assert ds.blown.all()
    assert ds.times.max() < 30.0
    assert np.all(np.isfinite(ds.kernels))
    assert "blew up" in caplog.text


def test_argument_validation():
    with pytest.raises(ValueError):
        generate(n_runs=1, sigma_low=3.0, sigma_high=2.0)
    with pytest.raises(ValueError):
        generate(n_runs=1, T=0.0)
    with pytest.raises(ValueError):
        generate(n_runs=1, subsample=1e-4)


def test_export_csv(tmp_path, small):
    out = tmp_path / "d.csv"
    kds.export_csv(small, out)
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["run_id", "sigma", "t", "blown"]
    assert len(rows[0]) == 4 + 101 + 101
    assert len(rows) == 1 + len(small)
    np.testing.assert_array_equal(np.array(rows[5][4:105], float), small.beta_hat[4])
