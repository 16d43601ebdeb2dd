import numpy as np
import pytest

from unrolled_lrp import checks


def small(**kw):
    kw.setdefault("seeds", 2)
    kw.setdefault("presets", ("vgg-mini",))
    kw.setdefault("width", 3)
    kw.setdefault("size", 8)
    kw.setdefault("batch", 3)
    kw.setdefault("fd_samples", 8)
    return checks.SuiteConfig(**kw)


@pytest.fixture(scope="module")
def exact_rows():
    return checks.run_suite(small())


def test_exact_suite_passes(exact_rows):
    assert checks.failures(exact_rows) == []
    names = {r.check for r in exact_rows if r.status != "info"}
    assert {"decoder_vs_reference", "input_times_gradient", "conservation", "partition_exact",
            "partition_smoothed_count", "fd_layers", "fd_seg_loss", "fd_cls_loss", "fd_heatmap_loss"} <= names


def test_rows_per_class(exact_rows):
    per_class = [r for r in exact_rows if r.check == "conservation"]
    assert sorted((r.seed, r.class_id) for r in per_class) == [(s, c) for s in range(2) for c in range(5)]


def test_unflipped_fault_fails_decoder_rows():
    rows = checks.run_suite(small(seeds=1, fault="unflipped-kernels"))
    failed = {r.check for r in checks.failures(rows)}
    assert "decoder_vs_reference" in failed


def test_epsilon_mode_reports_conservation():
    rows = checks.run_suite(small(seeds=1, epsilon=1e-2))
    cons = [r for r in rows if r.check == "conservation"]
    assert cons and all(r.status == "info" for r in cons)
    assert max(r.value for r in cons) > 1e-6
    assert checks.failures(rows) == []


def test_unknown_fault():
    with pytest.raises(ValueError):
        checks.run_suite(small(fault="bitflip"))


def test_fd_check_excludes_kinks():
    x = {"x": np.array([0.0, 1.0])}

    def f():
        return float(np.maximum(x["x"], 0).sum())

    def pattern():
        return [x["x"] > 0]

    rng = np.random.default_rng(0)
    err, checked, excluded = checks.fd_check(f, {"x": np.array([0.0, 1.0])}, x, pattern, pattern(), 2, rng)
    assert (checked, excluded) == (1, 1) and err < 1e-9


def test_fd_check_catches_wrong_gradient():
    x = {"x": np.array([2.0, 3.0])}
    err, _, _ = checks.fd_check(lambda: float((x["x"] ** 2).sum()), {"x": np.array([4.0, 5.0])}, x,
                                lambda: [], [], 2, np.random.default_rng(0))
    assert err > 1e-2


def test_write_rows(tmp_path, exact_rows):
    path = checks.write_rows(exact_rows, tmp_path / "c.csv")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("seed,preset,epsilon,check,class_id,value")
    assert len(lines) == len(exact_rows) + 1
