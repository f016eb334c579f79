import numpy as np
import pytest

from volsr.kspace import DegradeConfig
from volsr.net import NetworkConfig, init_weights, zero_weights
from volsr.phantom import corpus_specs, generate
from volsr.sweep import FRACTIONS, SWEEP_FIELDS, read_sweep, run_sweep

DIMS = (64, 64, 32)
WINDOW = (48, 48)
NET = NetworkConfig(levels=2, base_channels=2)


@pytest.fixture(scope="module")
def clean_corpus():
    specs = corpus_specs(4, 2, dims=DIMS, noise_sigma=0.0, window=WINDOW)
    return [generate(s)[0] for s in specs]


@pytest.fixture(scope="module")
def report(clean_corpus):
    return run_sweep(NET, zero_weights(NET, np.float64), clean_corpus, grid=DIMS, window=WINDOW)


def test_schema(report, tmp_path):
    assert len(report.rows) == 10
    assert [r["fraction"] for r in report.rows] == list(FRACTIONS)
    report.write(tmp_path / "sweep.csv")
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].split(",") == SWEEP_FIELDS
    back = read_sweep(tmp_path / "sweep.csv")
    assert np.all(np.diff(back.column("fraction")) > 0)
    assert np.allclose(back.column("ssim_mean"), report.column("ssim_mean"), rtol=0, atol=0)
    # control cells exist only on the last row
    assert all(r["pf1_ssim_mean"] is None for r in back.rows[:-1])
    assert back.rows[-1]["pf1_ssim_mean"] is not None


def test_full_sampling_control_is_identity(report):
    last = report.rows[-1]
    assert abs(last["pf1_lr_ssim_mean"] - 1.0) < 1e-12
    assert last["pf1_lr_mse_mean"] < 1e-24


def test_lr_ssim_non_decreasing_without_noise(report):
    lr = report.column("lr_ssim_mean")
    assert np.all(np.diff(lr) >= -1e-12), lr


def test_zero_weight_net_is_relu_of_input(report):
    # inputs are min-max normalised, so ReLU leaves them unchanged
    assert np.allclose(report.column("ssim_mean"), report.column("lr_ssim_mean"), atol=1e-12)


def test_best_fraction_ties_go_first():
    from volsr.sweep import SweepReport
    rows = [{"fraction": f, "ssim_mean": s} for f, s in ((0.1, 0.2), (0.2, 0.9), (0.3, 0.9))]
    assert SweepReport(rows).best_fraction() == 0.2


def test_bad_inputs(clean_corpus):
    p = init_weights(NET, 0, np.float64)
    with pytest.raises(ValueError):
        run_sweep(NET, p, [], grid=DIMS, window=WINDOW)
    with pytest.raises(ValueError):
        run_sweep(NET, p, clean_corpus, grid=DIMS, window=WINDOW, fractions=[0.5, 0.5])


def test_partial_fourier_held_at_base(clean_corpus, monkeypatch):
    import volsr.sweep as sw
    seen = []
    real = sw.make_training_pair

    def spy(hr, cfg, grid, window):
        seen.append(cfg)
        return real(hr, cfg, grid, window)

    monkeypatch.setattr(sw, "make_training_pair", spy)
    base = DegradeConfig(0.5, 0.5, 0.625, 0.625)
    run_sweep(NET, zero_weights(NET, np.float64), clean_corpus[:1], base, DIMS, WINDOW, fractions=(0.3, 1.0))
    assert [(c.frac_y, c.pf_y) for c in seen] == [(0.3, 0.625), (1.0, 0.625), (1.0, 1.0)]
