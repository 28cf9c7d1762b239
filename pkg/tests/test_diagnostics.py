import math

import numpy as np
import pytest

from fedvg.data import make_blobs
from fedvg.diagnostics import (
    AblationConfig,
    ablation_clients,
    audit_suite,
    balanced_client_ablation,
    fisher_audit,
    fit_to_interpolation,
    grad_audit,
    linear_topology,
    per_sample_losses,
    random_dataset,
    relative_errors,
)
from fedvg.models import build_mlp, build_tiny_cnn
from fedvg.nn import LayeredParams


def test_relative_errors_floor():
    a = np.array([1.0, 0.0, 2.0])
    n = np.array([1.1, 1e-12, 2.0])
    assert relative_errors(a, n) == pytest.approx([0.1 / 1.1, 0.0, 0.0])


@pytest.mark.parametrize("seed", range(3))
def test_grad_audit_linear(seed):
    rep = grad_audit(linear_topology(5, 4), seed, 1e-6)
    assert rep.passed and rep.num_params == 24


def test_grad_audit_mlp_and_cnn():
    assert grad_audit(build_mlp(4, [8], 3, 0)[0], 0).passed
    assert grad_audit(build_tiny_cnn((12, 12, 1), 3, 0)[0], 0, batch=2).passed


def test_grad_audit_detects_fault():
    rep = grad_audit(build_mlp(4, [8], 3, 0)[0], 0, inject_fault=True)
    assert not rep.passed and rep.max_rel_error > 1e-4


def test_grad_audit_deterministic():
    topo = build_mlp(4, [8], 3, 0)[0]
    assert grad_audit(topo, 5) == grad_audit(topo, 5)


def test_fisher_audit_identity():
    topo, _ = build_mlp(3, [6], 3, 0)
    rep = fisher_audit(topo, random_dataset(10, (3,), 3, 1), seed=2)
    assert rep.passed and rep.max_rel_error < 1e-9
    assert rep.max_fisher_entry <= rep.max_sample_grad_norm ** 2


def test_fisher_audit_zero_gradients():
    topo, p = build_mlp(2, [], 2, 0)
    zero = LayeredParams([("head", [np.zeros((2, 2)), np.zeros(2)])])
    ds = random_dataset(4, (2,), 2, 0)
    ds.features[:] = 0.0
    rep = fisher_audit(topo, ds, params=zero)
    # symmetric labels at the uniform predictor: per-sample gradients are non-zero, the mean is zero
    assert rep.passed and rep.trace > 0


def test_interpolation():
    topo, _ = build_mlp(4, [8], 3, 0)
    ds = random_dataset(4, (4,), 3, 0)
    params = fit_to_interpolation(topo, ds, 0)
    assert per_sample_losses(params, topo, ds).max() < 1e-8
    rep = fisher_audit(topo, ds, params=params, max_entry_bound=1e-6)
    assert rep.passed and rep.max_fisher_entry < 1e-6


def test_audit_suite_names():
    reports = audit_suite()
    assert [r.name for r in reports] == ["grad_linear", "grad_mlp", "grad_cnn", "fisher_mlp", "fisher_interpolating"]
    assert all(r.passed for r in reports)


class TestAblation:
    cfg = AblationConfig(rounds=4, samples_per_client=50, norms=("l1", "delta"))

    def test_clients(self):
        data = ablation_clients(self.cfg)
        assert len(data.clients) == 10
        assert all(len(c) == 50 for c in data.clients)
        assert list(data.clients[0].class_counts()) == [10] * 5
        # heterogeneous clients are far from uniform on average
        skew = [np.abs(c.class_counts() / 50 - 0.2).sum() / 2 for c in data.clients[1:]]
        assert np.mean(skew) > 0.3

    def test_traces(self):
        res = balanced_client_ablation(self.cfg)
        assert len(res.traces) == 4 * 2 * 10
        for norm in self.cfg.norms:
            for t in range(1, 5):
                row = [w for (r, n, _, w) in res.traces if r == t and n == norm]
                assert math.fsum(row) == pytest.approx(1.0, abs=1e-12)
            assert math.fsum(res.final_mean_weights[norm].values()) == pytest.approx(1.0, abs=1e-12)

    def test_deterministic(self):
        assert balanced_client_ablation(self.cfg).traces == balanced_client_ablation(self.cfg).traces

    @pytest.mark.slow
    def test_all_balanced_symmetry(self):
        for seed in range(5):
            cfg = AblationConfig(all_balanced=True, seed=seed, rounds=20)
            res = balanced_client_ablation(cfg)
            for norm, w in res.final_mean_weights.items():
                assert max(w.values()) - 0.1 <= 0.05, (seed, norm)
