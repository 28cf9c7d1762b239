import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedvg.aggregation import Strategy
from fedvg.errors import ConfigError, NumericError
from fedvg.federated import (
    ExperimentConfig,
    local_train,
    num_sampled,
    prepare_data,
    run_experiment,
    sample_clients,
)
from fedvg.models import build_mlp

SMALL = ExperimentConfig(samples_per_class=40, num_clients=4, join_ratio=0.5, rounds=3, local_epochs=1, alpha=1.0)


def same_records(a, b):
    return all(
        ra.sampled == rb.sampled and ra.scores == rb.scores and ra.val_loss == rb.val_loss
        and ra.test_acc == rb.test_acc
        for ra, rb in zip(a.records, b.records)
    ) and a.final_params.equals(b.final_params)


class TestSampling:
    @pytest.mark.parametrize("k,p,m", [(10, 0.1, 1), (10, 0.3, 3), (10, 0.25, 3), (7, 1.0, 7), (3, 0.01, 1)])
    def test_count(self, k, p, m):
        assert num_sampled(k, p) == m

    @given(st.integers(1, 50), st.floats(0.01, 1.0), st.integers(0, 1000), st.integers(1, 200))
    def test_distinct_sorted_deterministic(self, k, p, seed, t):
        s = sample_clients(k, p, seed, t)
        assert s == sorted(set(s)) and len(s) == num_sampled(k, p)
        assert all(0 <= c < k for c in s)
        assert s == sample_clients(k, p, seed, t)

    def test_full_participation(self):
        assert sample_clients(5, 1.0, 0, 1) == [0, 1, 2, 3, 4]


class TestLocalTrain:
    def test_zero_epochs_is_identity(self):
        cfg = replace(SMALL, local_epochs=0)
        data = prepare_data(cfg)
        topo, p = build_mlp(8, [16], 5, 0)
        theta, up = local_train(p, topo, data.clients[0], cfg, Strategy.FEDAVG, None, 0, 1)
        assert theta.equals(p) and not up.delta.flat().any()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_abort(self):
        cfg = replace(SMALL, lr=1e300)
        with pytest.raises(NumericError):
            run_experiment(cfg)


class TestRun:
    def test_records(self):
        res = run_experiment(SMALL)
        assert [r.round for r in res.records] == [1, 2, 3]
        for r in res.records:
            assert len(r.sampled) == 2
            assert math.fsum(r.scores.values()) == pytest.approx(1.0, abs=1e-12)
        assert res.best_acc == max(r.test_acc for r in res.records)
        assert res.records[res.best_round - 1].test_acc == res.best_acc

    def test_deterministic(self):
        assert same_records(run_experiment(SMALL), run_experiment(SMALL))

    def test_threads_do_not_change_results(self):
        assert same_records(run_experiment(SMALL), run_experiment(replace(SMALL, threads=3)))

    @pytest.mark.parametrize("strategy", ["fedavg", "fedavgm", "fedprox", "scaffold", "feddyn", "fedvg",
                                          "fedprox+fedvg"])
    def test_strategies_run(self, strategy):
        res = run_experiment(replace(SMALL, strategy=strategy))
        assert all(np.isfinite(r.val_loss) for r in res.records)

    @pytest.mark.parametrize("gran", ["layerwise", "blockwise"])
    def test_granularities(self, gran):
        res = run_experiment(replace(SMALL, granularity=gran, strategy="scaffold+fedvg"))
        assert len(res.records) == 3

    def test_cnn(self):
        cfg = replace(SMALL, model="cnn", feature_dim=100, image_shape=(10, 10, 1), rounds=2)
        assert len(run_experiment(cfg).records) == 2

    def test_imbalanced_validation(self):
        assert len(run_experiment(replace(SMALL, imbalance_rho=0.5, samples_per_class=80)).records) == 3

    def test_csv_dataset(self, tmp_path):
        r = np.random.default_rng(0)
        rows = ["a,b,label"] + [f"{r.normal()},{r.normal()},{i % 3}" for i in range(120)]
        path = tmp_path / "d.csv"
        path.write_text("\n".join(rows) + "\n")
        cfg = replace(SMALL, dataset="csv", csv_path=str(path), num_classes=3, feature_dim=2)
        assert len(run_experiment(cfg).records) == 3

    def test_rounds_override(self):
        assert len(run_experiment(SMALL, rounds=1).records) == 1

    def test_callback_sees_clients(self):
        seen = []
        run_experiment(SMALL, callback=lambda ctx: seen.append((ctx.round, sorted(ctx.client_params))))
        assert [s[0] for s in seen] == [1, 2, 3] and all(len(s[1]) == 2 for s in seen)


class TestValidation:
    @pytest.mark.parametrize("field,value", [
        ("join_ratio", 0.0), ("join_ratio", 1.5), ("alpha", 0.0), ("strategy", "nope"), ("norm", "l3"),
        ("rounds", 0), ("model", "resnet"), ("momentum", 1.0), ("local_epochs", -1),
    ])
    def test_rejects(self, field, value):
        with pytest.raises(ConfigError, match=field):
            replace(SMALL, **{field: value}).validate()

    def test_fedvg_needs_validation(self):
        with pytest.raises(ConfigError, match="val_frac"):
            replace(SMALL, val_frac=0.0).validate()
        replace(SMALL, val_frac=0.0, strategy="fedavg").validate()
