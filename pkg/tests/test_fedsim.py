import numpy as np
import pytest

from s2wef.attacks import AttackParams
from s2wef.errors import ConfigurationError
from s2wef.fedsim import (
    DatasetParams,
    SimConfig,
    aggregate_fedavg,
    compute_metrics,
    make_dataset,
    partition_dirichlet,
    partition_iid,
    run_simulation,
    run_trial,
    schedule_scenario1,
    schedule_scenario2,
)
from s2wef.nn import TrainConfig, init_model


def small_cfg(**overrides):
    defaults = dict(
        clients=5,
        free_rider_ratio=0.2,
        scenario="S1",
        attack=AttackParams(kind="DWA"),
        rounds=4,
        train=TrainConfig(learning_rate=0.1, batch_size=8, local_iterations=3),
        detector="S2WEF",
        seeds=(1,),
        dataset=DatasetParams(samples=300, features=8, classes=4, spread=0.3),
        hidden_layers=(32,),
    )
    defaults.update(overrides)
    return SimConfig(**defaults)


# --- dataset and partitions --------------------------------------------------

def test_make_dataset_shapes_and_determinism():
    params = DatasetParams(samples=100, features=6, classes=3)
    a = make_dataset(params, seed=5)
    b = make_dataset(params, seed=5)
    assert a.features.shape == (100, 6)
    assert a.class_count == 3
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_make_dataset_two_class_centers_mirrored():
    params = DatasetParams(samples=2000, features=8, classes=2, spread=1e-6)
    data = make_dataset(params, seed=1)
    c0 = data.features[data.labels == 0].mean(axis=0)
    c1 = data.features[data.labels == 1].mean(axis=0)
    np.testing.assert_allclose(c0, -c1, atol=1e-3)
    assert np.linalg.norm(c0) == pytest.approx(1.0, abs=1e-3)


def test_partition_iid_single_client_gets_everything():
    data = make_dataset(DatasetParams(samples=100, features=4, classes=2), seed=0)
    shards = partition_iid(data, 1, seed=1)
    assert len(shards) == 1 and len(shards[0]) == 100


def test_partition_iid_equal_disjoint():
    data = make_dataset(DatasetParams(samples=1000, features=4, classes=2), seed=0)
    shards = partition_iid(data, 10, seed=3)
    assert all(len(s) == 100 for s in shards)
    seen = np.concatenate([s.features[:, 0] for s in shards])
    assert len(np.unique(seen)) == len(seen)  # continuous features: dupes would collide


def test_partition_iid_too_small():
    data = make_dataset(DatasetParams(samples=5, features=4, classes=2), seed=0)
    with pytest.raises(ConfigurationError):
        partition_iid(data, 6, seed=0)


def test_partition_dirichlet_nonempty_and_disjoint():
    data = make_dataset(DatasetParams(samples=400, features=4, classes=4), seed=0)
    for seed in range(5):
        shards = partition_dirichlet(data, 8, beta=0.5, seed=seed)
        assert all(len(s) > 0 for s in shards)
        assert sum(len(s) for s in shards) == 400


def test_partition_dirichlet_large_beta_approaches_iid():
    data = make_dataset(DatasetParams(samples=4000, features=4, classes=4), seed=0)
    global_props = np.bincount(data.labels, minlength=4) / len(data)
    for seed in range(3):
        shards = partition_dirichlet(data, 5, beta=1000.0, seed=seed)
        for shard in shards:
            props = np.bincount(shard.labels, minlength=4) / len(shard)
            assert np.abs(props - global_props).max() < 0.1


def test_partition_dirichlet_bad_beta():
    data = make_dataset(DatasetParams(samples=100, features=4, classes=2), seed=0)
    with pytest.raises(ConfigurationError):
        partition_dirichlet(data, 4, beta=0.0, seed=0)


# --- schedules ----------------------------------------------------------------

def test_scenario1_first_two_rounds_benign():
    table = schedule_scenario1(10, 0.3, 8, seed=4)
    assert not table[0].any() and not table[1].any()
    for t in range(2, 8):
        assert table[t].sum() == 3
        np.testing.assert_array_equal(table[t], table[2])  # same identities


def test_scenario1_zero_ratio():
    assert not schedule_scenario1(10, 0.0, 5, seed=1).any()


def test_scenario2_counts_and_variation():
    table = schedule_scenario2(10, 0.3, 30, seed=7)
    assert not table[0].any()
    assert all(table[t].sum() == 3 for t in range(1, 30))
    assert len({tuple(row) for row in table[1:]}) > 1  # identities vary


def test_schedule_rejects_non_integral_ratio():
    with pytest.raises(ConfigurationError):
        schedule_scenario1(10, 0.25, 5, seed=0)


def test_schedule_rejects_majority():
    with pytest.raises(ConfigurationError):
        schedule_scenario2(10, 0.5, 5, seed=0)


# --- aggregation ----------------------------------------------------------------

def test_aggregate_single_benign_verbatim():
    models = [init_model([3, 4, 2], seed=s) for s in range(3)]
    result = aggregate_fedavg(models, [1])
    np.testing.assert_array_equal(result.to_flat(), models[1].to_flat())


def test_aggregate_opposite_weights_cancel():
    m = init_model([3, 4, 2], seed=0)
    neg = m.from_flat(-m.to_flat())
    result = aggregate_fedavg([m, neg], [0, 1])
    np.testing.assert_allclose(result.to_flat(), 0.0, atol=1e-15)


def test_aggregate_matches_mean_oracle():
    models = [init_model([3, 4, 2], seed=s) for s in range(5)]
    kept = [0, 2, 3]
    result = aggregate_fedavg(models, kept)
    oracle = sum(models[i].to_flat() for i in kept) / len(kept)
    np.testing.assert_allclose(result.to_flat(), oracle, atol=1e-12)


def test_aggregate_empty_benign_falls_back_to_all():
    models = [init_model([3, 4, 2], seed=s) for s in range(3)]
    result = aggregate_fedavg(models, [])
    oracle = sum(m.to_flat() for m in models) / 3
    np.testing.assert_allclose(result.to_flat(), oracle, atol=1e-12)


# --- metrics ---------------------------------------------------------------------

def test_metrics_perfect():
    m = compute_metrics({3, 7}, {3, 7}, 10)
    assert (m.precision, m.recall, m.f1, m.fpr) == (1.0, 1.0, 1.0, 0.0)


def test_metrics_missed_everything():
    m = compute_metrics({3}, set(), 10)
    assert m.recall == 0.0 and m.f1 == 0.0


def test_metrics_hand_confusion():
    m = compute_metrics({1, 2, 3}, {2, 3, 4}, 10)
    assert m.precision == pytest.approx(2 / 3)
    assert m.recall == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(2 / 3)
    assert m.fpr == pytest.approx(1 / 7)


def test_metrics_all_negative_convention():
    m = compute_metrics(set(), set(), 10)
    assert (m.precision, m.recall, m.f1, m.fpr) == (1.0, 1.0, 1.0, 0.0)


def test_metrics_clean_round_fpr():
    m = compute_metrics(set(), {0, 4}, 10)
    assert m.fpr == pytest.approx(0.2)
    assert m.precision == 0.0


# --- config validation --------------------------------------------------------------

def test_config_rejects_majority_free_riders():
    with pytest.raises(ConfigurationError):
        small_cfg(free_rider_ratio=0.6)


def test_config_rejects_non_integral_count():
    with pytest.raises(ConfigurationError):
        small_cfg(free_rider_ratio=0.3)  # 0.3 * 5 clients = 1.5


def test_config_clean_requires_zero_ratio():
    with pytest.raises(ConfigurationError):
        small_cfg(scenario="CLEAN", free_rider_ratio=0.2)


def test_config_attack_required_with_free_riders():
    with pytest.raises(ConfigurationError):
        small_cfg(attack=None)


def test_config_detector_enum():
    with pytest.raises(ConfigurationError):
        small_cfg(detector="MAGIC")


# --- simulation end to end ------------------------------------------------------------

def test_run_trial_conservation_and_shapes():
    cfg = small_cfg()
    records = run_trial(cfg, 1, max_workers=1)
    assert len(records) == cfg.rounds
    for rec in records:
        assert rec.roles.shape == (cfg.clients,)
        assert len(rec.wefs) == cfg.clients
        assert len(rec.submission_digests) == cfg.clients
        assert rec.free_riders <= set(range(cfg.clients))


def test_round_zero_never_detects():
    records = run_trial(small_cfg(), 1, max_workers=1)
    assert records[0].free_riders == frozenset()
    assert not records[0].roles.any()


def test_exclusion_correctness():
    cfg = small_cfg(keep_submissions=True, rounds=5)
    records = run_trial(cfg, 3, max_workers=1)
    for rec in records:
        kept = sorted(set(range(cfg.clients)) - set(rec.free_riders))
        if not kept:
            kept = list(range(cfg.clients))
        oracle = np.stack([rec.submissions[i] for i in kept]).mean(axis=0)
        np.testing.assert_allclose(rec.aggregate_flat, oracle, atol=1e-12)


def test_simulation_deterministic_across_workers():
    from s2wef.trace import record_to_dict

    cfg = small_cfg()
    rep1 = run_simulation(cfg, max_workers=1)
    rep2 = run_simulation(cfg, max_workers=4)
    for seed in cfg.seeds:
        for a, b in zip(rep1.trials[seed], rep2.trials[seed]):
            assert record_to_dict(a) == record_to_dict(b)


def test_clean_with_detector_matches_fedavg_when_no_flags():
    cfg = small_cfg(scenario="CLEAN", free_rider_ratio=0.0, attack=None, rounds=4)
    with_det = run_simulation(cfg, max_workers=1)
    plain = run_simulation(small_cfg(scenario="CLEAN", free_rider_ratio=0.0, attack=None,
                                     rounds=4, detector="NONE"), max_workers=1)
    flags = sum(len(r.free_riders) for recs in with_det.trials.values() for r in recs)
    if flags == 0:
        for seed in cfg.seeds:
            for a, b in zip(with_det.trials[seed], plain.trials[seed]):
                assert a.accuracy == b.accuracy


def test_cluster_only_detector_flags_suspicious_on_k2():
    cfg = small_cfg(detector="CLUSTER_ONLY", rounds=5)
    records = run_trial(cfg, 1, max_workers=1)
    for rec in records[1:]:
        if rec.detection.cluster.k == 2:
            assert rec.free_riders == rec.detection.cluster.suspicious
        else:
            assert rec.free_riders == frozenset()


def test_metrics_report_means():
    cfg = small_cfg(rounds=5)
    rep = run_simulation(cfg, max_workers=1)
    f1 = rep.mean("f1", attack_only=True)
    assert 0.0 <= f1 <= 1.0
    assert 0.0 <= rep.mean("fpr") <= 1.0
    assert 0.0 <= rep.mean_final_accuracy() <= 1.0


def test_runtime_error_carries_context():
    cfg = small_cfg(train=TrainConfig(learning_rate=1e30, batch_size=8, local_iterations=3))
    with np.errstate(all="ignore"), pytest.raises(Exception) as excinfo:
        run_simulation(cfg, max_workers=1)
    msg = str(excinfo.value)
    assert "trial" in msg and "round" in msg
