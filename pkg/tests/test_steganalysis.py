import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from app.errors import DetectorError, ShapeMismatchError
from app.models.graph import init_graph
from app.models.schemas import ArchSpec, DisguiseConfig, PoolConfig, TaskPair, TrainConfig, load_config
from app.steganalysis.detectors import DetectionResult, detector_layers, split_pairs, train_detector
from app.steganalysis.features import PLANTED_VALUE, histogram_feature, plant_signal
from app.steganalysis.pool import build_pool, detect, pool_cells, results_table
from tests.conftest import small_cnn, tiny_task

CONFIGS = Path(__file__).resolve().parent.parent / "data" / "configs"


def paired(negatives, positives):
    """Interleaved (cover, stego) rows with their labels."""
    features = np.empty((2 * len(negatives), negatives.shape[1]))
    features[0::2], features[1::2] = negatives, positives
    return features, np.tile([0, 1], len(negatives))


def pair_rows(pairs):
    return np.concatenate([2 * pairs, 2 * pairs + 1])


class TestHistogram:
    def test_constant_is_one_hot(self):
        feature = histogram_feature(np.full(50, 0.25, dtype=np.float32), bins=10)
        assert feature.tolist() == [1.0] + [0.0] * 9

    def test_normalized(self, small_graph):
        feature = histogram_feature(small_graph)
        assert feature.shape == (100,)
        assert feature.sum() == pytest.approx(1.0)

    @given(values=arrays(np.float32, st.integers(2, 200), elements=st.floats(-10, 10, width=32)),
           seed=st.integers(0, 2 ** 16))
    def test_permutation_invariant(self, values, seed):
        shuffled = np.random.default_rng(seed).permutation(values)
        np.testing.assert_array_equal(histogram_feature(values, 16), histogram_feature(shuffled, 16))

    def test_uniform_values_fill_bins_evenly(self):
        values = np.random.default_rng(0).uniform(-1, 1, size=100_000)
        feature = histogram_feature(values, bins=20)
        sigma = math.sqrt(0.05 * 0.95 / values.size)
        assert np.all(np.abs(feature - 0.05) < 5 * sigma)

    def test_empty(self):
        with pytest.raises(ShapeMismatchError):
            histogram_feature(np.zeros(0))

    def test_plant_signal(self, small_graph):
        planted = plant_signal(small_graph, np.random.default_rng(0), index=5)
        assert planted.params[5] == PLANTED_VALUE
        assert small_graph.params[5] != PLANTED_VALUE
        assert np.sum(planted.params != small_graph.params) == 1


class TestDetectors:
    def test_split_pairs(self):
        train, test = split_pairs(10, 0.8, 0)
        assert len(train) == 8 and len(test) == 2
        assert sorted(np.concatenate([train, test]).tolist()) == list(range(10))
        again = split_pairs(10, 0.8, 0)
        np.testing.assert_array_equal(train, again[0])

    def test_split_keeps_both_sides(self):
        train, test = split_pairs(3, 0.99, 1)
        assert len(train) == 2 and len(test) == 1

    def test_planted_signal_is_found(self):
        rng = np.random.default_rng(3)
        graphs = [init_graph(small_cnn(), rng) for _ in range(20)]
        covers = np.stack([histogram_feature(g) for g in graphs])
        planted = np.stack([histogram_feature(plant_signal(g, rng)) for g in graphs])
        features, labels = paired(covers, planted)
        train, test = split_pairs(20, 0.8, 0)
        for kind in ("linear", "mlp"):
            result = train_detector(features, labels, kind, pair_rows(train), pair_rows(test), epochs=100)
            assert result.accuracy >= 0.95

    def test_identical_features_are_chance(self):
        features, labels = paired(np.ones((12, 5)), np.ones((12, 5)))
        train, test = split_pairs(12, 0.75, 0)
        result = train_detector(features, labels, "linear", pair_rows(train), pair_rows(test), epochs=20)
        assert result.accuracy == 0.5 and result.p_e == 0.5

    def test_too_few_pairs(self):
        features, labels = paired(np.zeros((6, 3)), np.ones((6, 3)))
        train, test = split_pairs(6, 0.8, 0)
        with pytest.raises(DetectorError):
            train_detector(features, labels, "linear", pair_rows(train), pair_rows(test))

    def test_unknown_kind(self):
        with pytest.raises(DetectorError):
            detector_layers("svm", 10)

    def test_mlp_shape(self):
        layers = detector_layers("mlp", 100)
        assert [spec.kind for spec in layers] == ["dense", "relu", "dense"]
        assert layers[0].out_width == 64 and layers[2].out_width == 2

    def test_p_e(self):
        assert DetectionResult(0.75, 0.5, 0.0).p_e == 0.25


def tiny_pool(**overrides) -> PoolConfig:
    fields = dict(
        task_pairs=[TaskPair(secret=tiny_task("blobs", classes=3, seed=3), stego=tiny_task("textures", classes=4))],
        architectures=[ArchSpec(layers=small_cnn())],
        seeds=[1, 2],
        key=99,
        train=TrainConfig(epochs=1, batch_size=16),
        disguise=DisguiseConfig(tau_se=2.0, tau_st=math.inf, epochs_secret=1, epochs_stego=1, grad_batches=1),
        bins=20,
    )
    fields.update(overrides)
    return PoolConfig(**fields)


class TestPool:
    def test_cells(self):
        cfg = tiny_pool(architectures=[ArchSpec(layers=small_cnn()), ArchSpec(layers=small_cnn(5))],
                        seeds=[1, 2])
        cfg.task_pairs.append(cfg.task_pairs[0])
        assert len(pool_cells(cfg)) == 8

    def test_build_pool(self):
        cfg = tiny_pool()
        pool = build_pool(cfg, workers=1, progress=False)
        assert len(pool.members) == 4
        assert all(m.ok for m in pool.members)
        assert pool.failed_cells == 0
        assert len(pool.features) == 6
        assert sorted(pool.features["label"].unique().tolist()) == ["cover", "planted", "stego"]
        sums = pool.features[[f"f{k}" for k in range(20)]].sum(axis=1)
        np.testing.assert_allclose(sums, 1.0)
        # two pairs cannot train a detector
        with pytest.raises(DetectorError):
            detect(cfg, pool)

    def test_failed_cell_is_reported(self):
        # a stego task with a different input size fails every cell
        bad = TaskPair(secret=tiny_task("blobs", classes=3, seed=3), stego=tiny_task("textures", height=10))
        pool = build_pool(tiny_pool(task_pairs=[bad], seeds=[1]), workers=1, progress=False)
        assert pool.failed_cells == 1
        assert all(not m.ok and m.error.startswith("config_error") for m in pool.members)
        assert pool.features.empty


@pytest.mark.slow
def test_shipped_pool_audit():
    cfg = load_config(CONFIGS / "pool.json", PoolConfig)
    pool = build_pool(cfg, workers=2, progress=False)
    assert (pool.features["label"] == "cover").sum() >= 20
    assert (pool.features["label"] == "stego").sum() >= 20
    report = detect(cfg, pool, sanity=True)

    protocol = [r for r in report.results if r.pool == "protocol"]
    assert sorted(r.detector for r in protocol) == ["linear", "mlp"]
    assert all(0.40 <= r.accuracy <= 0.60 for r in protocol)

    sanity = [r for r in report.results if r.pool == "sanity"]
    assert len(sanity) == 2
    assert all(r.accuracy >= 0.95 for r in sanity)
    assert "p_e" in results_table(report)
