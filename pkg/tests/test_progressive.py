"""
Progressive disguising on tiny tasks, and the full-size acceptance runs
(marked slow) on the shipped configs.
"""
import math
from pathlib import Path

import numpy as np
import pytest

from app.disguise.adaptation import added_param_count
from app.disguise.progressive import disguise_model, progressive_disguise, schedule
from app.errors import ConfigError, DisguiseError, IntegrityError
from app.models.adaptation import AdaptationMode
from app.models.graph import init_graph
from app.models.schemas import ArchSpec, DisguiseConfig, TaskSpec, TrainConfig, dump_json, load_config
from app.models.selection import extract_subnetwork
from app.models.serialization import dumps_model
from app.recovery import recover
from app.sideinfo.keyed import StegoKey
from app.tasks.datasets import make_dataset
from app.tasks.metrics import evaluate
from app.tasks.training import train_model
from tests.conftest import small_cnn, tiny_task

CONFIGS = Path(__file__).resolve().parent.parent / "data" / "configs"
KEY = StegoKey(0x5EC12E7)
ONE_SHOT = DisguiseConfig(tau_se=2.0, tau_st=math.inf, epochs_secret=1, epochs_stego=1, grad_batches=1, seed=0)


def assert_nested(report):
    """Every layer's kept filters shrink into the previous iteration's."""
    for before, after in zip(report.iterations, report.iterations[1:]):
        assert after.kept.keys() == before.kept.keys()
        for layer, kept in after.kept.items():
            assert set(kept) <= set(before.kept[layer])
        assert sum(map(len, after.kept.values())) < sum(map(len, before.kept.values()))


@pytest.fixture(scope="module")
def secret(blobs_data):
    return train_model(small_cnn(3), blobs_data, TrainConfig(epochs=2, seed=0))


@pytest.fixture(scope="module")
def one_shot(secret, blobs_data, textures_data):
    return progressive_disguise(secret, blobs_data, textures_data, ONE_SHOT)


class TestSingleIteration:
    def test_report(self, one_shot, secret):
        report = one_shot.report
        assert report.total_filters == 8 + 16
        assert len(report.iterations) == 1
        record = report.iterations[0]
        assert record.outcome == "break-success" and report.final_iteration == 1
        assert record.p == schedule(0.9, 24, 1) == 22
        assert sum(record.sizes.values()) == 22 + 3
        assert {k: len(v) for k, v in record.kept.items()} == record.sizes
        assert report.secret_metric == "acc" and report.stego_metric == "acc"
        assert report.adaptation["mode"] == "upsample"
        assert report.expansion_rate == pytest.approx(added_param_count(16, one_shot.adapt) / secret.num_params)

    def test_selection_nested_in_full(self, one_shot):
        sel = one_shot.selection
        assert sel.get(7) == {0, 1, 2}
        assert sel.total - 3 == 22

    def test_freeze_exactness(self, one_shot):
        sub = extract_subnetwork(one_shot.stego, one_shot.selection, one_shot.bn_stats, one_shot.adapt)
        assert sub.bit_equal(one_shot.tuned_secret)

    def test_cover_has_adapted_architecture(self, one_shot):
        assert one_shot.cover.layers == one_shot.stego.layers
        assert one_shot.stego.output_dim == 4


class TestEndToEnd:
    def test_recover_matches_tuned(self, secret, blobs_data, textures_data):
        stego, result = disguise_model(secret, blobs_data, textures_data, ONE_SHOT, KEY)
        recovered = recover(stego, KEY)
        tuned = result.tuned_secret
        assert recovered.layers == tuned.layers
        assert len(recovered.layers) == len(secret.layers)
        diff = np.abs(recovered.params.view(np.int32).astype(np.int64) - tuned.params.view(np.int32))
        assert diff.max() <= 1
        assert abs(evaluate(recovered, blobs_data) - evaluate(tuned, blobs_data)) <= 1 / 32
        with pytest.raises(IntegrityError):
            recover(stego, StegoKey(KEY.seed ^ 1))

    def test_deterministic(self, secret, blobs_data, textures_data):
        a_model, a = disguise_model(secret, blobs_data, textures_data, ONE_SHOT, KEY)
        b_model, b = disguise_model(secret, blobs_data, textures_data, ONE_SHOT, KEY)
        assert dumps_model(a_model) == dumps_model(b_model)
        assert dump_json(a.report) == dump_json(b.report)

    def test_hidden_extend(self, secret, blobs_data):
        stego_data = make_dataset(tiny_task("textures", classes=2, seed=8))
        stego, result = disguise_model(secret, blobs_data, stego_data, ONE_SHOT, KEY)
        assert result.adapt.mode == AdaptationMode.HIDDEN_EXTEND
        assert stego.output_dim == 2
        recovered = recover(stego, KEY)
        assert recovered.layers == result.tuned_secret.layers
        assert recovered.output_dim == secret.output_dim

    def test_supplied_cover(self, secret, blobs_data, textures_data, one_shot):
        result = progressive_disguise(secret, blobs_data, textures_data, ONE_SHOT, cover=one_shot.cover)
        assert result.report.stego_baseline == one_shot.report.stego_baseline


class TestStopping:
    def test_iteration_limit(self, secret, blobs_data, textures_data):
        cfg = ONE_SHOT.model_copy(update={"tau_st": -1.0, "max_iterations": 3})
        with pytest.raises(DisguiseError) as info:
            progressive_disguise(secret, blobs_data, textures_data, cfg)
        report = info.value.report
        assert [r.p for r in report.iterations] == [22, 19, 17]
        assert [r.outcome for r in report.iterations] == ["continue", "continue", "limit"]
        assert report.final_iteration is None
        assert_nested(report)

    def test_first_iteration_secret_violation(self, secret, blobs_data, textures_data):
        # accuracy reductions never drop below -1
        cfg = ONE_SHOT.model_copy(update={"tau_se": -1.0, "tau_st": -1.0})
        with pytest.raises(DisguiseError) as info:
            progressive_disguise(secret, blobs_data, textures_data, cfg)
        assert info.value.report.iterations[0].outcome == "rollback"

    def test_input_shapes_must_agree(self, secret, blobs_data):
        wide = make_dataset(tiny_task("textures", classes=4, seed=1, height=10, width=10))
        with pytest.raises(ConfigError):
            progressive_disguise(secret, blobs_data, wide, ONE_SHOT)

    def test_cover_architecture_must_match(self, secret, blobs_data, textures_data):
        cover = init_graph(small_cnn(5), np.random.default_rng(0))
        with pytest.raises(ConfigError):
            progressive_disguise(secret, blobs_data, textures_data, ONE_SHOT, cover=cover)


@pytest.mark.slow
def test_blobs_in_textures_acceptance():
    secret_task = load_config(CONFIGS / "secret_blobs.json", TaskSpec)
    stego_task = load_config(CONFIGS / "stego_textures.json", TaskSpec)
    arch = load_config(CONFIGS / "cnn_small.json", ArchSpec)
    cfg = load_config(CONFIGS / "disguise.json", DisguiseConfig)
    assert cfg.secret_threshold("acc") == 0.01 and cfg.tau_st == 0.02
    secret_data, stego_data = make_dataset(secret_task), make_dataset(stego_task)
    secret = train_model(arch.layers, secret_data, load_config(CONFIGS / "train.json", TrainConfig))

    stego, result = disguise_model(secret, secret_data, stego_data, cfg, KEY)
    report = result.report
    executed = [r.p for r in report.iterations]
    assert executed == [schedule(cfg.lambda_p, report.total_filters, r.t) for r in report.iterations]
    assert all(a > b for a, b in zip(executed, executed[1:]))
    assert_nested(report)

    recovered = recover(stego, KEY)
    recovered_acc = evaluate(recovered, secret_data)
    assert abs(recovered_acc - evaluate(result.tuned_secret, secret_data)) <= 0.01
    assert abs(recovered_acc - evaluate(secret, secret_data)) <= 0.03
    # fidelity against the cover trained from scratch on the same budget
    assert evaluate(result.cover, stego_data) - evaluate(result.stego, stego_data) < 0.02


@pytest.mark.slow
def test_bit_decoder_acceptance():
    secret_task = load_config(CONFIGS / "secret_bits.json", TaskSpec)
    stego_task = load_config(CONFIGS / "stego_textures.json", TaskSpec)
    arch = load_config(CONFIGS / "decoder_small.json", ArchSpec)
    cfg = DisguiseConfig(tau_se=1.0, tau_st=math.inf, epochs_secret=2, epochs_stego=3, seed=1)
    secret_data, stego_data = make_dataset(secret_task), make_dataset(stego_task)
    secret = train_model(arch.layers, secret_data, TrainConfig(epochs=5, seed=1))

    stego, result = disguise_model(secret, secret_data, stego_data, cfg, KEY)
    assert result.adapt.mode == AdaptationMode.HIDDEN_EXTEND
    recovered = recover(stego, KEY)
    assert abs(evaluate(recovered, secret_data) - evaluate(result.tuned_secret, secret_data)) < 1e-3
