import numpy as np
import pytest

from app.errors import CrcMismatchError, IntegrityError
from app.models.adaptation import AdaptationMeta
from app.models.graph import init_graph
from app.models.selection import FilterSelection, extract_subnetwork
from app.models.serialization import dumps_model, loads_model
from app.recovery import recover
from app.sideinfo.keyed import StegoKey, select_hosts
from app.sideinfo.lsb import embed
from app.sideinfo.payload import frame_payload, payload_bit_length
from tests.conftest import small_cnn

KEY = StegoKey(0xC0FFEE)


def disguised(graph, sel, key=KEY):
    payload = frame_payload(graph, sel, AdaptationMeta.none(graph.output_dim), graph.running_stats())
    return embed(graph, payload, key)


def test_identity_recovery(small_graph):
    stego = disguised(small_graph, FilterSelection.full(small_graph))
    secret = recover(stego, KEY)
    assert secret.layers == small_graph.layers
    # full selection keeps the flat layout, so indices line up
    hosts = select_hosts(KEY, stego.num_params, payload_bit_length(stego))
    others = np.setdiff1d(np.arange(stego.num_params), hosts)
    before, after = small_graph.params.view(np.int32), secret.params.view(np.int32)
    np.testing.assert_array_equal(after[others], before[others])
    assert np.all(np.abs(after.astype(np.int64) - before) <= 1)
    assert secret.running_stats().equals(small_graph.running_stats())


def test_partial_selection(small_graph):
    sel = FilterSelection({0: {0, 3, 6}, 4: {1, 2, 8, 15}, 7: {0, 1, 2}})
    stego = disguised(small_graph, sel)
    secret = recover(stego, KEY)
    expected = extract_subnetwork(small_graph, sel, small_graph.running_stats())
    assert secret.layers == expected.layers
    diff = np.abs(secret.params.view(np.int32).astype(np.int64) - expected.params.view(np.int32))
    assert diff.max() <= 1


def test_wrong_key(small_graph):
    stego = disguised(small_graph, FilterSelection.full(small_graph))
    with pytest.raises(CrcMismatchError):
        recover(stego, StegoKey(KEY.seed + 1))


def test_survives_serialization(small_graph):
    stego = disguised(small_graph, FilterSelection.full(small_graph))
    a = recover(stego, KEY)
    b = recover(loads_model(dumps_model(stego)), KEY)
    assert dumps_model(a) == dumps_model(b)


def test_output_selection_must_be_complete(small_graph):
    stego = disguised(small_graph, FilterSelection({0: {0}, 4: {0}, 7: {0, 2}}))
    with pytest.raises(IntegrityError, match="output layer"):
        recover(stego, KEY)


def test_unmarked_model_is_rejected():
    other = init_graph(small_cnn(outputs=4), np.random.default_rng(0))
    with pytest.raises(IntegrityError):
        recover(other, KEY)
