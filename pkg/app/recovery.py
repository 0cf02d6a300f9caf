"""
Receiver side: rebuild the secret network from a stego model and its key.
"""
from app.errors import IntegrityError, ShapeMismatchError
from app.log import log_info
from app.models.adaptation import secret_output_layer
from app.models.graph import ModelGraph
from app.models.selection import extract_subnetwork
from app.sideinfo.keyed import StegoKey
from app.sideinfo.lsb import extract
from app.sideinfo.payload import parse_payload


def recover(stego: ModelGraph, key: StegoKey) -> ModelGraph:
    """Extract the side information and prune the stego model to the secret network.

    The secret output layer keeps its first O_e neurons; in hidden_extend mode
    the appended layer is dropped.
    """
    payload = extract(stego, key)
    sel, adapt, bn_stats = parse_payload(payload, stego)

    out = secret_output_layer(stego, adapt)
    if sel.get(out) != frozenset(range(adapt.original_output_dim)):
        raise IntegrityError(f"output layer selection does not cover exactly the {adapt.original_output_dim} "
                             f"original outputs")
    try:
        secret = extract_subnetwork(stego, sel, bn_stats, adapt)
    except ShapeMismatchError as e:
        raise IntegrityError(f"stego architecture inconsistent with its side information: {e}")
    log_info(f"recovered secret network: {secret.num_params} params, {sel.total} filters, "
             f"adaptation {adapt.mode.value}")
    return secret
