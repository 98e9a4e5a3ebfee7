"""Saving and loading networks at task boundaries.

A model file is a binary container holding every layer's weights and
masks plus the structural metadata (generation tags, task index, freeze
scope, activations) and the generator state, so a run resumed from a
boundary continues bit-for-bit like an uninterrupted one. Mid-task
state (snapshot, drift schedule, momentum) is deliberately not stored:
the next ``train_task`` call rebuilds all of it.
"""

import numpy as np

from .container import ContainerError, read_container, write_container
from .numerics import Activation, MaskedLayer
from .plasticity import PlasticNetwork

MODEL_MAGIC = b"PSSNET1\0"


def save_model(path, net):
    """Write the network to ``path``; call it between tasks."""
    meta = {
        "schema": 1,
        "task": net.task,
        "freeze_scope": net.freeze_scope,
        "hidden_gens": [list(g) for g in net.hidden_gens],
        "output_gens": list(net.output_gens),
        "activations": [{"kind": l.activation.kind, "slope": l.activation.slope}
                        for l in net.layers],
        "rng_state": net.rng.bit_generator.state,
        "n_layers": len(net.layers),
    }
    arrays = {}
    for i, layer in enumerate(net.layers):
        arrays[f"w{i}"] = layer.weights
        arrays[f"b{i}"] = layer.bias
        arrays[f"conn{i}"] = layer.conn_mask
        arrays[f"train{i}"] = layer.train_mask
        arrays[f"btrain{i}"] = layer.bias_train_mask
    write_container(path, MODEL_MAGIC, meta, arrays)


def load_model(path):
    """Rebuild a network saved by ``save_model``."""
    meta, arrays = read_container(path, MODEL_MAGIC)
    if meta.get("schema") != 1:
        raise ContainerError(f"unsupported model schema {meta.get('schema')!r}")
    layers = []
    for i in range(meta["n_layers"]):
        act = meta["activations"][i]
        layers.append(MaskedLayer(
            arrays[f"w{i}"], arrays[f"b{i}"], arrays[f"conn{i}"],
            arrays[f"train{i}"], arrays[f"btrain{i}"],
            Activation(act["kind"], act["slope"])))
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    net = PlasticNetwork(layers, meta["hidden_gens"], meta["output_gens"],
                         task=meta["task"], rng=rng)
    net.freeze_scope = meta["freeze_scope"]
    return net
