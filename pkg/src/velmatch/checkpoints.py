"""Checkpoint files: flat float64 parameters plus a JSON model sidecar.

Binary layout (little endian throughout):

    bytes 0..3    magic ``VMC1``
    bytes 4..7    uint32 header length H
    bytes 8..8+H  UTF-8 JSON header: {"format_version": 1,
                  "description": str, "layout": [[name, [dims...]], ...]}
    rest          float64 values, one per layout entry element, in order

The model sidecar ``<checkpoint>.json`` stores the constructor metadata
(model kind, dims, layer spec, base measure) needed to rebuild the flow.
"""

import json
import struct

import numpy as np

from .errors import ShapeError
from .flows import NodeModel, TipfModel
from .measures import measure_from_dict
from .nets import ParamStore
from .ode import IntegratorConfig

MAGIC = b"VMC1"
FORMAT_VERSION = 1


def save_params(path, store, description=""):
    header = json.dumps({"format_version": FORMAT_VERSION,
                         "description": description,
                         "layout": [[n, list(s)] for n, s in store.layout]},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(store.values.astype("<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ShapeError(f"{path} is not a parameter checkpoint")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise ShapeError(f"unsupported checkpoint version {header.get('format_version')}")
        layout = [(n, tuple(s)) for n, s in header["layout"]]
        values = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    return ParamStore(values, layout), header.get("description", "")


def save_model(path, model, description=""):
    save_params(path, model.params, description)
    with open(str(path) + ".json", "w") as fh:
        json.dump(model.to_meta(), fh, indent=2, sort_keys=True)


def load_model(path):
    store, _ = load_params(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    base = measure_from_dict(meta["base"])
    kind = meta["model"]
    if kind == "tipf":
        return TipfModel(meta["dim"], base, store, tuple(meta["cond_hidden"]),
                         meta["time_embed_dim"], meta["scale_bound"])
    if kind == "node":
        integ = meta.get("integrator", {})
        return NodeModel(meta["dim"], base, store, tuple(meta["hidden"]),
                         meta["time_embed_dim"], meta["rank"],
                         meta.get("use_layer_norm", True),
                         IntegratorConfig(method=integ.get("method", "dopri5"),
                                          rtol=integ.get("rtol", 1e-4),
                                          atol=integ.get("atol", 1e-4),
                                          n_steps=integ.get("n_steps", 100)),
                         meta.get("score_via_density", False),
                         meta.get("score_steps", 64))
    raise ShapeError(f"unknown model kind {kind!r} in sidecar")
