"""Model checkpoints: text header + flat little-endian float32 payload.

The header records the dims and the canonical node ordering per domain;
the payload is the concatenation of, per domain, the base embedding table
and the two layers' W and a arrays.  A sidecar JSON manifest lists the
array shapes in payload order.  A TSV export of aggregated embeddings is
provided for inspection.
"""

from __future__ import annotations

import json

import numpy as np

from .aggregator import GATLayerParams
from .graph import Domain, NodeKind, NodeRef, PreferenceNetwork

MAGIC = "xdmatch-checkpoint v1"
HEADER_END = "end-header"


def _array_specs(model) -> list[tuple[str, np.ndarray]]:
    specs = []
    for name in ("source", "target"):
        dm = model.domain(name)
        l1, l2 = dm.layers
        specs += [
            (f"{name}.E", dm.embeddings),
            (f"{name}.W1", l1.W),
            (f"{name}.a1", l1.a),
            (f"{name}.W2", l2.W),
            (f"{name}.a2", l2.a),
        ]
    return specs


def save_checkpoint(model, nets: dict[str, PreferenceNetwork], path: str) -> None:
    specs = _array_specs(model)
    header_lines = [MAGIC]
    header_lines.append(f"dim_in\t{model.source.embeddings.shape[1]}")
    header_lines.append(f"dim_out\t{model.source.layers[0].W.shape[0]}")
    for name in ("source", "target"):
        nodes = nets[name].nodes
        header_lines.append(f"domain\t{name}\tnodes\t{len(nodes)}")
        header_lines += [f"{n.kind.value}\t{n.external_id}" for n in nodes]
    header_lines.append(HEADER_END)
    header = "\n".join(header_lines) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for _, arr in specs:
            fh.write(arr.astype("<f4").tobytes())
    manifest = {
        "arrays": [
            {"name": name, "shape": list(arr.shape)} for name, arr in specs
        ],
        "dtype": "<f4",
    }
    with open(path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str):
    """Returns (model, node lists per domain)."""
    from .training import DomainModel, Model  # deferred; avoids a cycle

    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.index((HEADER_END + "\n").encode("utf-8")) + len(HEADER_END) + 1
    header = raw[:end].decode("utf-8").splitlines()
    payload = raw[end:]
    if header[0] != MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")

    dim_in = dim_out = None
    node_lists: dict[str, list[NodeRef]] = {}
    current: list[NodeRef] | None = None
    current_domain: Domain | None = None
    for line in header[1:]:
        if line == HEADER_END:
            break
        parts = line.split("\t")
        if parts[0] == "dim_in":
            dim_in = int(parts[1])
        elif parts[0] == "dim_out":
            dim_out = int(parts[1])
        elif parts[0] == "domain":
            current = []
            current_domain = Domain(parts[1])
            node_lists[parts[1]] = current
        else:
            current.append(NodeRef(NodeKind(parts[0]), parts[1], current_domain))

    with open(path + ".manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    arrays = []
    offset = 0
    for spec in manifest["arrays"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(payload[offset : offset + size], dtype="<f4")
        arrays.append(arr.reshape(shape).astype(np.float64))
        offset += size

    def build(idx: int) -> DomainModel:
        E, W1, a1, W2, a2 = arrays[idx : idx + 5]
        return DomainModel(
            embeddings=E,
            layers=(GATLayerParams(W=W1, a=a1), GATLayerParams(W=W2, a=a2)),
        )

    model = Model(source=build(0), target=build(5))
    assert dim_in == model.source.embeddings.shape[1]
    assert dim_out == model.source.layers[0].W.shape[0]
    return model, node_lists


def export_embeddings_tsv(
    nodes: list[NodeRef], vecs: np.ndarray, path: str
) -> None:
    """`kind<TAB>id<TAB>domain<TAB>v1..vD` rows for inspection."""
    with open(path, "w", encoding="utf-8") as fh:
        for node, vec in zip(nodes, vecs):
            vals = "\t".join(f"{v:.6f}" for v in vec)
            fh.write(f"{node.kind.value}\t{node.external_id}\t{node.domain.value}\t{vals}\n")
