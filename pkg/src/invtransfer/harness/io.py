"""Dataset CSV and model JSON persistence.

Floats are written with 17 significant digits, which is enough for every
IEEE double to parse back to the same bits.  Model documents carry a format
tag and version; anything else is rejected on load.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from ..downstream import DownstreamModel
from ..errors import ParseError, SchemaError
from ..net_core import LayerParams, NormNet
from ..synthetic import Dataset
from ..upstream import UpstreamModel

FORMAT = "invtransfer-model"
VERSION = 1


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dataset_to_csv(data: Dataset) -> str:
    buf = io.StringIO()
    buf.write(",".join(["domain", "y"] + [f"x{j}" for j in range(data.d)]) + "\n")
    for s, y, row in zip(data.domain, data.y, data.X):
        buf.write(",".join([str(int(s)), _fmt(y)] + [_fmt(v) for v in row]) + "\n")
    return buf.getvalue()


def dataset_from_csv(text: str) -> Dataset:
    rows = csv.reader(io.StringIO(text))
    try:
        header = next(rows)
    except StopIteration:
        raise ParseError("empty file, expected a header", 1) from None
    d = len(header) - 2
    if d < 1 or header != ["domain", "y"] + [f"x{j}" for j in range(d)]:
        raise ParseError("header must be domain,y,x0,...", 1)
    dom, ys, xs = [], [], []
    for line, row in enumerate(rows, start=2):
        if len(row) != d + 2:
            raise ParseError(f"expected {d + 2} columns, found {len(row)}", line)
        try:
            dom.append(int(row[0]))
            ys.append(float(row[1]))
            xs.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise ParseError(str(exc), line) from None
    X = np.array(xs, dtype=float).reshape(len(xs), d)
    return Dataset(X, np.array(ys, dtype=float), np.array(dom, dtype=np.int64))


def write_dataset(path, data: Dataset):
    Path(path).write_text(dataset_to_csv(data))


def read_dataset(path) -> Dataset:
    return dataset_from_csv(Path(path).read_text())


def _net_doc(net: NormNet) -> dict:
    return {
        "norm_budget": net.norm_budget,
        "output_clamp": net.output_clamp,
        "hidden_bias": net.hidden_bias,
        "layers": [{"weight": l.weight.tolist(), "bias": l.bias.tolist()} for l in net.layers],
    }


def _net_from(doc: dict) -> NormNet:
    layers = [LayerParams(np.array(l["weight"], dtype=float), np.array(l["bias"], dtype=float)) for l in doc["layers"]]
    return NormNet(layers, float(doc["norm_budget"]), doc["output_clamp"], bool(doc["hidden_bias"]))


def model_to_doc(model) -> dict:
    if isinstance(model, NormNet):
        body = {"kind": "net", "net": _net_doc(model)}
    elif isinstance(model, UpstreamModel):
        body = {
            "kind": "upstream",
            "h": _net_doc(model.h),
            "F": model.F.tolist(),
            "head_radius": model.head_radius,
            "critic": None if model.critic is None else _net_doc(model.critic),
        }
    elif isinstance(model, DownstreamModel):
        body = {
            "kind": "downstream",
            "h_ref": _net_doc(model.h_ref),
            "F_T": model.F_T.tolist(),
            "A": model.A.tolist(),
            "q": None if model.q is None else _net_doc(model.q),
            "q_enabled": model.q_enabled,
            "radius": model.radius,
        }
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    return {"format": FORMAT, "version": VERSION, **body}


def model_from_doc(doc: dict):
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise SchemaError("not a model document")
    if doc.get("version") != VERSION:
        raise SchemaError(f"unsupported model version {doc.get('version')!r}, expected {VERSION}")
    try:
        kind = doc["kind"]
        if kind == "net":
            return _net_from(doc["net"])
        if kind == "upstream":
            critic = None if doc["critic"] is None else _net_from(doc["critic"])
            return UpstreamModel(_net_from(doc["h"]), np.array(doc["F"], dtype=float), float(doc["head_radius"]), critic)
        if kind == "downstream":
            q = None if doc["q"] is None else _net_from(doc["q"])
            return DownstreamModel(
                _net_from(doc["h_ref"]),
                np.array(doc["F_T"], dtype=float),
                np.array(doc["A"], dtype=float),
                q,
                bool(doc["q_enabled"]),
                float(doc["radius"]),
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model document: {exc}") from exc
    raise SchemaError(f"unknown model kind {kind!r}")


def dumps_model(model) -> str:
    # json writes floats with repr, the shortest string that round-trips exactly
    return json.dumps(model_to_doc(model), indent=1, sort_keys=True) + "\n"


def loads_model(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"unreadable model document: {exc}") from exc
    return model_from_doc(doc)


def save_model(path, model):
    Path(path).write_text(dumps_model(model))


def load_model(path):
    return loads_model(Path(path).read_text())
