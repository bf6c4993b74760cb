"""Single-file model archives.

Layout: an 8-byte magic, a little-endian uint64 header length, a canonical
JSON header (sorted keys), then the raw float64 array payload in header
order. Identical state serializes to identical bytes, so archives can be
compared directly in tests and across runs.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .information import FisherAnchor
from .model import DibConfig, DibModel, MlpModel, MultiHeadMlp
from .nn import ParamBank

MAGIC = b"DIBCKPT\x01"
FORMAT_VERSION = 1
SLOTS = ("value", "grad", "adam_m", "adam_v")


class CheckpointError(ValueError):
    """Archive is not a recognizable checkpoint."""


def named_banks(model) -> dict[str, ParamBank]:
    """Stable path -> bank mapping covering every parameter in the model."""
    banks: dict[str, ParamBank] = {}
    if isinstance(model, DibModel):
        for ci, cell in enumerate(model.cells):
            for mi, m in enumerate(cell.modules):
                banks[f"cell{ci}/module{mi}"] = m.bank
            banks[f"cell{ci}/router"] = cell.router.bank
            for tid in sorted(cell.memnets):
                banks[f"cell{ci}/memnet{tid}"] = cell.memnets[tid].bank
    elif isinstance(model, MlpModel):
        banks["net"] = model.net.bank
    elif isinstance(model, MultiHeadMlp):
        banks["trunk"] = model.trunk.bank
        for tid in sorted(model.heads):
            banks[f"head{tid}"] = model.heads[tid].bank
    else:
        raise CheckpointError(f"cannot serialize model type {type(model).__name__}")
    return banks


def _model_meta(model) -> dict:
    if isinstance(model, DibModel):
        return {"kind": model.kind,
                "config": dataclasses.asdict(model.config),
                "task_ids": model.task_ids()}
    if isinstance(model, MlpModel):
        return {"kind": "mlp",
                "config": {"input_dim": model.input_dim,
                           "output_dim": model.output_dim,
                           "hidden": list(model.hidden)}}
    meta = {"kind": "mhmlp",
            "config": {"input_dim": model.input_dim,
                       "output_dim": model.output_dim,
                       "hidden": list(model.hidden)},
            "task_ids": sorted(model.heads),
            "active_task": model.active_task}
    return meta


def save_model(model, path, anchors: list[FisherAnchor] | None = None) -> Path:
    banks = named_banks(model)
    arrays: list[tuple[str, np.ndarray]] = []
    bank_meta = {}
    for bpath, bank in banks.items():
        names = bank.names()
        bank_meta[bpath] = {"step_count": bank.step_count, "params": names}
        for name in names:
            p = bank[name]
            for slot in SLOTS:
                arrays.append((f"{bpath}/{name}/{slot}", getattr(p, slot)))
    anchor_meta = []
    for i, anchor in enumerate(anchors or []):
        names = sorted(anchor.theta_star)
        anchor_meta.append({"task_id": anchor.task_id, "params": names})
        for name in names:
            arrays.append((f"anchor{i}/theta/{name}", anchor.theta_star[name]))
            arrays.append((f"anchor{i}/fisher/{name}", anchor.fisher_diag[name]))
    header = {
        "format_version": FORMAT_VERSION,
        "model": _model_meta(model),
        "banks": bank_meta,
        "anchors": anchor_meta,
        "arrays": [{"key": key, "shape": list(a.shape)} for key, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def _rebuild_model(meta: dict):
    # weights are overwritten right after construction, so the init rng is
    # irrelevant; a fixed one keeps rebuilding deterministic anyway
    rng = np.random.default_rng(0)
    kind = meta["kind"]
    cfg = meta["config"]
    if kind in ("dib", "rir"):
        config = DibConfig(
            input_dim=cfg["input_dim"], output_dim=cfg["output_dim"],
            num_cells=cfg["num_cells"], modules_per_cell=cfg["modules_per_cell"],
            module_width=cfg["module_width"], module_layers=cfg["module_layers"],
            router_hidden=tuple(cfg["router_hidden"]),
            memnet_hidden=tuple(cfg["memnet_hidden"]))
        model = DibModel(config, rng, random_routing=(kind == "rir"))
        for tid in meta["task_ids"]:
            model.new_memnets(tid, rng)
        return model
    if kind == "mlp":
        return MlpModel(cfg["input_dim"], cfg["output_dim"], tuple(cfg["hidden"]), rng)
    if kind == "mhmlp":
        model = MultiHeadMlp(cfg["input_dim"], cfg["output_dim"],
                             tuple(cfg["hidden"]), rng)
        for tid in meta["task_ids"]:
            model.new_head(tid, rng)
        model.active_task = meta["active_task"]
        return model
    raise CheckpointError(f"unknown model kind {kind!r}")


def load_model(path) -> tuple[object, list[FisherAnchor]]:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        if header["format_version"] != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {header['format_version']}")
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            if len(buf) != 8 * n:
                raise CheckpointError(f"{path}: truncated payload at {spec['key']}")
            arrays[spec["key"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    model = _rebuild_model(header["model"])
    banks = named_banks(model)
    for bpath, meta in header["banks"].items():
        bank = banks[bpath]
        bank.step_count = meta["step_count"]
        for name in meta["params"]:
            p = bank[name]
            for slot in SLOTS:
                stored = arrays[f"{bpath}/{name}/{slot}"]
                if stored.shape != p.value.shape:
                    raise CheckpointError(f"shape mismatch for {bpath}/{name}")
                setattr(p, slot, stored)
    anchors = []
    for i, ameta in enumerate(header["anchors"]):
        theta = {name: arrays[f"anchor{i}/theta/{name}"] for name in ameta["params"]}
        fisher = {name: arrays[f"anchor{i}/fisher/{name}"] for name in ameta["params"]}
        anchors.append(FisherAnchor(ameta["task_id"], theta, fisher))
    return model, anchors
