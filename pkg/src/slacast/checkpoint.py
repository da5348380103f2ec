"""JSON checkpoints for trained models.

Layout (``format`` = ``slacast-checkpoint``, ``version`` = 1)::

    {
      "format": "slacast-checkpoint",
      "version": 1,
      "net": {"input_channels": [...], "hidden_units": H, "window": u, "heads": K, "seed": s},
      "params": {"g0.Wx": {"shape": [C, 4H], "data": [...]}, ..., "head.W": ..., "head.b": ...},
      "groups": [{"cell": "A2", "slice": "total"}, ...],
      "feature_sets": [["F0", "F-RAN1", ...], ...],
      "norm_stats": [{"mean": [...], "std": [...]}, ...],
      "peak_flags": [[0, 1, ...24 entries], ...],
      "weights": [w per head], "sla_targets": [...], "flag_unmet": [...],
      "arch": "single_cell", "model_kind": "mv_all", "loss": "wmae",
      "fold": {"index": i, "train_ranges": [[a, b], ...], "val_range": [a, b], "test_range": [a, b]},
      "threshold": 0.9
    }

Python's float repr round-trips exactly, so save/load is lossless.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .features import FeatureSet, ModelKind, NormStats
from .neuralnet import ModelParams, NetConfig
from .pipeline import ArchKind, GroupKey, TrainedModel
from .slaloss import LossKind
from .telemetry import CellId, FoldSplit, SliceKind

FORMAT = "slacast-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_dict(model: TrainedModel) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "net": model.params.config.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in model.params.arrays.items()},
        "groups": [{"cell": str(g.cell), "slice": g.slice.value} for g in model.groups],
        "feature_sets": [list(fs.channels) for fs in model.feature_sets],
        "norm_stats": [ns.to_dict() for ns in model.norm_stats],
        "peak_flags": [[int(b) for b in pk] for pk in model.peak_flags],
        "weights": [float(w) for w in model.weights],
        "sla_targets": [None if t is None else float(t) for t in model.sla_targets],
        "flag_unmet": [bool(f) for f in model.flag_unmet],
        "arch": model.arch.value,
        "model_kind": model.model_kind.value,
        "loss": model.loss.value,
        "fold": None if model.fold is None else model.fold.to_dict(),
        "threshold": model.threshold,
    }


def model_from_dict(d: dict) -> TrainedModel:
    if d.get("format") != FORMAT:
        raise CheckpointError(f"not a checkpoint (format={d.get('format')!r})")
    if d.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}, expected {VERSION}")
    try:
        net = NetConfig.from_dict(d["net"])
        arrays = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["params"].items()}
        return TrainedModel(
            params=ModelParams(net, arrays),
            groups=[GroupKey(CellId.parse(g["cell"]), SliceKind(g["slice"])) for g in d["groups"]],
            feature_sets=[FeatureSet(tuple(fs)) for fs in d["feature_sets"]],
            norm_stats=[NormStats.from_dict(ns) for ns in d["norm_stats"]],
            peak_flags=[np.array(pk, dtype=bool) for pk in d["peak_flags"]],
            weights=[float(w) for w in d["weights"]],
            arch=ArchKind(d["arch"]),
            model_kind=ModelKind(d["model_kind"]),
            loss=LossKind(d["loss"]),
            sla_targets=list(d["sla_targets"]),
            flag_unmet=[bool(f) for f in d["flag_unmet"]],
            fold=None if d["fold"] is None else FoldSplit.from_dict(d["fold"]),
            threshold=float(d["threshold"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def save_checkpoint(model: TrainedModel, path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model), separators=(",", ":")) + "\n")


def load_checkpoint(path) -> TrainedModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    if not isinstance(d, dict):
        raise CheckpointError(f"unreadable checkpoint {path}")
    return model_from_dict(d)
