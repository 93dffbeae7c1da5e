"""Versioned binary model format.

Layout (all integers little-endian)::

    magic        8 bytes   b"RFPOFRST"
    version      u32
    header_len   u32
    header       JSON (utf-8): config, feature names, schema fingerprint,
                 subjects, tree count
    bag_counts   i32[n_trees * n_subjects]
    per tree     u32 n_nodes, then preorder node records
                 (i32 feature, f64 threshold, i32 left, i32 right,
                  f64 value, f64 count); feature = -1 marks a leaf
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .forest import HistoricalRandomForest, Tree

MAGIC = b"RFPOFRST"
FORMAT_VERSION = 1

_NODE = np.dtype([("feature", "<i4"), ("threshold", "<f8"), ("left", "<i4"),
                  ("right", "<i4"), ("value", "<f8"), ("count", "<f8")])


class ModelFormatError(ValueError):
    pass


def schema_fingerprint(names) -> str:
    return hashlib.sha256("\x1f".join(names).encode()).hexdigest()[:16]


def dump_forest(forest: HistoricalRandomForest, feature_names=None) -> bytes:
    names = list(feature_names) if feature_names is not None else [
        f"x{j}" for j in range(forest.n_features_in_)]
    if len(names) != forest.n_features_in_:
        raise ValueError("feature_names length does not match the forest")
    header = {
        "config": {
            "n_estimators": forest.n_estimators,
            "max_features": forest.mtry_,
            "min_node_size": forest.min_node_size,
            "max_depth": forest.max_depth,
            "seed": forest.seed_,
        },
        "feature_names": names,
        "schema_fingerprint": schema_fingerprint(names),
        "subjects": [str(s) for s in forest.subjects_],
        "n_trees": len(forest.estimators_),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hb)), hb,
             forest.bag_counts_.astype("<i4").tobytes()]
    for t in forest.estimators_:
        rec = np.empty(t.n_nodes, dtype=_NODE)
        for f in _NODE.names:
            rec[f] = getattr(t, f)
        parts.append(struct.pack("<I", t.n_nodes))
        parts.append(rec.tobytes())
    return b"".join(parts)


def load_forest(data: bytes) -> tuple[HistoricalRandomForest, dict]:
    """Rebuild a fitted forest; returns ``(forest, header)``."""
    try:
        return _load(data)
    except ModelFormatError:
        raise
    except (ValueError, KeyError, TypeError, struct.error) as e:
        raise ModelFormatError(f"corrupt or truncated model file: {e}") from None


def _load(data: bytes):
    if data[:8] != MAGIC:
        raise ModelFormatError("not a forest model file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    pos = 16
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    cfg = header["config"]
    n_trees = header["n_trees"]
    n_subj = len(header["subjects"])
    bags = np.frombuffer(data, dtype="<i4", count=n_trees * n_subj, offset=pos)
    pos += bags.nbytes
    trees = []
    for _ in range(n_trees):
        (n_nodes,) = struct.unpack_from("<I", data, pos)
        pos += 4
        rec = np.frombuffer(data, dtype=_NODE, count=n_nodes, offset=pos)
        pos += rec.nbytes
        trees.append(Tree(rec["feature"].astype(np.int64), rec["threshold"].astype(float),
                          rec["left"].astype(np.int64), rec["right"].astype(np.int64),
                          rec["value"].astype(float), rec["count"].astype(float)))
    if pos != len(data):
        raise ModelFormatError("trailing bytes after last tree")
    forest = HistoricalRandomForest(n_estimators=cfg["n_estimators"],
                                    max_features=cfg["max_features"],
                                    min_node_size=cfg["min_node_size"],
                                    max_depth=cfg["max_depth"], random_state=cfg["seed"])
    forest.estimators_ = trees
    forest.bag_counts_ = bags.reshape(n_trees, n_subj).astype(np.int64)
    forest.subjects_ = np.array(header["subjects"], dtype=object)
    forest.n_features_in_ = len(header["feature_names"])
    forest.mtry_ = cfg["max_features"]
    forest.seed_ = cfg["seed"]
    forest._pack()
    return forest, header
