"""Qualitative analysis: pooled-feature nearest-neighbor retrieval and
class activation attention maps.

Retrieval compares the trunk's pooled feature vectors under Euclidean
distance. An attention map is the head-weighted average of the final
convolutional activation maps for one class (bias terms are ignored:
a constant offset cannot localize), min-max normalized to [0, 1];
constant raw maps normalize to uniform 0.5 as a "no localization" signal.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .data import AugmentConfig, Dataset, eval_transform, resize_bilinear, write_pgm
from .errors import BadClass, BadConfig, BadK
from .network import DualHeadNet


@dataclass
class FeatureIndex:
    features: np.ndarray   # N x K pooled trunk features
    ids: list


@dataclass
class AttentionMap:
    map: np.ndarray              # h x w in [0, 1]
    raw: np.ndarray              # unnormalized weighted map (for diagnostics)
    class_index: int
    head: str                    # "lesion" | "location"
    upsampled: np.ndarray | None = None


def build_index(net: DualHeadNet, ds: Dataset, aug: AugmentConfig,
                batch_size: int = 20) -> FeatureIndex:
    """Pooled features for every sample at the deterministic eval scale."""
    rows = []
    imgs = [eval_transform(s, aug) for s in ds.samples]
    for start in range(0, len(imgs), batch_size):
        chunk = np.stack(imgs[start : start + batch_size])
        _, _, features, _ = net.forward(chunk)
        rows.extend(features.data)
    feats = np.stack(rows) if rows else np.zeros((0, net.feature_dim))
    return FeatureIndex(feats, [s.id for s in ds.samples])


def query_feature(net: DualHeadNet, sample, aug: AugmentConfig) -> np.ndarray:
    _, _, features, _ = net.forward(eval_transform(sample, aug)[None])
    return features.data[0]


def retrieve(index: FeatureIndex, query: np.ndarray, k: int) -> list:
    """k nearest ids by Euclidean distance, ascending; ties by ascending id."""
    n = len(index.ids)
    if not 1 <= k <= n:
        raise BadK(f"k must lie in 1..{n}, got {k}")
    dists = np.sqrt(((index.features - np.asarray(query)) ** 2).sum(axis=1))
    ranked = sorted(zip(dists, index.ids), key=lambda t: (t[0], t[1]))
    return [(sid, float(d)) for d, sid in ranked[:k]]


def attention(net: DualHeadNet, image: np.ndarray, head: str, class_index: int,
              upsample: bool = False) -> AttentionMap:
    """Class activation map for one image (C x H x W, already transformed)."""
    if head == "lesion":
        weights, n_classes = net.lesion_w.data, net.P
    elif head == "location":
        weights, n_classes = net.location_w.data, net.Q
    else:
        raise BadConfig(f"head must be 'lesion' or 'location', got {head!r}")
    if not 0 <= class_index < n_classes:
        raise BadClass(f"class index {class_index} out of range for {head} head")
    _, _, _, conv_maps = net.forward(np.asarray(image)[None])
    maps = conv_maps.data[0]                    # K x h x w
    raw = np.tensordot(weights[:, class_index], maps, axes=(0, 0))
    lo, hi = raw.min(), raw.max()
    if hi - lo < 1e-12:
        norm = np.full_like(raw, 0.5)
    else:
        norm = (raw - lo) / (hi - lo)
    up = None
    if upsample:
        h, w = image.shape[1:]
        up = resize_bilinear(norm[None], h, w)[0]
    return AttentionMap(norm, raw, class_index, head, up)


def retrieval_report(net: DualHeadNet, index: FeatureIndex, index_ds: Dataset,
                     queries: Dataset, k: int, aug: AugmentConfig) -> dict:
    """Per-query neighbors with shared-lesion match flags and a match rate."""
    def lesion_set(ds, s):
        return {ds.lesion_names[i] for i in np.flatnonzero(s.u)}

    labels_by_id = {s.id: lesion_set(index_ds, s) for s in index_ds.samples}
    entries = []
    matches = total = 0
    for s in queries.samples:
        q_labels = lesion_set(queries, s)
        neighbors = retrieve(index, query_feature(net, s, aug), k)
        items = []
        for sid, dist in neighbors:
            flag = bool(labels_by_id[sid] & q_labels)
            matches += flag
            total += 1
            items.append({"id": sid, "distance": dist, "match": flag})
        entries.append({"query": s.id, "neighbors": items})
    return {"k": k, "queries": entries, "match_rate": matches / total if total else 0.0}


def export_attention(out_dir, stem: str, amap: AttentionMap):
    """Write the map as grayscale PGM plus a JSON sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    img = amap.upsampled if amap.upsampled is not None else amap.map
    pgm = os.path.join(out_dir, f"{stem}.pgm")
    write_pgm(pgm, img)
    with open(os.path.join(out_dir, f"{stem}.json"), "w") as f:
        json.dump({"head": amap.head, "class_index": amap.class_index,
                   "shape": list(img.shape), "image": os.path.basename(pgm)}, f, indent=2)
