"""Descriptor assembly, cosine ranking, Recall@K / AP, and the persistent
embedding store.

Store layout (binary, little-endian): magic "SFDE", u32 format version,
u32 record count, u32 dim, then per record {u16 id length, id UTF-8, u8 view
(0=drone, 1=satellite), u32 class_id, dim x float32}.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tensor

MAGIC = b"SFDE"
VERSION = 1

VIEW_CODES = {"drone": 0, "satellite": 1}
CODE_VIEWS = {v: k for k, v in VIEW_CODES.items()}


class StoreError(ValueError):
    code = "store"


class StoreMagicError(StoreError):
    code = "magic-mismatch"


class StoreVersionError(StoreError):
    code = "version-mismatch"


class StoreTruncatedError(StoreError):
    code = "truncated"


class StoreVectorError(StoreError):
    code = "non-unit-vector"


@dataclass
class EmbeddingRecord:
    id: str
    view: str                 # "drone" | "satellite"
    class_id: int
    vector: np.ndarray        # unit-norm float32, length D


@dataclass
class RetrievalReport:
    rankings: dict            # query id -> list of (gallery id, score)
    recall_at: dict           # K -> fraction
    mean_ap: float
    skipped_queries: int = 0  # queries with no relevant gallery item


# ---------------------------------------------------------------------------
# descriptor assembly
# ---------------------------------------------------------------------------

def assemble_embedding(global_embedding, local_map, freq_map,
                       p_local=3.0, p_freq=3.0):
    """Normalized concatenation of the per-branch descriptors.

    Any argument may be None (branch disabled); each present segment is
    L2-normalized before concatenation and the concatenation is normalized
    again. global_embedding: (E,) array; maps: (C, H, W) arrays.
    """
    segments = []
    if global_embedding is not None:
        segments.append(("global", np.asarray(global_embedding, dtype=np.float64)))
    if local_map is not None:
        segments.append(("local", _gem_np(local_map, p_local)))
    if freq_map is not None:
        segments.append(("frequency", _gem_np(freq_map, p_freq)))
    if not segments:
        raise ValueError("no branch outputs to assemble")
    parts = []
    for name, seg in segments:
        if not np.all(np.isfinite(seg)):
            raise FloatingPointError(f"non-finite values in {name} branch output")
        parts.append(seg / max(np.linalg.norm(seg), 1e-12))
    vec = np.concatenate(parts)
    return (vec / max(np.linalg.norm(vec), 1e-12)).astype(np.float32)


def _gem_np(feature_map, p):
    pooled = ops.gem_pool(Tensor(np.asarray(feature_map)), float(p))
    return pooled.data.reshape(-1).astype(np.float64)


# ---------------------------------------------------------------------------
# ranking and metrics
# ---------------------------------------------------------------------------

def cosine_topk(query, gallery, k):
    """Top-k gallery records by dot product (all vectors unit-norm).
    Ties break by ascending id, so rankings are reproducible."""
    if not gallery:
        raise ValueError("empty gallery")
    if k > len(gallery):
        raise ValueError(f"K={k} exceeds gallery size {len(gallery)}")
    scores = np.array([float(np.dot(query, r.vector)) for r in gallery])
    order = sorted(range(len(gallery)), key=lambda i: (-scores[i], gallery[i].id))
    return [(gallery[i], scores[i]) for i in order[:k]]


def recall_at_k(ranked_ids, relevant, k):
    """1.0 if any of the top-k ids is relevant else 0.0 (per query)."""
    return 1.0 if any(r in relevant for r in ranked_ids[:k]) else 0.0


def average_precision(ranked_ids, relevant):
    """Mean of precision-at-rank over the relevant items' ranks."""
    if not relevant:
        raise ValueError("average_precision needs a non-empty relevant set")
    hits = 0
    precisions = []
    for rank, rid in enumerate(ranked_ids, start=1):
        if rid in relevant:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        return 0.0
    return float(np.mean(precisions))


def evaluate(queries, gallery, k_values):
    """Rank the full gallery for every query; relevance = class_id equality.
    Queries without any relevant gallery item are excluded from the means
    and counted in `skipped_queries`."""
    k_values = sorted(k_values)
    if not gallery:
        raise ValueError("empty gallery")
    if max(k_values) > len(gallery):
        raise ValueError(f"K={max(k_values)} exceeds gallery size {len(gallery)}; "
                         "pass a smaller --k list")
    gallery_classes = {}
    for r in gallery:
        gallery_classes.setdefault(r.class_id, set()).add(r.id)

    rankings = {}
    recalls = {k: [] for k in k_values}
    aps = []
    skipped = 0
    for q in queries:
        relevant = gallery_classes.get(q.class_id, set())
        ranked = cosine_topk(q.vector, gallery, len(gallery))
        rankings[q.id] = [(r.id, s) for r, s in ranked]
        if not relevant:
            skipped += 1
            continue
        ids = [r.id for r, _ in ranked]
        for k in k_values:
            recalls[k].append(recall_at_k(ids, relevant, k))
        aps.append(average_precision(ids, relevant))

    n = len(aps)
    return RetrievalReport(
        rankings=rankings,
        recall_at={k: (float(np.mean(v)) if v else 0.0) for k, v in recalls.items()},
        mean_ap=float(np.mean(aps)) if n else 0.0,
        skipped_queries=skipped,
    )


# ---------------------------------------------------------------------------
# embedding store
# ---------------------------------------------------------------------------

def save_embeddings(records, path):
    """Atomic write (temp file + rename)."""
    dim = len(records[0].vector) if records else 0
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<III", VERSION, len(records), dim)
    for r in records:
        vec = np.asarray(r.vector, dtype="<f4")
        if dim and vec.shape != (dim,):
            raise StoreError(f"record {r.id!r} has dim {vec.shape}, expected {dim}")
        rid = r.id.encode()
        blob += struct.pack("<H", len(rid)) + rid
        blob += struct.pack("<BI", VIEW_CODES[r.view], r.class_id)
        blob += vec.tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_embeddings(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise StoreTruncatedError(
                f"store truncated reading {what} at byte {off} "
                f"(need {n}, have {len(blob) - off})")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(4, "magic") != MAGIC:
        raise StoreMagicError(f"bad store magic in {path}")
    version, count, dim = struct.unpack("<III", take(12, "header"))
    if version != VERSION:
        raise StoreVersionError(f"unsupported store version {version}")
    records = []
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"record {i} id length"))
        rid = take(nlen, f"record {i} id").decode()
        view_code, class_id = struct.unpack("<BI", take(5, f"record {i} tags"))
        if view_code not in CODE_VIEWS:
            raise StoreError(f"record {rid!r} has unknown view code {view_code}")
        vec = np.frombuffer(take(4 * dim, f"record {i} vector"), dtype="<f4")
        norm = float(np.linalg.norm(vec))
        if abs(norm - 1.0) > 1e-4:
            raise StoreVectorError(
                f"record {rid!r} vector norm {norm:.6f} is not unit")
        records.append(EmbeddingRecord(rid, CODE_VIEWS[view_code], class_id,
                                       np.array(vec)))
    return records
