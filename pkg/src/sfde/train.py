"""Desk-scale training loop: decoupled-weight-decay adaptive moments,
cosine-annealed step size with 10% warm-up, symmetric batch composition,
and deterministic embedding extraction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import losses, ops, retrieval
from .autodiff import Tape, Tensor
from .config import RunConfig
from .data import DatasetManifest, load_image
from .model import SFDEModel, load_checkpoint, save_checkpoint


class NumericError(RuntimeError):
    """Non-finite loss with per-branch diagnostics."""


def cosine_warmup_lr(step, total_steps, peak, floor=0.0, warmup_fraction=0.1):
    """0 at step 0, linear to `peak` at warmup_fraction*total_steps, then
    cosine decay to `floor` at `total_steps`."""
    warm = max(1, round(warmup_fraction * total_steps))
    if step < warm:
        return peak * step / warm
    progress = (step - warm) / max(1, total_steps - warm)
    progress = min(1.0, progress)
    return floor + (peak - floor) * 0.5 * (1.0 + np.cos(np.pi * progress))


class AdamW:
    """Adaptive moment estimation with decoupled weight decay."""

    def __init__(self, params, weight_decay=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.trainable]
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            p.data = p.data - lr * mh / (np.sqrt(vh) + self.eps)
            if self.weight_decay and p.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            if p.clamp_range is not None:
                p.data = np.clip(p.data, *p.clamp_range)


@dataclass
class StepLog:
    step: int
    lr: float
    ce: float
    infonce: float
    dsa: float
    total: float


class ImageCache:
    def __init__(self, size):
        self.size = size
        self._cache = {}

    def get(self, entry):
        if entry.id not in self._cache:
            self._cache[entry.id] = load_image(entry.path, self.size)
        return self._cache[entry.id]


def compute_norm_stats(manifest: DatasetManifest, cache: ImageCache,
                       split="train"):
    """Per-channel mean/std over the training split (after resize)."""
    acc = np.zeros(3)
    acc2 = np.zeros(3)
    count = 0
    for e in manifest.subset(split):
        img = cache.get(e)
        acc += img.mean(axis=(1, 2))
        acc2 += (img ** 2).mean(axis=(1, 2))
        count += 1
    mean = acc / count
    std = np.sqrt(np.maximum(acc2 / count - mean ** 2, 1e-8))
    return mean.astype(np.float32), std.astype(np.float32)


def standardize(images, mean, std):
    return (images - mean[:, None, None]) / std[:, None, None]


def compute_batch_losses(model: SFDEModel, drone_imgs, sat_imgs, labels,
                         weights, training=True, rng=None):
    """Forward both views through the shared model (one combined batch, so
    batch-norm sees the symmetric composition) and compute the three terms."""
    n = drone_imgs.shape[0]
    batch = Tensor(np.concatenate([drone_imgs, sat_imgs], axis=0).astype(
        model.cfg.np_dtype))
    out = model(batch, training=training, rng=rng)

    ce = nce = dsa = None
    if out.global_desc is not None and out.global_desc.logits is not None:
        both_labels = np.concatenate([labels, labels])
        ce = losses.cross_entropy(out.global_desc.logits, both_labels)
    if out.local_map is not None and n >= 2:
        emb = losses.pool_for_contrast(out.local_map, model.pool_p_local)
        d_emb = ops.slice_(emb, slice(0, n))
        s_emb = ops.slice_(emb, slice(n, 2 * n))
        nce = losses._symmetric_nce(d_emb, s_emb, model.log_temperature)
    if out.freq_map is not None and n >= 2:
        emb = losses.pool_for_contrast(out.freq_map, model.pool_p_freq)
        d_emb = ops.slice_(emb, slice(0, n))
        s_emb = ops.slice_(emb, slice(n, 2 * n))
        dsa = losses._symmetric_nce(d_emb, s_emb, model.log_temperature)
    total = losses.total_loss(ce, nce, dsa, weights)
    return total, ce, nce, dsa, out


def _branch_norms(out):
    parts = {"backbone": out.features}
    if out.global_desc is not None:
        parts["global"] = out.global_desc.embedding
    if out.local_map is not None:
        parts["local"] = out.local_map
    if out.freq_map is not None:
        parts["frequency"] = out.freq_map
    return {k: float(np.linalg.norm(v.data)) for k, v in parts.items()}


def train(config: RunConfig, manifest: DatasetManifest, ckpt_path,
          log_path=None, probe=None, probe_every=0):
    """Run the training loop; returns the list of StepLogs.

    `probe(model, norm_stats, class_index, step)` is an optional callback
    (used by tests to track retrieval quality during training).
    """
    problems = manifest.validate_pairing("train")
    if problems:
        raise ValueError("manifest validation failed: " + "; ".join(problems))

    classes = sorted({e.class_id for e in manifest.subset("train")})
    class_index = {cid: i for i, cid in enumerate(classes)}
    by_class = {cid: {"drone": [], "satellite": []} for cid in classes}
    for e in manifest.subset("train"):
        by_class[e.class_id][e.view].append(e)

    rng = np.random.default_rng(config.seed)
    model = SFDEModel(config.model_config(num_classes=len(classes)), rng)
    cache = ImageCache(config.input_size)
    mean, std = compute_norm_stats(manifest, cache)
    weights = config.loss_weights()
    opt = AdamW(model.parameters(), weight_decay=config.weight_decay)

    logs = []
    initial_total = None
    for step in range(config.steps):
        pairs = min(config.batch_pairs, len(classes))
        batch_classes = rng.choice(classes, size=pairs, replace=False)
        drone_imgs, sat_imgs, labels = [], [], []
        for cid in batch_classes:
            d = by_class[cid]["drone"][rng.integers(len(by_class[cid]["drone"]))]
            s = by_class[cid]["satellite"][rng.integers(len(by_class[cid]["satellite"]))]
            di = cache.get(d).copy()
            si = cache.get(s).copy()
            if rng.random() < config.flip_probability:
                di = di[:, :, ::-1].copy()
            if rng.random() < config.flip_probability:
                si = si[:, :, ::-1].copy()
            drone_imgs.append(standardize(di, mean, std))
            sat_imgs.append(standardize(si, mean, std))
            labels.append(class_index[cid])
        drone_imgs = np.stack(drone_imgs)
        sat_imgs = np.stack(sat_imgs)
        labels = np.array(labels)

        model.zero_grads()
        with Tape() as tape:
            total, ce, nce, dsa, out = compute_batch_losses(
                model, drone_imgs, sat_imgs, labels, weights,
                training=True, rng=rng)
        if not np.isfinite(total.data):
            raise NumericError(
                f"non-finite loss at step {step}; branch activation norms: "
                f"{_branch_norms(out)}")
        tape.backward(total)
        lr = cosine_warmup_lr(step, config.steps, config.learning_rate,
                              config.lr_floor, config.warmup_fraction)
        opt.step(lr)

        log = StepLog(step, lr,
                      float(ce.data) if ce is not None else 0.0,
                      float(nce.data) if nce is not None else 0.0,
                      float(dsa.data) if dsa is not None else 0.0,
                      float(total.data))
        logs.append(log)
        if initial_total is None:
            initial_total = log.total
        if probe is not None and probe_every and (step + 1) % probe_every == 0:
            probe(model, (mean, std), class_index, step)

    meta = {
        "norm_mean": mean.tolist(),
        "norm_std": std.tolist(),
        "classes": classes,
        "seed": config.seed,
        "steps": config.steps,
    }
    save_checkpoint(ckpt_path, model, meta)
    if log_path:
        with open(log_path, "w") as fh:
            fh.write("step,lr,loss_ce,loss_infonce,loss_dsa,loss_total\n")
            for l in logs:
                fh.write(f"{l.step},{l.lr:.8f},{l.ce:.8f},{l.infonce:.8f},"
                         f"{l.dsa:.8f},{l.total:.8f}\n")
    return model, (mean, std), logs


# ---------------------------------------------------------------------------
# embedding extraction
# ---------------------------------------------------------------------------

def extract_embeddings(model: SFDEModel, norm_stats, entries, input_size):
    """One unit-norm record per manifest entry, eval mode, deterministic."""
    mean, std = norm_stats
    records = []
    for e in entries:
        img = standardize(load_image(e.path, input_size), mean, std)
        img = img.astype(model.cfg.np_dtype)
        out = model(Tensor(img[None]), training=False)
        g = (out.global_desc.embedding.data[0]
             if out.global_desc is not None else None)
        l = out.local_map.data[0] if out.local_map is not None else None
        p = out.freq_map.data[0] if out.freq_map is not None else None
        vec = retrieval.assemble_embedding(
            g, l, p,
            p_local=float(model.pool_p_local.data),
            p_freq=float(model.pool_p_freq.data))
        records.append(retrieval.EmbeddingRecord(e.id, e.view, e.class_id, vec))
    return records


def embed_from_checkpoint(ckpt_path, entries, out_path):
    model, header = load_checkpoint(ckpt_path)
    norm_stats = (np.array(header["norm_mean"], dtype=np.float32),
                  np.array(header["norm_std"], dtype=np.float32))
    records = extract_embeddings(model, norm_stats, entries,
                                 model.cfg.input_size)
    retrieval.save_embeddings(records, out_path)
    return records


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------

def write_reports(report, queries, gallery, out_dir, prefix="retrieval"):
    """Ranking CSV, summary CSV, and the positive/negative cosine-distance
    histogram CSV."""
    os.makedirs(out_dir, exist_ok=True)
    rank_path = os.path.join(out_dir, f"{prefix}_rankings.csv")
    with open(rank_path, "w") as fh:
        fh.write("query_id,rank,gallery_id,score\n")
        for qid in sorted(report.rankings):
            for rank, (gid, score) in enumerate(report.rankings[qid], start=1):
                fh.write(f"{qid},{rank},{gid},{score:.8f}\n")
    summary_path = os.path.join(out_dir, f"{prefix}_summary.csv")
    with open(summary_path, "w") as fh:
        fh.write("metric,K,value\n")
        for k in sorted(report.recall_at):
            fh.write(f"recall,{k},{report.recall_at[k]:.8f}\n")
        fh.write(f"mean_ap,,{report.mean_ap:.8f}\n")
        fh.write(f"skipped_queries,,{report.skipped_queries}\n")
    hist_path = os.path.join(out_dir, f"{prefix}_distances.csv")
    qclass = {q.id: q.class_id for q in queries}
    gclass = {g.id: g.class_id for g in gallery}
    with open(hist_path, "w") as fh:
        fh.write("query_id,gallery_id,pair,cosine_distance\n")
        for qid in sorted(report.rankings):
            for gid, score in report.rankings[qid]:
                pair = ("positive" if gclass.get(gid) == qclass.get(qid)
                        else "negative")
                fh.write(f"{qid},{gid},{pair},{1.0 - score:.8f}\n")
    return rank_path, summary_path, hist_path
