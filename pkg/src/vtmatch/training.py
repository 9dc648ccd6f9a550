"""Hierarchical triplet loss, mini-batches with in-batch negatives, Adam
updates, the training loop and checkpointing.

The loss over a batch of b matching (video, paragraph) pairs has three
hinge parts: video-level distances against swapped-pair negatives,
clip/sentence match scores against other sentences of the same
paragraph, and against all sentences of non-matching paragraphs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .hierarchy import (
    AblationFlags,
    ModelDims,
    ModelParams,
    encode_clip,
    encode_pair,
    encode_sentence,
    pair_match,
)
from .conditioning import condition_pair

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "triplet_loss",
    "build_batch",
    "epoch_batches",
    "AdamState",
    "optimizer_step",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = "vtmatch-ckpt"


@dataclass
class TrainConfig:
    batch_pairs: int = 16
    margin_video: float = 0.2
    margin_clip: float = 0.2
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 50
    seed: int = 0
    ablation: AblationFlags = field(default_factory=AblationFlags)
    dims: ModelDims | None = None
    # Paper-literal hinge sign for the clip terms (pos - neg + margin);
    # the default penalizes neg - pos + margin, treating M as similarity.
    paper_literal_clip_hinge: bool = False

    def validate(self):
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be >= 2 (negatives need a second pair)")
        if self.margin_video < 0 or self.margin_clip < 0:
            raise ValueError("margins must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        return self


@dataclass
class LossBreakdown:
    video_term: float
    clip_intra_term: float
    clip_inter_term: float
    total: float

    def to_dict(self):
        return {
            "video_term": self.video_term,
            "clip_intra_term": self.clip_intra_term,
            "clip_inter_term": self.clip_inter_term,
            "total": self.total,
        }


def _hinge(x, margin):
    return dc.relu(dc.add_scalar(x, margin))


def _loss_terms(batch, params, cfg):
    """The three loss parts as scalar tensors over one shared graph."""
    b = len(batch)
    if b < 2:
        raise ValueError("triplet loss needs a batch of at least 2 pairs")
    flags = cfg.ablation

    clip_states = [[encode_clip(c, params) for c in video.clips] for video, _ in batch]
    word_states = [[encode_sentence(s, params) for s in para.sentences] for _, para in batch]

    emb_cache = {}

    def embed(i, ip):
        key = (i, ip)
        if key not in emb_cache:
            emb_cache[key] = encode_pair(
                batch[i][0], batch[ip][1], params, flags,
                clip_states=clip_states[i], word_states=word_states[ip],
            )
        return emb_cache[key]

    # Video-level term over all ordered unmatched (i, i') combinations.
    pos_dist = [
        dc.euclidean_norm(embed(i, i).video_vec - embed(i, i).para_vec) for i in range(b)
    ]
    term1 = dc.zeros(1, 1)
    for i in range(b):
        for ip in range(b):
            if ip == i:
                continue
            emb = embed(i, ip)
            neg_dist = dc.euclidean_norm(emb.video_vec - emb.para_vec)
            term1 = term1 + _hinge(pos_dist[i] - neg_dist, cfg.margin_video)

    # Clip-level terms share conditioned pairs through this cache.
    cond_cache = {}

    def cond(i, ip, j, jp):
        key = (i, ip, j, jp)
        if key not in cond_cache:
            cond_cache[key] = condition_pair(
                clip_states[i][j], word_states[ip][jp], params.proj,
                uniform=flags.no_attention,
            )
        return cond_cache[key]

    def score(i, ip, j, jp):
        return pair_match(cond(i, ip, j, jp), params, flags)

    def clip_hinge(pos, neg):
        diff = pos - neg if cfg.paper_literal_clip_hinge else neg - pos
        return _hinge(diff, cfg.margin_clip)

    term2 = dc.zeros(1, 1)
    term3 = dc.zeros(1, 1)
    for i in range(b):
        n_clips = len(clip_states[i])
        n_sents = len(word_states[i])
        for j in range(min(n_clips, n_sents)):
            pos = score(i, i, j, j)
            for jp in range(n_sents):
                if jp != j:
                    term2 = term2 + clip_hinge(pos, score(i, i, j, jp))
            for ip in range(b):
                if ip == i:
                    continue
                for jp in range(len(word_states[ip])):
                    term3 = term3 + clip_hinge(pos, score(i, ip, j, jp))
    return term1, term2, term3


def triplet_loss(batch, params, cfg):
    t1, t2, t3 = _loss_terms(batch, params, cfg)
    total = t1 + t2 + t3
    return LossBreakdown(t1.item(), t2.item(), t3.item(), total.item())


def build_batch(pairs, b, rng):
    """b distinct matching pairs sampled without replacement."""
    if b > len(pairs):
        raise ValueError(f"batch size {b} exceeds dataset size {len(pairs)}")
    idx = rng.choice(len(pairs), size=b, replace=False)
    return [pairs[i] for i in idx]


def epoch_batches(pairs, b, rng):
    """Shuffled partition of the dataset into batches of b; a trailing
    remainder smaller than 2 is dropped (no negatives possible)."""
    if b > len(pairs):
        raise ValueError(f"batch size {b} exceeds dataset size {len(pairs)}")
    order = rng.permutation(len(pairs))
    batches = []
    for start in range(0, len(order), b):
        chunk = [pairs[i] for i in order[start:start + b]]
        if len(chunk) >= 2:
            batches.append(chunk)
    return batches


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(named_params, grads, state, lr,
                   beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """In-place adaptive moment update over all named parameters; the
    decay term is decoupled from the moments (applied straight to the
    weights, not mixed into the gradient)."""
    state.step += 1
    t = state.step
    for name, tensor in named_params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(tensor.value)
            state.m[name] = m
            state.v[name] = np.zeros_like(tensor.value)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        tensor.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            tensor.value -= lr * weight_decay * tensor.value


def save_checkpoint(path, params, cfg_seed, epoch, opt_state=None,
                    dtype="float64"):
    """One JSON header line (names, shapes, dims, seed, optimizer flag)
    followed by raw little-endian blobs in header order."""
    named = params.named_parameters()
    if opt_state is not None and not opt_state.m:
        # a state that never stepped has no moments worth storing
        opt_state = None
    entries = [{"name": n, "rows": t.value.shape[0], "cols": t.value.shape[1]}
               for n, t in named.items()]
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "dtype": dtype,
        "dims": params.dims.to_dict(),
        "seed": cfg_seed,
        "epoch": epoch,
        "has_optimizer_state": opt_state is not None,
        "entries": entries,
    }
    if opt_state is not None:
        header["adam_step"] = opt_state.step
    np_dtype = "<f8" if dtype == "float64" else "<f4"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for entry in entries:
            named[entry["name"]].value.astype(np_dtype).tofile(fh)
        if opt_state is not None:
            for entry in entries:
                opt_state.m[entry["name"]].astype(np_dtype).tofile(fh)
            for entry in entries:
                opt_state.v[entry["name"]].astype(np_dtype).tofile(fh)


def load_checkpoint(path):
    """Returns (ModelParams, header dict, AdamState or None)."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        np_dtype = "<f8" if header["dtype"] == "float64" else "<f4"

        def read_block():
            block = {}
            for entry in header["entries"]:
                shape = (entry["rows"], entry["cols"])
                count = shape[0] * shape[1]
                arr = np.fromfile(fh, dtype=np_dtype, count=count)
                if arr.size != count:
                    raise ValueError(f"{path}: truncated checkpoint at {entry['name']}")
                block[entry["name"]] = arr.astype(np.float64).reshape(shape)
            return block

        values = read_block()
        opt_state = None
        if header.get("has_optimizer_state"):
            m = read_block()
            v = read_block()
            opt_state = AdamState(step=header["adam_step"], m=m, v=v)

    dims = ModelDims.from_dict(header["dims"])
    params = ModelParams.init(dims, seed=header.get("seed", 0))
    named = params.named_parameters()
    if set(named) != set(values):
        raise ValueError(f"{path}: parameter names do not match the model")
    for name, tensor in named.items():
        tensor.value[...] = values[name]
    return params, header, opt_state


def fit(dataset, cfg, checkpoint_path=None, log_path=None, resume_from=None,
        params=None):
    """Run epochs x batches of forward/backward/update; emit a checkpoint
    after each epoch and a JSONL loss record per epoch.

    Batch shuffling uses an epoch-indexed seed stream so resuming from a
    checkpoint reproduces uninterrupted training exactly.
    """
    cfg.validate()
    start_epoch = 0
    opt_state = AdamState()
    if resume_from is not None:
        params, header, loaded_state = load_checkpoint(resume_from)
        start_epoch = header["epoch"]
        if loaded_state is not None:
            opt_state = loaded_state
    elif params is None:
        if cfg.dims is None:
            raise ValueError("cfg.dims is required when training from scratch")
        params = ModelParams.init(cfg.dims, seed=cfg.seed)

    named = params.named_parameters()
    history = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
            sums = np.zeros(3)
            n_batches = 0
            for batch in epoch_batches(dataset.pairs, cfg.batch_pairs, rng):
                t1, t2, t3 = _loss_terms(batch, params, cfg)
                total = t1 + t2 + t3
                grads = dc.gradients(total, named)
                optimizer_step(named, grads, opt_state, cfg.learning_rate,
                               weight_decay=cfg.weight_decay)
                sums += (t1.item(), t2.item(), t3.item())
                n_batches += 1
            breakdown = LossBreakdown(*(float(s) for s in sums), float(sums.sum()))
            history.append(breakdown)
            record = {
                "epoch": epoch + 1,
                **breakdown.to_dict(),
                "batches": n_batches,
                "wall_time_s": round(time.perf_counter() - t0, 4),
            }
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if checkpoint_path:
                save_checkpoint(checkpoint_path, params, cfg.seed, epoch + 1, opt_state)
        if cfg.epochs == start_epoch or cfg.epochs == 0:
            # No training happened; still emit the (initial) checkpoint.
            if checkpoint_path:
                save_checkpoint(checkpoint_path, params, cfg.seed, start_epoch, opt_state)
    finally:
        if log_fh:
            log_fh.close()
    return params, history
