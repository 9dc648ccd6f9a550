"""Two-stage retrieval: query-independent static shortlist, conditioned
reranking, bidirectional R@K / MdR evaluation and attention explanations.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import seqenc
from .conditioning import condition_pair
from .data import ParagraphRecord, VideoRecord
from .hierarchy import (
    AblationFlags,
    clip_sentence_similarity,
    encode_clip,
    encode_pair,
    encode_sentence,
    pair_match,
    video_paragraph_similarity,
)

__all__ = [
    "StaticIndex",
    "RetrievalMetrics",
    "Explanation",
    "static_embed",
    "build_index",
    "shortlist",
    "rerank",
    "evaluate",
    "explain",
    "ranks_from_score_matrix",
    "metrics_from_ranks",
]

DEFAULT_SHORTLIST = 50
DEFAULT_RECALL_KS = (1, 5)


@dataclass
class StaticIndex:
    ids: list
    embeddings: dict  # id -> (d_e,) array


@dataclass
class RetrievalMetrics:
    recall_at: dict   # K -> fraction in [0, 1]
    median_rank: float

    def to_dict(self):
        return {
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "median_rank": self.median_rank,
        }


@dataclass
class Explanation:
    video_id: str
    paragraph_id: str
    clips: list = field(default_factory=list)  # per-clip attention dumps

    def to_dict(self):
        return {
            "video_id": self.video_id,
            "paragraph_id": self.paragraph_id,
            "clips": self.clips,
        }


def static_embed(item, params):
    """Query-independent embedding: uniform attention pooling per clip
    (sentence), second-hierarchy GRU from a zero initial state, max pool.
    Depends only on the item, so it can be indexed once per checkpoint."""
    if isinstance(item, VideoRecord):
        pooled = [
            _uniform_pool(encode_clip(clip, params)) for clip in item.clips
        ]
        gru = params.gru_v
    elif isinstance(item, ParagraphRecord):
        pooled = [
            _uniform_pool(encode_sentence(sent, params)) for sent in item.sentences
        ]
        gru = params.gru_p
    else:
        raise TypeError(f"cannot embed {type(item).__name__}")
    states = seqenc.gru_encode(gru, pooled, h0=dc.zeros(params.dims.d_e))
    return dc.elementwise_max(states).value[:, 0].copy()


def _uniform_pool(states):
    return dc.scale(sum(states[1:], states[0]), 1.0 / len(states))


def build_index(items, params):
    ids = [item.id for item in items]
    return StaticIndex(ids, {item.id: static_embed(item, params) for item in items})


def _static_order(query_vec, index):
    """All corpus ids by descending exp(-distance), ties by ascending id."""
    scored = [
        (float(np.exp(-np.linalg.norm(query_vec - index.embeddings[i]))), i)
        for i in index.ids
    ]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [i for _, i in scored]


def shortlist(query_vec, index, k):
    if not index.ids:
        raise ValueError("shortlist: empty index")
    if k < 1:
        raise ValueError("shortlist: k must be >= 1")
    return _static_order(query_vec, index)[:k]


def _pair_score(query, candidate, params, mode, flags):
    """Conditioned similarity; query/candidate may be either modality."""
    if isinstance(candidate, VideoRecord):
        video, paragraph = candidate, query
    else:
        video, paragraph = query, candidate
    if mode == "paragraph":
        emb = encode_pair(video, paragraph, params, flags)
        return video_paragraph_similarity(emb)
    if mode == "sentence":
        flat_v = video.flattened()
        flat_p = paragraph.flattened()
        return clip_sentence_similarity(
            flat_v.clips[0], flat_p.sentences[0], params, flags
        )
    if mode == "clip":
        # match score per aligned clip/sentence position, averaged;
        # keeps the per-segment structure the flattened mode discards
        scores = []
        for j in range(min(len(video.clips), len(paragraph.sentences))):
            clip_states = encode_clip(video.clips[j], params)
            word_states = encode_sentence(paragraph.sentences[j], params)
            cond = condition_pair(clip_states, word_states, params.proj,
                                  uniform=flags.no_attention)
            scores.append(pair_match(cond, params, flags).item())
        return float(np.mean(scores))
    raise ValueError(f"unknown mode {mode!r}")


def rerank(query, candidates, params, mode="paragraph", flags=None, threads=1):
    """Conditioned rescoring of every candidate; descending score with
    ties broken by ascending id."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("rerank: no candidates")
    flags = flags or AblationFlags()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(
                lambda c: _pair_score(query, c, params, mode, flags), candidates
            ))
    else:
        scores = [_pair_score(query, c, params, mode, flags) for c in candidates]
    ranked = sorted(zip(candidates, scores), key=lambda t: (-t[1], t[0].id))
    return [(c.id, s) for c, s in ranked]


def _rank_of(ranking, target_id):
    return ranking.index(target_id) + 1


def metrics_from_ranks(ranks, recall_ks=DEFAULT_RECALL_KS):
    ranks = np.asarray(ranks, dtype=np.float64)
    recall = {k: float(np.mean(ranks <= k)) for k in recall_ks}
    return RetrievalMetrics(recall_at=recall, median_rank=float(np.median(ranks)))


def ranks_from_score_matrix(scores, query_ids, corpus_ids, truth):
    """Ground-truth ranks from a raw (queries x corpus) score matrix with
    descending-score, ascending-id ordering; truth maps query id to the
    matching corpus id."""
    scores = np.asarray(scores, dtype=np.float64)
    ranks = []
    for qi, qid in enumerate(query_ids):
        order = sorted(range(len(corpus_ids)),
                       key=lambda c: (-scores[qi, c], corpus_ids[c]))
        ranked_ids = [corpus_ids[c] for c in order]
        ranks.append(_rank_of(ranked_ids, truth[qid]))
    return ranks


def evaluate(dataset, params, direction="t2v", k_shortlist=DEFAULT_SHORTLIST,
             mode="paragraph", flags=None, recall_ks=DEFAULT_RECALL_KS,
             threads=1):
    """Two-stage retrieval metrics over every query of one direction.

    Items outside the shortlist keep their static-stage order below the
    reranked block, so the ground-truth rank is always defined.
    """
    if len(dataset.pairs) < 2:
        raise ValueError("evaluate: need at least 2 pairs")
    flags = flags or AblationFlags()
    if direction == "t2v":
        queries = [p for _, p in dataset.pairs]
        corpus = [v for v, _ in dataset.pairs]
    elif direction == "v2t":
        queries = [v for v, _ in dataset.pairs]
        corpus = [p for _, p in dataset.pairs]
    else:
        raise ValueError(f"unknown direction {direction!r}")

    index = build_index(corpus, params)
    by_id = {item.id: item for item in corpus}
    ranks = []
    for query in queries:
        qvec = static_embed(query, params)
        static_order = _static_order(qvec, index)
        short = static_order[:k_shortlist]
        reranked = rerank(query, [by_id[i] for i in short], params, mode,
                          flags, threads=threads)
        ranking = [i for i, _ in reranked] + [i for i in static_order if i not in set(short)]
        ranks.append(_rank_of(ranking, query.id))
    return metrics_from_ranks(ranks, recall_ks)


def explain(video, paragraph, params, flags=None):
    """Attention dump for one pair: per-clip frame weights, the matched
    sentence's word weights, top/bottom frames, and the interaction grid
    for external heatmap plotting."""
    flags = flags or AblationFlags()
    emb = encode_pair(video, paragraph, params, flags)
    out = Explanation(video.id, paragraph.id)
    n_sents = len(paragraph.sentences)
    for j in range(len(video.clips)):
        jp = min(j, n_sents - 1)
        cond = emb.per_pair[(j, jp)]
        mu_c = cond.frame_attention.value[:, 0]
        mu_s = cond.word_attention.value[:, 0]
        order = np.argsort(-mu_c, kind="stable")
        entry = {
            "clip_index": j,
            "sentence_index": jp,
            "frame_attention": [float(x) for x in mu_c],
            "word_attention": [float(x) for x in mu_s],
            "top_frames": [int(i) for i in order[:2]],
            "bottom_frames": [int(i) for i in order[::-1][:2]],
            "interaction": [[float(x) for x in row] for row in cond.interaction.value],
        }
        if paragraph.raw_text:
            entry["sentence_text"] = paragraph.raw_text[jp]
            entry["words"] = paragraph.raw_text[jp].split()
        out.clips.append(entry)
    return out
