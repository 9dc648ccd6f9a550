"""Model assembly: per-clip/per-sentence encoding, pairwise conditioning,
the second video/paragraph hierarchy with global initial states, max
pooling, and the trainable match score.

Dimension note: the global conditioned vectors (size d_e) initialize the
second-hierarchy GRUs and the pooled outputs are compared directly in
the joint space, so d_h = d_e = d_vp throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import seqenc
from .conditioning import ProjectionPair, condition_pair, global_condition
from .diffcore import Tensor

__all__ = [
    "ModelDims",
    "AblationFlags",
    "ModelParams",
    "JointEmbedding",
    "encode_clip",
    "encode_sentence",
    "match_score",
    "clip_sentence_similarity",
    "encode_pair",
    "video_paragraph_similarity",
]


@dataclass
class ModelDims:
    d_f: int
    d_w: int
    d_e: int = 32
    n_f: int = 16

    @property
    def d_h(self):
        return self.d_e

    def to_dict(self):
        return {"d_f": self.d_f, "d_w": self.d_w, "d_e": self.d_e, "n_f": self.n_f}

    @classmethod
    def from_dict(cls, d):
        return cls(d_f=d["d_f"], d_w=d["d_w"], d_e=d["d_e"], n_f=d["n_f"])


@dataclass
class AblationFlags:
    no_attention: bool = False       # uniform 1/n weights instead of softmax
    no_global: bool = False          # zero initial states for the second hierarchy
    no_second_hierarchy: bool = False  # return the global conditioned vectors directly
    no_match: bool = False           # plain cosine instead of the U/V match score

    NAMES = ("no-attn", "no-global", "no-2nd-h", "no-m-match")

    @classmethod
    def parse(cls, spec):
        """Parse a comma-separated flag list such as "no-attn,no-global"."""
        flags = cls()
        if not spec:
            return flags
        mapping = {
            "no-attn": "no_attention",
            "no-global": "no_global",
            "no-2nd-h": "no_second_hierarchy",
            "no-m-match": "no_match",
        }
        for token in spec.split(","):
            token = token.strip()
            if not token:
                continue
            if token not in mapping:
                raise ValueError(f"unknown ablation flag {token!r} (choose from {cls.NAMES})")
            setattr(flags, mapping[token], True)
        return flags

    def to_spec(self):
        mapping = {
            "no-attn": self.no_attention,
            "no-global": self.no_global,
            "no-2nd-h": self.no_second_hierarchy,
            "no-m-match": self.no_match,
        }
        return ",".join(name for name, on in mapping.items() if on)


@dataclass
class ModelParams:
    dims: ModelDims
    gru_c: seqenc.GruParams
    gru_s: seqenc.GruParams
    gru_v: seqenc.GruParams
    gru_p: seqenc.GruParams
    proj: ProjectionPair    # A, B for clip/sentence conditioning
    proj0: ProjectionPair   # A0, B0 for global conditioning
    match_u: Tensor
    match_v: Tensor

    @classmethod
    def init(cls, dims, seed):
        rng = np.random.default_rng(seed)
        d_e = dims.d_e

        def square(name):
            bound = np.sqrt(6.0 / (2 * d_e))
            t = Tensor(rng.uniform(-bound, bound, size=(d_e, d_e)))
            t.name = name
            return t

        return cls(
            dims=dims,
            gru_c=seqenc.init_gru(dims.d_f, d_e, rng, "gru_c"),
            gru_s=seqenc.init_gru(dims.d_w, d_e, rng, "gru_s"),
            gru_v=seqenc.init_gru(d_e, d_e, rng, "gru_v"),
            gru_p=seqenc.init_gru(d_e, d_e, rng, "gru_p"),
            proj=ProjectionPair(square("proj.a"), square("proj.b")),
            proj0=ProjectionPair(square("proj0.a"), square("proj0.b")),
            match_u=square("match_u"),
            match_v=square("match_v"),
        )

    def named_parameters(self):
        out = {}
        for name in ("gru_c", "gru_s", "gru_v", "gru_p"):
            out.update(getattr(self, name).named_parameters(name))
        out.update(self.proj.named_parameters("proj.a", "proj.b"))
        out.update(self.proj0.named_parameters("proj0.a", "proj0.b"))
        out["match_u"] = self.match_u
        out["match_v"] = self.match_v
        return out


@dataclass
class JointEmbedding:
    video_vec: Tensor   # d_e x 1 max-pooled second-hierarchy output
    para_vec: Tensor    # d_e x 1
    per_pair: dict      # (clip j, sentence j') -> ConditionedPair
    global_pair: tuple | None = None  # (v0, p0) when global conditioning ran


def _as_state_list(rows, dim, kind):
    if rows.ndim != 2 or rows.shape[1] != dim:
        raise dc.ShapeMismatchError(kind, rows.shape, (rows.shape[0], dim))
    return [dc.constant(rows[t:t + 1].T) for t in range(rows.shape[0])]


def encode_clip(frame_features, params):
    """GRU states for one clip; input is an (n_frames, d_f) array."""
    frames = np.asarray(frame_features, dtype=np.float64)
    seq = _as_state_list(frames, params.dims.d_f, "encode_clip")
    return seqenc.gru_encode(params.gru_c, seq)


def encode_sentence(word_features, params):
    """GRU states for one sentence; input is an (n_words, d_w) array."""
    words = np.asarray(word_features, dtype=np.float64)
    seq = _as_state_list(words, params.dims.d_w, "encode_sentence")
    return seqenc.gru_encode(params.gru_s, seq)


def match_score(x, y, u, v):
    """Cosine of Ux and Vy as a 1x1 tensor; zero-norm inputs score 0."""
    ux = dc.l2_normalize(u @ x)
    vy = dc.l2_normalize(v @ y)
    return dc.transpose(ux) @ vy


def cosine(x, y):
    return dc.transpose(dc.l2_normalize(x)) @ dc.l2_normalize(y)


def pair_match(cond, params, flags):
    """Match score of a conditioned (clip, sentence) pair, ablation-aware."""
    if flags.no_match:
        return cosine(cond.cond_clip, cond.cond_sentence)
    return match_score(cond.cond_clip, cond.cond_sentence, params.match_u, params.match_v)


def clip_sentence_similarity(frame_features, word_features, params,
                             flags=None):
    """Single clip against single sentence; for video/sentence retrieval
    the caller concatenates all frames and all words beforehand."""
    flags = flags or AblationFlags()
    fs = encode_clip(frame_features, params)
    ws = encode_sentence(word_features, params)
    cond = condition_pair(fs, ws, params.proj, uniform=flags.no_attention)
    return pair_match(cond, params, flags).item()


def encode_pair(video, paragraph, params, flags=None, *,
                clip_states=None, word_states=None):
    """Co-dependent embedding of a whole video and a whole paragraph.

    Clip j is conditioned on sentence j; when the counts differ, trailing
    unmatched clips (sentences) are conditioned on the other side's last
    element and the shorter conditioned sequence is zero-padded before
    the second-hierarchy GRUs. Precomputed first-stage states may be
    passed in to share work across candidate pairs.
    """
    flags = flags or AblationFlags()
    if clip_states is None:
        clip_states = [encode_clip(c, params) for c in video.clips]
    if word_states is None:
        word_states = [encode_sentence(s, params) for s in paragraph.sentences]
    if not clip_states or not word_states:
        raise ValueError("encode_pair: empty video or paragraph")

    n_clips, n_sents = len(clip_states), len(word_states)
    per_pair = {}

    def cond(j, jp):
        key = (j, jp)
        if key not in per_pair:
            per_pair[key] = condition_pair(
                clip_states[j], word_states[jp], params.proj,
                uniform=flags.no_attention,
            )
        return per_pair[key]

    all_frames = [st for states in clip_states for st in states]
    all_words = [st for states in word_states for st in states]
    v0, p0 = global_condition(
        all_frames, all_words, params.proj0, params.dims.n_f,
        uniform=flags.no_attention,
    )

    if flags.no_second_hierarchy:
        return JointEmbedding(v0, p0, per_pair, (v0, p0))

    cond_clips = [cond(j, min(j, n_sents - 1)).cond_clip for j in range(n_clips)]
    cond_sents = [cond(min(jp, n_clips - 1), jp).cond_sentence for jp in range(n_sents)]

    n = max(n_clips, n_sents)
    d_e = params.dims.d_e
    cond_clips += [dc.zeros(d_e) for _ in range(n - n_clips)]
    cond_sents += [dc.zeros(d_e) for _ in range(n - n_sents)]

    if flags.no_global:
        h_v = h_p = dc.zeros(d_e)
        global_pair = None
    else:
        h_v, h_p = v0, p0
        global_pair = (v0, p0)

    v_states = seqenc.gru_encode(params.gru_v, cond_clips, h0=h_v)
    p_states = seqenc.gru_encode(params.gru_p, cond_sents, h0=h_p)
    return JointEmbedding(
        video_vec=dc.elementwise_max(v_states),
        para_vec=dc.elementwise_max(p_states),
        per_pair=per_pair,
        global_pair=global_pair,
    )


def video_paragraph_similarity(emb):
    """exp(-||v - p||): in (0, 1], equal to 1 iff the vectors coincide."""
    dist = dc.euclidean_norm(emb.video_vec - emb.para_vec)
    return dc.exp(dc.neg(dist)).item()
