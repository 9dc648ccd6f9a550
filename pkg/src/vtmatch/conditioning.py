"""Frame/word interaction scores, attention and conditioned pooling.

Given GRU-encoded frame states and word states, the two sides are
projected into a shared space, cosine similarities form an interaction
matrix, its row/column sums act as relevance potentials, softmax turns
the potentials into attention weights, and the weighted sums give the
conditioned clip and sentence vectors. A second projection pair serves
the global video/paragraph variant over subsampled frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "ProjectionPair",
    "ConditionedPair",
    "interaction_matrix",
    "marginal_potentials",
    "attention",
    "uniform_attention",
    "conditioned_pool",
    "condition_pair",
    "sample_frames",
    "global_condition",
]


@dataclass
class ProjectionPair:
    """Square learned projections: `a` for the frame side, `b` for words."""

    a: Tensor
    b: Tensor

    def named_parameters(self, a_name, b_name):
        return {a_name: self.a, b_name: self.b}


@dataclass
class ConditionedPair:
    """All intermediates for one (clip, sentence) conditioning."""

    interaction: Tensor       # n x m cosine scores
    frame_potentials: Tensor  # n x 1 row sums
    word_potentials: Tensor   # m x 1 column sums
    frame_attention: Tensor   # n x 1 simplex weights
    word_attention: Tensor    # m x 1 simplex weights
    cond_clip: Tensor         # d_e x 1
    cond_sentence: Tensor     # d_e x 1


def interaction_matrix(frame_states, word_states, proj):
    """Entry (k, k') is the cosine between A f_k and B w_k'."""
    rows = [dc.transpose(dc.l2_normalize(proj.a @ f)) for f in frame_states]
    cols = [dc.l2_normalize(proj.b @ w) for w in word_states]
    return dc.concat_rows(rows) @ dc.concat_cols(cols)


def marginal_potentials(interaction):
    """Row-sum vector (frames) and column-sum vector (words)."""
    return dc.row_sums(interaction), dc.transpose(dc.col_sums(interaction))


def attention(potentials):
    """Softmax of a k x 1 potential vector, back as k x 1."""
    return dc.transpose(dc.softmax_rows(dc.transpose(potentials)))


def uniform_attention(k):
    return dc.constant(np.full((k, 1), 1.0 / k))


def conditioned_pool(states, mu):
    """Attention-weighted sum of d_e x 1 states."""
    states = list(states)
    if len(states) != mu.shape[0]:
        raise dc.ShapeMismatchError("conditioned_pool", (len(states),), mu.shape)
    return dc.concat_cols(states) @ mu


def condition_pair(frame_states, word_states, proj, uniform=False):
    """Full conditioning of one clip against one sentence.

    With uniform=True the attention ablation is active: both attention
    vectors are replaced by 1/n without touching the interaction matrix.
    """
    interaction = interaction_matrix(frame_states, word_states, proj)
    rho_c, rho_s = marginal_potentials(interaction)
    if uniform:
        mu_c = uniform_attention(len(frame_states))
        mu_s = uniform_attention(len(word_states))
    else:
        mu_c = attention(rho_c)
        mu_s = attention(rho_s)
    return ConditionedPair(
        interaction=interaction,
        frame_potentials=rho_c,
        word_potentials=rho_s,
        frame_attention=mu_c,
        word_attention=mu_s,
        cond_clip=conditioned_pool(frame_states, mu_c),
        cond_sentence=conditioned_pool(word_states, mu_s),
    )


def sample_frames(encoded_frames, n_f, rng=None):
    """Uniform-stride subsample of at most n_f frames, order preserved.

    Deterministic by default (index floor(t * total / n_f)); pass a
    seeded rng for the randomized variant.
    """
    frames = list(encoded_frames)
    if not frames:
        raise ValueError("sample_frames: empty input")
    if n_f < 1:
        raise ValueError("sample_frames: n_f must be >= 1")
    total = len(frames)
    if total <= n_f:
        return frames
    if rng is not None:
        idx = np.sort(rng.choice(total, size=n_f, replace=False))
    else:
        idx = [(t * total) // n_f for t in range(n_f)]
    return [frames[i] for i in idx]


def global_condition(video_frames_enc, paragraph_words_enc, proj0, n_f, uniform=False):
    """Whole-video / whole-paragraph conditioning over sampled frames.

    Reuses the per-clip encoded states (no re-encoding of the sampled
    frames) and returns the pair of global conditioned vectors used as
    initial states for the second hierarchy.
    """
    sampled = sample_frames(video_frames_enc, n_f)
    pair = condition_pair(sampled, list(paragraph_words_enc), proj0, uniform=uniform)
    return pair.cond_clip, pair.cond_sentence
