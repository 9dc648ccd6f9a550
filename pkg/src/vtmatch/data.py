"""Dataset model, binary feature I/O, synthetic corpus generation and
weakly-supervised uniform segmentation.

On disk a corpus is a `manifest.json` plus one raw feature file per
video and per paragraph: little-endian float32, row-major, one row per
frame (or word). Clip and sentence boundaries live in the manifest as
(start, length) lists over those rows. Arithmetic everywhere else is
float64; files are float32 by convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "VideoRecord",
    "ParagraphRecord",
    "Dataset",
    "SyntheticConfig",
    "gen_synthetic",
    "save_dataset",
    "load_dataset",
    "segment_uniform",
]


class DataError(ValueError):
    """Structured dataset failure carrying the offending record id."""

    def __init__(self, record_id, message):
        self.record_id = record_id
        super().__init__(f"{record_id}: {message}")


@dataclass
class VideoRecord:
    id: str
    clips: list  # list of (n_frames, d_f) float64 arrays

    def validate(self):
        if not self.clips:
            raise DataError(self.id, "video has no clips")
        d_f = self.clips[0].shape[1]
        for i, clip in enumerate(self.clips):
            if clip.ndim != 2 or clip.shape[0] < 1:
                raise DataError(self.id, f"clip {i} has no frames")
            if clip.shape[1] != d_f:
                raise DataError(self.id, f"clip {i} feature dim {clip.shape[1]} != {d_f}")
        return self

    @property
    def d_f(self):
        return self.clips[0].shape[1]

    def flattened(self):
        """Single-clip copy with all frames concatenated in order."""
        return VideoRecord(self.id, [np.concatenate(self.clips, axis=0)])


@dataclass
class ParagraphRecord:
    id: str
    sentences: list  # list of (n_words, d_w) float64 arrays
    raw_text: list | None = None

    def validate(self):
        if not self.sentences:
            raise DataError(self.id, "paragraph has no sentences")
        d_w = self.sentences[0].shape[1]
        for i, sent in enumerate(self.sentences):
            if sent.ndim != 2 or sent.shape[0] < 1:
                raise DataError(self.id, f"sentence {i} has no words")
            if sent.shape[1] != d_w:
                raise DataError(self.id, f"sentence {i} feature dim {sent.shape[1]} != {d_w}")
        return self

    @property
    def d_w(self):
        return self.sentences[0].shape[1]

    def flattened(self):
        flat = ParagraphRecord(self.id, [np.concatenate(self.sentences, axis=0)])
        if self.raw_text:
            flat.raw_text = [" ".join(self.raw_text)]
        return flat


@dataclass
class Dataset:
    pairs: list  # list of (VideoRecord, ParagraphRecord)

    def __len__(self):
        return len(self.pairs)

    def ids(self):
        return [v.id for v, _ in self.pairs]


@dataclass
class SyntheticConfig:
    n_pairs: int = 16
    clips_per_video: tuple = (2, 3)
    frames_per_clip: tuple = (3, 6)
    words_per_sentence: tuple = (3, 6)
    d_f: int = 16
    d_w: int = 16
    n_concepts: int = 8
    noise_sigma: float = 0.1
    distractor_fraction: float = 0.3
    # "companion": every clip carries a second, undescribed concept in a
    # fixed share of its frames (word distractors are unit noise), so
    # pooling that cannot condition on the sentence mixes in content the
    # text never mentions; "background": distractor frames show shared
    # scenery directions outside the concept span; "concept": distractors
    # resample unassigned concepts per frame and word; "noise": loud
    # random directions on both sides (norm NOISE_DISTRACTOR_SCALE) that
    # drown unweighted pooling but earn no interaction affinity
    distractor_style: str = "companion"
    seed: int = 0

    def validate(self):
        for name in ("clips_per_video", "frames_per_clip", "words_per_sentence"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty")
        if self.n_concepts < 2:
            raise ValueError("n_concepts must be >= 2")
        if self.n_concepts > min(self.d_f, self.d_w):
            raise ValueError("n_concepts cannot exceed the feature dimensions")
        if not 0.0 <= self.distractor_fraction < 1.0:
            raise ValueError("distractor_fraction must be in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if self.distractor_style not in ("companion", "background", "concept", "noise"):
            raise ValueError(
                "distractor_style must be 'companion', 'background', "
                "'concept' or 'noise'")
        return self


def _unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


NOISE_DISTRACTOR_SCALE = 3.0


def _orthonormal_rows(rng, n, d):
    q, _ = np.linalg.qr(rng.normal(size=(d, n)))
    return q.T[:n]


def gen_synthetic(cfg):
    """Planted-correlation corpus: each clip carries 1-2 latent concepts;
    its frames are noisy copies of the concept vectors (with a distractor
    fraction of unrelated unit-noise frames) and the matching sentence
    mirrors the same concepts through a fixed cross-modal map.

    Concepts form an orthonormal basis per modality so the planted
    correspondence is an exact isometry between two subspaces."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    frame_concepts = _orthonormal_rows(rng, cfg.n_concepts, cfg.d_f)
    word_concepts = _orthonormal_rows(rng, cfg.n_concepts, cfg.d_w)
    # Fixed random correspondence between frame-space and word-space ids.
    cross_map = rng.permutation(cfg.n_concepts)

    def draw_len(rg):
        lo, hi = rg
        return int(rng.integers(lo, hi + 1))

    pairs = []
    for i in range(cfg.n_pairs):
        pair_id = f"pair{i:04d}"
        n_clips = draw_len(cfg.clips_per_video)
        # the video's own scenery: random directions no sentence ever
        # mentions, fixed within the video so plain averaging keeps them
        video_bg = (_unit_rows(rng, 2, cfg.d_f)
                    if cfg.distractor_style == "background" else None)
        clips, sentences, texts = [], [], []
        for _ in range(n_clips):
            if cfg.distractor_style == "companion":
                assigned = rng.choice(cfg.n_concepts, size=1)
            else:
                k = int(rng.integers(1, 3))  # 1 or 2 concepts per clip
                assigned = rng.choice(cfg.n_concepts, size=min(k, cfg.n_concepts),
                                      replace=False)
            others = np.setdiff1d(np.arange(cfg.n_concepts), assigned)
            companion = int(rng.choice(others)) if len(others) else None

            def frame_distractor():
                if cfg.distractor_style == "companion" and companion is not None:
                    return frame_concepts[companion]
                if cfg.distractor_style == "background":
                    return video_bg[int(rng.integers(len(video_bg)))]
                if cfg.distractor_style == "concept" and len(others):
                    return frame_concepts[int(rng.choice(others))]
                return NOISE_DISTRACTOR_SCALE * _unit_rows(rng, 1, cfg.d_f)[0]

            def word_distractor():
                if cfg.distractor_style == "concept" and len(others):
                    cid = int(cross_map[int(rng.choice(others))])
                    return word_concepts[cid], cid
                return NOISE_DISTRACTOR_SCALE * _unit_rows(rng, 1, cfg.d_w)[0], "x"

            frames = []
            for _ in range(draw_len(cfg.frames_per_clip)):
                if rng.random() < cfg.distractor_fraction:
                    base = frame_distractor()
                else:
                    base = frame_concepts[int(rng.choice(assigned))]
                frames.append(base + rng.normal(0.0, cfg.noise_sigma, cfg.d_f))
            clips.append(np.asarray(frames))

            words, word_ids = [], []
            for _ in range(draw_len(cfg.words_per_sentence)):
                if rng.random() < cfg.distractor_fraction:
                    base, wid = word_distractor()
                    words.append(base + rng.normal(0.0, cfg.noise_sigma, cfg.d_w))
                    word_ids.append(wid)
                else:
                    wid = int(cross_map[int(rng.choice(assigned))])
                    words.append(word_concepts[wid] + rng.normal(0.0, cfg.noise_sigma, cfg.d_w))
                    word_ids.append(wid)
            sentences.append(np.asarray(words))
            texts.append(" ".join(f"w{w}" for w in word_ids))
        pairs.append((
            VideoRecord(pair_id, clips).validate(),
            ParagraphRecord(pair_id, sentences, raw_text=texts).validate(),
        ))
    return Dataset(pairs)


def _boundaries(segments):
    out = []
    start = 0
    for seg in segments:
        out.append([start, int(seg.shape[0])])
        start += seg.shape[0]
    return out


def save_dataset(dataset, out_dir):
    """Write manifest.json plus float32 feature blobs; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "vtmatch-corpus", "version": 1, "pairs": []}
    for video, paragraph in dataset.pairs:
        vfile = f"{video.id}.video.bin"
        tfile = f"{paragraph.id}.text.bin"
        np.concatenate(video.clips, axis=0).astype("<f4").tofile(out_dir / vfile)
        np.concatenate(paragraph.sentences, axis=0).astype("<f4").tofile(out_dir / tfile)
        entry = {
            "id": video.id,
            "video_file": vfile,
            "text_file": tfile,
            "d_f": int(video.d_f),
            "d_w": int(paragraph.d_w),
            "clip_boundaries": _boundaries(video.clips),
            "sentence_boundaries": _boundaries(paragraph.sentences),
        }
        if paragraph.raw_text:
            entry["sentences_text"] = list(paragraph.raw_text)
        manifest["pairs"].append(entry)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read_blob(path, dim, record_id):
    if not path.exists():
        raise DataError(record_id, f"missing feature file {path.name}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % dim != 0:
        raise DataError(record_id, f"{path.name} size {raw.size} not divisible by dim {dim}")
    return raw.reshape(-1, dim).astype(np.float64)


def _split(rows, boundaries, record_id, label):
    segments = []
    for start, length in boundaries:
        if length < 1:
            raise DataError(record_id, f"empty {label} boundary ({start}, {length})")
        if start + length > rows.shape[0]:
            raise DataError(
                record_id,
                f"{label} boundary ({start}, {length}) exceeds {rows.shape[0]} rows",
            )
        segments.append(rows[start:start + length].copy())
    return segments


def load_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(str(manifest_path), "manifest not found")
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    pairs = []
    for entry in manifest["pairs"]:
        rid = entry["id"]
        vrows = _read_blob(base / entry["video_file"], entry["d_f"], rid)
        trows = _read_blob(base / entry["text_file"], entry["d_w"], rid)
        video = VideoRecord(rid, _split(vrows, entry["clip_boundaries"], rid, "clip"))
        paragraph = ParagraphRecord(
            rid,
            _split(trows, entry["sentence_boundaries"], rid, "sentence"),
            raw_text=entry.get("sentences_text"),
        )
        pairs.append((video.validate(), paragraph.validate()))
    return Dataset(pairs)


def segment_uniform(video, paragraph, n_segments):
    """Weak-supervision preprocessing: split the (flattened) video into
    n_segments contiguous equal-as-possible clips, earlier segments taking
    the remainder; truncate the paragraph to n_segments sentences or
    repeat its last sentence up to that count."""
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    frames = np.concatenate(video.clips, axis=0)
    total = frames.shape[0]
    if n_segments > total:
        raise ValueError(f"n_segments {n_segments} exceeds frame count {total}")
    base, rem = divmod(total, n_segments)
    sizes = [base + 1 if i < rem else base for i in range(n_segments)]
    clips = []
    start = 0
    for size in sizes:
        clips.append(frames[start:start + size].copy())
        start += size

    sentences = list(paragraph.sentences)
    texts = list(paragraph.raw_text) if paragraph.raw_text else None
    if len(sentences) > n_segments:
        sentences = sentences[:n_segments]
        texts = texts[:n_segments] if texts else None
    else:
        while len(sentences) < n_segments:
            sentences.append(sentences[-1].copy())
            if texts:
                texts.append(texts[-1])
    return (
        VideoRecord(video.id, clips).validate(),
        ParagraphRecord(paragraph.id, sentences, raw_text=texts).validate(),
    )
