"""Triplet loss structure, Adam updates, checkpointing and the fit loop."""

import numpy as np
import pytest

from vtmatch import diffcore as dc
from vtmatch.conditioning import condition_pair
from vtmatch.data import SyntheticConfig, gen_synthetic
from vtmatch.hierarchy import (
    AblationFlags,
    ModelDims,
    ModelParams,
    encode_clip,
    encode_pair,
    encode_sentence,
    pair_match,
)
from vtmatch.training import (
    AdamState,
    TrainConfig,
    _loss_terms,
    build_batch,
    epoch_batches,
    fit,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
    triplet_loss,
)

D_E = 6


def tiny_dataset(n_pairs=4, seed=0):
    cfg = SyntheticConfig(
        n_pairs=n_pairs, clips_per_video=(1, 3), frames_per_clip=(2, 3),
        words_per_sentence=(2, 3), d_f=5, d_w=4, n_concepts=4,
        noise_sigma=0.1, distractor_fraction=0.2, seed=seed,
    )
    return gen_synthetic(cfg)


def tiny_params(seed=0):
    return ModelParams.init(ModelDims(d_f=5, d_w=4, d_e=D_E, n_f=4), seed=seed)


def train_cfg(**kw):
    base = dict(batch_pairs=2, epochs=2, seed=0,
                dims=ModelDims(d_f=5, d_w=4, d_e=D_E, n_f=4))
    base.update(kw)
    return TrainConfig(**base)


class TestLossStructure:
    def test_zero_params_gives_pure_margin_counts(self):
        # with all weights zero every embedding and match score collapses
        # to zero, so each hinge contributes exactly its margin
        ds = tiny_dataset(n_pairs=3)
        params = tiny_params()
        for t in params.named_parameters().values():
            t.value[...] = 0.0
        cfg = train_cfg(batch_pairs=3, margin_video=0.3, margin_clip=0.7)
        batch = ds.pairs
        b = len(batch)
        breakdown = triplet_loss(batch, params, cfg)
        np.testing.assert_allclose(breakdown.video_term, b * (b - 1) * 0.3, atol=1e-12)

        n_sents = [len(p.sentences) for _, p in batch]
        n_clips = [len(v.clips) for v, _ in batch]
        intra = sum(min(n_clips[i], n_sents[i]) * (n_sents[i] - 1) for i in range(b))
        inter = sum(
            min(n_clips[i], n_sents[i]) * n_sents[ip]
            for i in range(b) for ip in range(b) if ip != i
        )
        np.testing.assert_allclose(breakdown.clip_intra_term, intra * 0.7, atol=1e-12)
        np.testing.assert_allclose(breakdown.clip_inter_term, inter * 0.7, atol=1e-12)
        np.testing.assert_allclose(
            breakdown.total, (b * (b - 1) * 0.3) + (intra + inter) * 0.7, atol=1e-12
        )

    def test_terms_match_direct_enumeration(self):
        # re-derive each term with standalone forward calls and plain
        # python hinges, no caching, and compare against _loss_terms
        ds = tiny_dataset(n_pairs=3, seed=5)
        params = tiny_params(seed=2)
        cfg = train_cfg(batch_pairs=3, margin_video=0.25, margin_clip=0.15)
        batch = ds.pairs
        b = len(batch)
        flags = AblationFlags()

        def dist(i, ip):
            emb = encode_pair(batch[i][0], batch[ip][1], params, flags)
            return np.linalg.norm(emb.video_vec.value - emb.para_vec.value)

        def score(i, ip, j, jp):
            cs = encode_clip(batch[i][0].clips[j], params)
            ws = encode_sentence(batch[ip][1].sentences[jp], params)
            cond = condition_pair(cs, ws, params.proj)
            return pair_match(cond, params, flags).item()

        hinge = lambda x, m: max(0.0, x + m)
        want1 = sum(
            hinge(dist(i, i) - dist(i, ip), cfg.margin_video)
            for i in range(b) for ip in range(b) if ip != i
        )
        want2 = want3 = 0.0
        for i in range(b):
            nc = len(batch[i][0].clips)
            ns = len(batch[i][1].sentences)
            for j in range(min(nc, ns)):
                pos = score(i, i, j, j)
                for jp in range(ns):
                    if jp != j:
                        want2 += hinge(score(i, i, j, jp) - pos, cfg.margin_clip)
                for ip in range(b):
                    if ip == i:
                        continue
                    for jp in range(len(batch[ip][1].sentences)):
                        want3 += hinge(score(i, ip, j, jp) - pos, cfg.margin_clip)

        got = triplet_loss(batch, params, cfg)
        np.testing.assert_allclose(got.video_term, want1, atol=1e-10)
        np.testing.assert_allclose(got.clip_intra_term, want2, atol=1e-10)
        np.testing.assert_allclose(got.clip_inter_term, want3, atol=1e-10)

    def test_paper_literal_hinge_flips_sign(self):
        ds = tiny_dataset(n_pairs=2, seed=1)
        params = tiny_params(seed=1)
        default = triplet_loss(ds.pairs, params, train_cfg(margin_clip=0.0))
        flipped = triplet_loss(
            ds.pairs, params, train_cfg(margin_clip=0.0, paper_literal_clip_hinge=True)
        )
        # at zero margin, hinge(x) + hinge(-x) = |x|, so the two variants
        # only agree when every score difference vanishes
        assert default.clip_inter_term != flipped.clip_inter_term

    def test_batch_order_invariance(self):
        ds = tiny_dataset(n_pairs=3, seed=4)
        params = tiny_params(seed=3)
        cfg = train_cfg(batch_pairs=3)
        fwd = triplet_loss(ds.pairs, params, cfg)
        rev = triplet_loss(list(reversed(ds.pairs)), params, cfg)
        np.testing.assert_allclose(fwd.total, rev.total, rtol=1e-12)
        np.testing.assert_allclose(fwd.video_term, rev.video_term, rtol=1e-12)

    def test_single_pair_batch_rejected(self):
        ds = tiny_dataset(n_pairs=2)
        with pytest.raises(ValueError):
            triplet_loss(ds.pairs[:1], tiny_params(), train_cfg())

    def test_loss_gradient_against_finite_differences(self):
        ds = tiny_dataset(n_pairs=2, seed=3)
        cfg = train_cfg()

        params = tiny_params(seed=3)
        named = params.named_parameters()

        def loss_fn(_):
            t1, t2, t3 = _loss_terms(ds.pairs, params, cfg)
            return t1 + t2 + t3

        worst = dc.grad_check(loss_fn, named, eps=1e-5)
        assert worst < 1e-4


class TestBatching:
    def test_build_batch_distinct_and_seeded(self):
        ds = tiny_dataset(n_pairs=8)
        a = build_batch(ds.pairs, 4, np.random.default_rng(11))
        b = build_batch(ds.pairs, 4, np.random.default_rng(11))
        assert [v.id for v, _ in a] == [v.id for v, _ in b]
        assert len({v.id for v, _ in a}) == 4

    def test_build_batch_too_large(self):
        ds = tiny_dataset(n_pairs=3)
        with pytest.raises(ValueError):
            build_batch(ds.pairs, 4, np.random.default_rng(0))

    def test_epoch_batches_partition(self):
        ds = tiny_dataset(n_pairs=8)
        batches = epoch_batches(ds.pairs, 3, np.random.default_rng(0))
        seen = [v.id for batch in batches for v, _ in batch]
        assert sorted(seen) == sorted(v.id for v, _ in ds.pairs)
        assert [len(batch) for batch in batches] == [3, 3, 2]

    def test_epoch_batches_drops_singleton_remainder(self):
        ds = tiny_dataset(n_pairs=7)
        batches = epoch_batches(ds.pairs, 3, np.random.default_rng(0))
        assert [len(batch) for batch in batches] == [3, 3]


class TestOptimizer:
    def _named(self, values):
        return {name: dc.Tensor(np.array(v, dtype=float), name=name)
                for name, v in values.items()}

    def test_first_step_is_signed_learning_rate(self):
        named = self._named({"w": [[1.0, -2.0]]})
        grads = {"w": np.array([[0.5, -3.0]])}
        optimizer_step(named, grads, AdamState(), lr=0.1)
        # m_hat = g and v_hat = g*g on step one, so the move is
        # -lr * g / (|g| + eps) = -lr * sign(g) up to eps
        np.testing.assert_allclose(named["w"].value, [[0.9, -1.9]], atol=1e-7)

    def test_zero_gradient_is_noop(self):
        named = self._named({"w": [[1.0, 2.0]]})
        optimizer_step(named, {"w": np.zeros((1, 2))}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(named["w"].value, [[1.0, 2.0]])

    def test_five_steps_match_closed_form(self):
        beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.05
        named = self._named({"w": [[0.7]]})
        state = AdamState()
        w = 0.7
        m = v = 0.0
        for t in range(1, 6):
            g = 2.0 * w  # gradient of w^2
            optimizer_step(named, {"w": np.array([[g]])}, state, lr=lr)
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            w -= lr * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
            np.testing.assert_allclose(named["w"].value, [[w]], rtol=1e-12)

    def test_nonfinite_gradient_raises(self):
        named = self._named({"w": [[1.0]]})
        with pytest.raises(FloatingPointError, match="w"):
            optimizer_step(named, {"w": np.array([[np.nan]])}, AdamState(), lr=0.1)


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        params = tiny_params(seed=9)
        state = AdamState(step=3)
        for name, t in params.named_parameters().items():
            state.m[name] = np.full_like(t.value, 0.25)
            state.v[name] = np.full_like(t.value, 0.5)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg_seed=9, epoch=4, opt_state=state)
        loaded, header, opt = load_checkpoint(path)
        assert header["epoch"] == 4 and header["seed"] == 9
        assert opt.step == 3
        for name, t in params.named_parameters().items():
            np.testing.assert_array_equal(loaded.named_parameters()[name].value, t.value)
            np.testing.assert_array_equal(opt.m[name], state.m[name])

    def test_truncated_file_rejected(self, tmp_path):
        params = tiny_params()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg_seed=0, epoch=1)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_non_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b'{"format": "something-else"}\n')
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)


class TestFit:
    def test_zero_epochs_emits_initial_checkpoint(self, tmp_path):
        ds = tiny_dataset(n_pairs=4)
        ckpt = tmp_path / "model.ckpt"
        params, history = fit(ds, train_cfg(epochs=0), checkpoint_path=ckpt)
        assert history == []
        loaded, header, _ = load_checkpoint(ckpt)
        assert header["epoch"] == 0
        fresh = ModelParams.init(train_cfg().dims, seed=0)
        for name, t in fresh.named_parameters().items():
            np.testing.assert_array_equal(loaded.named_parameters()[name].value, t.value)

    def test_loss_decreases(self, tmp_path):
        ds = tiny_dataset(n_pairs=4, seed=2)
        cfg = train_cfg(epochs=6, batch_pairs=4, learning_rate=5e-3)
        _, history = fit(ds, cfg, log_path=tmp_path / "loss.jsonl")
        assert history[-1].total < history[0].total
        lines = (tmp_path / "loss.jsonl").read_text().splitlines()
        assert len(lines) == 6

    def test_resume_equals_uninterrupted(self, tmp_path):
        ds = tiny_dataset(n_pairs=4, seed=2)
        straight, _ = fit(ds, train_cfg(epochs=4))

        ckpt = tmp_path / "mid.ckpt"
        fit(ds, train_cfg(epochs=2), checkpoint_path=ckpt)
        resumed, _ = fit(ds, train_cfg(epochs=4), resume_from=ckpt)

        for name, t in straight.named_parameters().items():
            np.testing.assert_array_equal(
                resumed.named_parameters()[name].value, t.value
            )

    def test_repeat_runs_identical(self):
        ds = tiny_dataset(n_pairs=4, seed=2)
        a, ha = fit(ds, train_cfg(epochs=3))
        b, hb = fit(ds, train_cfg(epochs=3))
        assert [h.total for h in ha] == [h.total for h in hb]
        for name, t in a.named_parameters().items():
            np.testing.assert_array_equal(b.named_parameters()[name].value, t.value)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            fit(tiny_dataset(), train_cfg(batch_pairs=1))
        with pytest.raises(ValueError):
            fit(tiny_dataset(), train_cfg(learning_rate=0.0))
