import hashlib
import os

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from setcomp.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from setcomp.labelsets import LabelSet, is_subset
from setcomp.nets import EncoderConfig
from setcomp.render import GRID_SCENE, RenderSpec
from setcomp.training import (
    SupervisedModel,
    TrainConfig,
    UnionModel,
    make_supervised_scenes,
    sample_episode,
    sample_negative,
    sample_query_pairs,
    train_model1,
    train_model2,
    train_model3,
)

CHI2_CRIT = {23: 41.64, 4: 13.28}  # alpha = 0.01


def store_digest(store):
    h = hashlib.sha256()
    for cid in store.class_ids:
        for g in store.classes[cid]:
            h.update(g.tobytes())
    return h.hexdigest()


@pytest.fixture
def fast_config(tiny_encoder_config):
    return TrainConfig(steps=12, batch_size=6, seed=0, cap=3, k=5, lr=1e-3)


class TestSampleNegative:
    def test_never_returns_the_anchor(self, rng):
        t = LabelSet.from_indices([0, 2], 5)
        for _ in range(5000):
            assert sample_negative(5, 3, t, rng).mask != t.mask

    def test_uniform_over_candidates_chi2(self):
        rng = np.random.default_rng(7)
        t = LabelSet.from_indices([1], 5)
        counts: dict[int, int] = {}
        n = 100_000
        for _ in range(n):
            got = sample_negative(5, 3, t, rng)
            counts[got.mask] = counts.get(got.mask, 0) + 1
        assert len(counts) == 24
        stat, _ = chisquare(list(counts.values()))
        assert stat < CHI2_CRIT[23]

    def test_empty_pool_is_invalid_state(self, rng):
        with pytest.raises(RuntimeError):
            sample_negative(1, 1, LabelSet(1, 1), rng)

    def test_respects_cap(self, rng):
        t = LabelSet.from_indices([0], 4)
        assert all(len(sample_negative(4, 2, t, rng)) <= 2 for _ in range(200))


class TestSampleEpisode:
    def test_episode_classes_distinct_and_batch_sized(self, tiny_store, default_spec):
        cfg = TrainConfig(steps=1, batch_size=9, seed=0, cap=3, k=5)
        episode, refs, composites = sample_episode(tiny_store, tiny_store.class_ids, cfg, default_spec, np.random.default_rng(0))
        assert len(set(episode.class_ids)) == 5
        assert len(refs) == 5
        assert len(composites) == 9
        for i, scene in enumerate(refs):
            assert scene.truth == LabelSet(1 << i, 5)

    def test_size_distribution_uniform_chi2(self, tiny_store, default_spec):
        cfg = TrainConfig(steps=1, batch_size=500, seed=0, cap=3, k=5)
        rng = np.random.default_rng(3)
        sizes = []
        for _ in range(20):
            _, _, composites = sample_episode(tiny_store, tiny_store.class_ids, cfg, default_spec, rng)
            sizes.extend(len(s.truth) for s in composites)
        counts = [sizes.count(s) for s in (1, 2, 3)]
        stat, _ = chisquare(counts)
        assert stat < 9.21  # chi2 alpha=0.01, df=2

    def test_weighted_sizes(self, tiny_store, default_spec):
        cfg = TrainConfig(steps=1, batch_size=400, seed=0, cap=3, k=5, size_weights=(1.0, 0.0, 0.0))
        _, _, composites = sample_episode(tiny_store, tiny_store.class_ids, cfg, default_spec, np.random.default_rng(4))
        assert all(len(s.truth) == 1 for s in composites)

    def test_seed_determinism(self, tiny_store, default_spec):
        cfg = TrainConfig(steps=1, batch_size=4, seed=0, cap=3, k=5)
        ep1, refs1, comp1 = sample_episode(tiny_store, tiny_store.class_ids, cfg, default_spec, np.random.default_rng(11))
        ep2, refs2, comp2 = sample_episode(tiny_store, tiny_store.class_ids, cfg, default_spec, np.random.default_rng(11))
        assert ep1 == ep2
        assert all(np.array_equal(a.image, b.image) for a, b in zip(refs1 + comp1, refs2 + comp2))

    def test_catalog_too_small(self, tiny_store, default_spec, rng):
        cfg = TrainConfig(steps=1, batch_size=4, seed=0, cap=2, k=5)
        with pytest.raises(ValueError):
            sample_episode(tiny_store, tiny_store.class_ids[:3], cfg, default_spec, rng)


class TestSampleQueryPairs:
    def test_exact_half_positive_and_subset_consistency(self, tiny_store, default_spec):
        cfg = TrainConfig(steps=1, batch_size=32, seed=0, cap=5, k=5)
        episode, scenes_a, scenes_b, labels, query_ids = sample_query_pairs(
            tiny_store, tiny_store.class_ids, cfg, default_spec, default_spec, np.random.default_rng(5))
        assert labels.mean() == 0.5
        for scene_a, label, cid in zip(scenes_a, labels, query_ids):
            present = {episode.class_ids[i] for i in range(5) if i in scene_a.truth}
            assert (cid in present) == bool(label)

    def test_sizes_uniform_one_to_five(self, tiny_store, default_spec):
        cfg = TrainConfig(steps=1, batch_size=200, seed=0, cap=5, k=5)
        rng = np.random.default_rng(6)
        sizes = []
        for _ in range(25):
            _, scenes_a, _, _, _ = sample_query_pairs(
                tiny_store, tiny_store.class_ids, cfg, default_spec, default_spec, rng)
            sizes.extend(len(s.truth) for s in scenes_a)
        counts = [sizes.count(s) for s in range(1, 6)]
        stat, _ = chisquare(counts)
        assert stat < CHI2_CRIT[4]

    def test_full_universe_negative_uses_outside_catalog(self, tiny_store, default_spec):
        # force |c(x_a)| = k so negatives must come from outside the episode
        cfg = TrainConfig(steps=1, batch_size=8, seed=0, cap=5, k=5, size_weights=(0, 0, 0, 0, 1.0))
        episode, scenes_a, _, labels, query_ids = sample_query_pairs(
            tiny_store, tiny_store.class_ids, cfg, default_spec, default_spec, np.random.default_rng(7))
        for label, cid in zip(labels, query_ids):
            if not label:
                assert cid not in episode.class_ids

    def test_grid_mode_scenes(self, tiny_store, default_spec):
        cfg = TrainConfig(steps=1, batch_size=6, seed=0, cap=4, k=5)
        grid = RenderSpec(mode=GRID_SCENE, grid_rows=2, grid_cols=2)
        _, scenes_a, scenes_b, _, _ = sample_query_pairs(
            tiny_store, tiny_store.class_ids, cfg, grid, default_spec, np.random.default_rng(8))
        assert all(s.image.shape == (128, 128) for s in scenes_a)
        assert all(s.image.shape == (64, 64) for s in scenes_b)


class TestTrainingLoops:
    def test_model1_runs_and_gradients_reach_f_and_g(self, tiny_store, tiny_encoder_config, fast_config):
        model, ckpt, trace = train_model1(tiny_store, tiny_store.class_ids, fast_config, tiny_encoder_config, "lin")
        assert len(trace) == fast_config.steps
        assert all(np.isfinite(r["loss"]) for r in trace)
        assert ckpt.step == fast_config.steps
        # one more manual step: both encoder and head receive gradients
        from setcomp.compose import fold_table_tensor
        from setcomp.losses import triplet_margin_loss
        from setcomp.nets import to_batch_tensor
        from setcomp.training import sample_episode as se

        model.encoder.train(), model.g_head.train()
        rng = np.random.default_rng(0)
        _, refs, comps = se(tiny_store, tiny_store.class_ids, fast_config, RenderSpec(), rng)
        emb = model.encoder(to_batch_tensor(np.stack([s.image for s in refs + comps]), 64))
        sets, table = fold_table_tensor(emb[:5], model.g_head, 3)
        index = {s.mask: i for i, s in enumerate(sets)}
        pos = [index[s.truth.mask] for s in comps]
        loss = triplet_margin_loss(emb[5:], table[pos], table[[0] * len(comps)], 0.5)
        loss.backward()
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.encoder.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.g_head.parameters())

    def test_model1_loss_decreases_tiny_run(self, tiny_store, tiny_encoder_config):
        cfg = TrainConfig(steps=120, batch_size=8, seed=1, cap=2, k=4, lr=2e-3)
        _, _, trace = train_model1(tiny_store, tiny_store.class_ids, cfg, tiny_encoder_config, "lin")
        losses = [r["loss"] for r in trace]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_training_does_not_mutate_store(self, tiny_store, tiny_encoder_config, fast_config):
        before = store_digest(tiny_store)
        train_model1(tiny_store, tiny_store.class_ids, fast_config, tiny_encoder_config, "mean")
        assert store_digest(tiny_store) == before

    def test_model2_runs(self, tiny_store, tiny_encoder_config):
        cfg = TrainConfig(steps=8, batch_size=6, seed=0, cap=5, k=5)
        model, ckpt, trace = train_model2(tiny_store, tiny_store.class_ids, cfg, tiny_encoder_config, "dnn")
        assert len(trace) == 8
        assert ckpt.configs["h_variant"] == "dnn"

    def test_model3_runs_and_label_grads_are_row_sparse(self, tiny_store, tiny_encoder_config):
        spec = RenderSpec(mode=GRID_SCENE, grid_rows=2, grid_cols=2)
        data = make_supervised_scenes(tiny_store, tiny_store.class_ids[:8], 24, spec,
                                      np.random.default_rng(0), input_size=64)
        cfg = TrainConfig(steps=6, batch_size=4, seed=0, cap=4, k=5)
        from setcomp.nets import Model3Config

        m3 = Model3Config(image_dim=16, label_dim=8, hidden=12, n_classes=8)
        enc = EncoderConfig(m=16, channels=(4, 8, 8, 16), normalize=False)
        model, ckpt, trace = train_model3(data, cfg, enc, m3)
        assert len(trace) == 6
        # query two specific classes: only their embedding rows get gradients
        model.label_embedder.weight.grad = None
        feats = model.image_net(torch.from_numpy(data.images[:2]).unsqueeze(1))
        for cls in (1, 5):
            lab = model.label_embedder.embed_index(torch.tensor([cls, cls]))
            model.head.train()
            model.head(feats, lab).sum().backward(retain_graph=True)
        grads = model.label_embedder.weight.grad
        touched = {i for i in range(8) if grads[i].abs().sum() > 0}
        assert touched == {1, 5}

    def test_divergence_aborts_with_diagnostic(self, tiny_store, tiny_encoder_config, monkeypatch):
        def poisoned(anchor, pos, neg, margin):
            return anchor.sum() * float("nan")

        monkeypatch.setattr("setcomp.training.triplet_margin_loss", poisoned)
        cfg = TrainConfig(steps=5, batch_size=4, seed=0, cap=2, k=4)
        with pytest.raises(RuntimeError, match="diverged at step 0"):
            train_model1(tiny_store, tiny_store.class_ids, cfg, tiny_encoder_config, "linfc")


class TestCheckpointContainer:
    def make_ckpt(self):
        rng = np.random.default_rng(0)
        arrays = {"f/w": rng.standard_normal((3, 4)).astype(np.float32),
                  "g/b": rng.standard_normal(5).astype(np.float32)}
        return Checkpoint(arrays=arrays, configs={"lr": 1e-3, "tag": "x"}, step=7, seed=3)

    def test_round_trip_byte_identical(self, tmp_path):
        path1, path2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        ckpt = self.make_ckpt()
        save_checkpoint(path1, ckpt)
        loaded = load_checkpoint(path1)
        assert loaded.allclose(ckpt)
        save_checkpoint(path2, loaded)
        assert open(path1, "rb").read() == open(path2, "rb").read()

    def test_truncated_payload_names_array(self, tmp_path):
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(path, self.make_ckpt())
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-10])
        with pytest.raises(ValueError, match="g/b"):
            load_checkpoint(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = str(tmp_path / "d.ckpt")
        save_checkpoint(path, self.make_ckpt())
        with open(path, "ab") as fh:
            fh.write(b"\x00\x00")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(path)

    def test_corrupt_header(self, tmp_path):
        path = str(tmp_path / "e.ckpt")
        with open(path, "wb") as fh:
            fh.write(b"not json\n")
        with pytest.raises(ValueError, match="JSON"):
            load_checkpoint(path)


class TestResume:
    def test_resume_replays_identical_losses(self, tiny_store, tiny_encoder_config, tmp_path):
        full_cfg = TrainConfig(steps=16, batch_size=4, seed=5, cap=2, k=4)
        half_cfg = TrainConfig(steps=8, batch_size=4, seed=5, cap=2, k=4)
        _, _, full_trace = train_model1(tiny_store, tiny_store.class_ids, full_cfg, tiny_encoder_config, "lin")

        _, half_ckpt, _ = train_model1(tiny_store, tiny_store.class_ids, half_cfg, tiny_encoder_config, "lin")
        path = str(tmp_path / "half.ckpt")
        save_checkpoint(path, half_ckpt)
        restored = load_checkpoint(path)
        _, final_ckpt, resumed_trace = train_model1(
            tiny_store, tiny_store.class_ids, full_cfg, resume=restored)
        assert [r["step"] for r in resumed_trace] == [r["step"] for r in full_trace[8:]]
        assert [r["loss"] for r in resumed_trace] == [r["loss"] for r in full_trace[8:]]
        assert final_ckpt.step == 16

    def test_model_reconstruction_from_checkpoint(self, tiny_store, tiny_encoder_config):
        cfg = TrainConfig(steps=4, batch_size=4, seed=2, cap=2, k=4)
        model, ckpt, _ = train_model1(tiny_store, tiny_store.class_ids, cfg, tiny_encoder_config, "linfc")
        clone = UnionModel.from_checkpoint(ckpt)
        img = tiny_store.exemplar(0, 0)
        from setcomp.nets import encode

        assert np.array_equal(encode(model.encoder, img), encode(clone.encoder, img))

    def test_resume_beyond_configured_steps_rejected(self, tiny_store, tiny_encoder_config):
        cfg = TrainConfig(steps=4, batch_size=4, seed=2, cap=2, k=4)
        _, ckpt, _ = train_model1(tiny_store, tiny_store.class_ids, cfg, tiny_encoder_config, "lin")
        shorter = TrainConfig(steps=2, batch_size=4, seed=2, cap=2, k=4)
        with pytest.raises(ValueError):
            train_model1(tiny_store, tiny_store.class_ids, shorter, resume=ckpt)
