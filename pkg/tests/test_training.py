"""Trainer mechanics: determinism, clipping, optimizers, checkpoints."""

import copy

import numpy as np
import pytest

from xdmatch.checkpoint import (
    export_embeddings_tsv,
    load_checkpoint,
    save_checkpoint,
)
from xdmatch.losses import LossConfig
from xdmatch.training import (
    LOSS_KEYS,
    AdamState,
    BatchPlanner,
    DivergenceError,
    GradientSet,
    Model,
    Optimizer,
    TrainerConfig,
    compute_all_embeddings,
    loss_and_grads,
    total_from_components,
    train,
)

from conftest import toy_graphs, toy_trainer_config


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="learning_rate"):
            TrainerConfig(learning_rate=0.0)
        with pytest.raises(ValueError, match="epochs"):
            TrainerConfig(epochs=0)
        with pytest.raises(ValueError, match="optimizer"):
            TrainerConfig(optimizer="lbfgs")

    def test_model_init_shapes_and_determinism(self, toy_pair):
        s, t, _ = toy_pair
        cfg = toy_trainer_config()
        m1 = Model.init(s, t, cfg)
        m2 = Model.init(s, t, cfg)
        assert m1.source.embeddings.shape == (s.n_nodes(), cfg.dim_in)
        assert m1.source.layers[0].W.shape == (cfg.dim_out, cfg.dim_in)
        assert m1.source.layers[1].W.shape == (cfg.dim_out, cfg.dim_out)
        assert np.array_equal(m1.source.embeddings, m2.source.embeddings)
        assert not np.array_equal(m1.source.embeddings, m1.target.embeddings)


class TestLossAndGrads:
    def test_all_families_present_on_toy_plan(self, toy_pair):
        s, t, aligned = toy_pair
        cfg = toy_trainer_config()
        model = Model.init(s, t, cfg)
        planner = BatchPlanner(s, t, aligned, cfg)
        plan = planner.plan_step(np.random.default_rng(0))
        comps, grads = loss_and_grads(plan, model, cfg.loss)
        assert set(comps) >= set(LOSS_KEYS)
        for key in ("L_Ns", "L_Nt", "L_intra", "L_inter_t"):
            assert comps[key] > 0.0
        assert grads.global_norm() > 0.0
        assert np.isfinite(total_from_components(comps, cfg.loss))

    def test_strict_cold_start_skips_inter_user(self, toy_pair):
        s, t, aligned = toy_pair
        cfg = toy_trainer_config(strict_cold_start=True)
        planner = BatchPlanner(s, t, aligned, cfg)
        plan = planner.plan_step(np.random.default_rng(0))
        assert plan.inter_user is None

    def test_isolate_zeroes_other_families(self, toy_pair):
        s, t, aligned = toy_pair
        cfg = toy_trainer_config()
        model = Model.init(s, t, cfg)
        planner = BatchPlanner(s, t, aligned, cfg)
        plan = planner.plan_step(np.random.default_rng(1))
        comps, _ = loss_and_grads(plan, model, cfg.loss, isolate="L_Ns")
        assert comps["L_Ns"] > 0.0
        assert comps["L_Nt"] == 0.0 and comps["L_intra"] == 0.0


class TestGradientSet:
    def test_clip_caps_global_norm(self, toy_pair):
        s, t, aligned = toy_pair
        cfg = toy_trainer_config()
        model = Model.init(s, t, cfg)
        grads = GradientSet.zeros_like(model)
        grads.source.W1[:] = 10.0
        before = grads.global_norm()
        returned = grads.clip_(5.0)
        assert returned == pytest.approx(before)
        assert grads.global_norm() == pytest.approx(5.0, rel=1e-12)

    def test_clip_leaves_small_gradients_alone(self, toy_pair):
        s, t, _ = toy_pair
        model = Model.init(s, t, toy_trainer_config())
        grads = GradientSet.zeros_like(model)
        grads.target.a2[0] = 0.5
        grads.clip_(5.0)
        assert grads.target.a2[0] == 0.5

    def test_check_finite_raises_on_nan(self, toy_pair):
        s, t, _ = toy_pair
        model = Model.init(s, t, toy_trainer_config())
        grads = GradientSet.zeros_like(model)
        grads.source.E[0, 0] = np.nan
        with pytest.raises(Exception, match="src.E"):
            grads.check_finite()


class TestAdam:
    def test_dense_update_matches_reference(self):
        # one-parameter Adam against the textbook update
        st = AdamState((1,))
        p = np.array([1.0])
        g = np.array([0.5])
        st.update(p, g, lr=0.1)
        mh = (0.1 * 0.5) / (1 - 0.9)
        vh = (0.001 * 0.25) / (1 - 0.999)
        want = 1.0 - 0.1 * mh / (np.sqrt(vh) + 1e-8)
        assert p[0] == pytest.approx(want, rel=1e-12)

    def test_lazy_rows_track_dense_per_row(self):
        # a row touched twice must match a dense 2-step Adam on that row,
        # regardless of other rows being touched in between
        rng = np.random.default_rng(0)
        lazy = AdamState((4, 3), per_row=True)
        dense = AdamState((1, 3))
        p_lazy = rng.normal(size=(4, 3))
        p_dense = p_lazy[2:3].copy()
        g1, g2 = rng.normal(size=(2, 4, 3))
        g_other = g1.copy()
        g_other[2] = 0.0
        lazy.update(p_lazy, g1, 0.05, rows=np.array([0, 2]))
        lazy.update(p_lazy, g_other, 0.05, rows=np.array([0, 1]))  # skips row 2
        lazy.update(p_lazy, g2, 0.05, rows=np.array([2]))
        dense.update(p_dense, g1[2:3], 0.05)
        dense.update(p_dense, g2[2:3], 0.05)
        assert np.allclose(p_lazy[2], p_dense[0], atol=1e-12)

    def test_untouched_rows_unchanged(self):
        st = AdamState((3, 2), per_row=True)
        p = np.ones((3, 2))
        g = np.ones((3, 2))
        st.update(p, g, 0.1, rows=np.array([1]))
        assert np.all(p[0] == 1.0) and np.all(p[2] == 1.0)
        assert np.all(p[1] != 1.0)


class TestOptimizer:
    def test_sgd_step_oracle(self, toy_pair):
        s, t, _ = toy_pair
        cfg = toy_trainer_config(optimizer="sgd", learning_rate=0.1)
        model = Model.init(s, t, cfg)
        before = model.source.embeddings.copy()
        w_before = model.source.layers[0].W.copy()
        grads = GradientSet.zeros_like(model)
        grads.source.E[3] = 2.0
        grads.source.W1[:] = 1.0
        Optimizer(model, cfg).step(model, grads)
        assert np.allclose(model.source.embeddings[3], before[3] - 0.2)
        assert np.allclose(model.source.embeddings[0], before[0])
        assert np.allclose(model.source.layers[0].W, w_before - 0.1)


class TestTrainLoop:
    def test_deterministic_given_seed(self, toy_pair):
        s, t, aligned = toy_pair
        m1, h1 = train(s, t, aligned, toy_trainer_config(seed=3))
        m2, h2 = train(s, t, aligned, toy_trainer_config(seed=3))
        assert h1 == h2
        assert np.array_equal(m1.target.embeddings, m2.target.embeddings)
        assert np.array_equal(m1.source.layers[1].a, m2.source.layers[1].a)

    def test_different_seeds_diverge(self, toy_pair):
        s, t, aligned = toy_pair
        m1, _ = train(s, t, aligned, toy_trainer_config(seed=3))
        m2, _ = train(s, t, aligned, toy_trainer_config(seed=4))
        assert not np.array_equal(m1.target.embeddings, m2.target.embeddings)

    def test_history_records_components(self, toy_pair):
        s, t, aligned = toy_pair
        _, hist = train(s, t, aligned, toy_trainer_config())
        assert len(hist) == 2  # epochs=1 * steps_per_epoch=2
        for rec in hist:
            assert set(rec) == {"step", "total", *LOSS_KEYS}
            assert rec["total"] == pytest.approx(
                total_from_components(rec, toy_trainer_config().loss)
            )

    def test_log_stream_receives_jsonl(self, toy_pair):
        import io
        import json

        s, t, aligned = toy_pair
        buf = io.StringIO()
        train(s, t, aligned, toy_trainer_config(), log_stream=buf)
        lines = buf.getvalue().strip().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["step"] == 1

    def test_divergence_guard(self, toy_pair, monkeypatch):
        # feed the loop an escalating total so the 10x ratio trips
        import xdmatch.training as T

        s, t, aligned = toy_pair
        totals = iter([1.0, 2.0, 20.0, 30.0])
        monkeypatch.setattr(T, "total_from_components", lambda c, l: next(totals))
        with pytest.raises(DivergenceError, match="10x"):
            train(s, t, aligned, toy_trainer_config(steps_per_epoch=4))

    def test_resume_continues_from_model(self, toy_pair):
        s, t, aligned = toy_pair
        m1, _ = train(s, t, aligned, toy_trainer_config(seed=5))
        snapshot = copy.deepcopy(m1.source.embeddings)
        m2, _ = train(s, t, aligned, toy_trainer_config(seed=6), model=m1)
        assert m2 is m1
        assert not np.array_equal(m1.source.embeddings, snapshot)

    def test_default_steps_cover_active_nodes(self, toy_pair):
        s, t, aligned = toy_pair
        cfg = toy_trainer_config(steps_per_epoch=None, batch_size=4)
        _, hist = train(s, t, aligned, cfg)
        active = sum(1 for i in range(t.n_nodes()) if t.degree(i) > 0)
        assert len(hist) == -(-active // 4)


class TestEmbeddingExport:
    def test_compute_all_embeddings_deterministic(self, toy_pair):
        s, t, aligned = toy_pair
        model, _ = train(s, t, aligned, toy_trainer_config())
        e1 = compute_all_embeddings(model.target, t, (3, 2), seed=9)
        e2 = compute_all_embeddings(model.target, t, (3, 2), seed=9)
        e3 = compute_all_embeddings(model.target, t, (3, 2), seed=10)
        assert np.array_equal(e1, e2)
        assert not np.array_equal(e1, e3)
        assert e1.shape == (t.n_nodes(), 5)

    def test_export_tsv_format(self, toy_pair, tmp_path):
        s, t, _ = toy_pair
        model = Model.init(s, t, toy_trainer_config())
        vecs = compute_all_embeddings(model.target, t, (3, 2), seed=0)
        p = str(tmp_path / "emb.tsv")
        export_embeddings_tsv(t.nodes, vecs, p)
        lines = open(p).read().splitlines()
        assert len(lines) == t.n_nodes()
        parts = lines[0].split("\t")
        assert len(parts) == 3 + 5
        float(parts[3])  # vector coordinates parse


class TestCheckpoint:
    def test_round_trip_preserves_arrays(self, toy_pair, tmp_path):
        s, t, aligned = toy_pair
        model, _ = train(s, t, aligned, toy_trainer_config())
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, {"source": s, "target": t}, path)
        loaded, node_lists = load_checkpoint(path)
        # payload is float32, so the round trip is exact at f4 resolution
        for name in ("source", "target"):
            dm, lm = model.domain(name), loaded.domain(name)
            assert np.allclose(dm.embeddings, lm.embeddings, atol=1e-6)
            assert np.allclose(dm.layers[0].W, lm.layers[0].W, atol=1e-6)
            assert np.allclose(dm.layers[1].a, lm.layers[1].a, atol=1e-6)
        assert [n.external_id for n in node_lists["target"]] == [
            n.external_id for n in t.nodes
        ]

    def test_rejects_non_checkpoint(self, tmp_path):
        p = tmp_path / "bogus.ckpt"
        p.write_bytes(b"hello\nend-header\n")
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(str(p))

    def test_save_is_deterministic(self, toy_pair, tmp_path):
        s, t, _ = toy_pair
        model = Model.init(s, t, toy_trainer_config())
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(model, {"source": s, "target": t}, p1)
        save_checkpoint(model, {"source": s, "target": t}, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()
