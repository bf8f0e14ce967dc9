import numpy as np
import pytest

import lilylab.adapters as ad
import lilylab.encoder as enc
import lilylab.training as tr
from lilylab.linalg import seeded_gaussian

TINY = enc.EncoderConfig(n_layers=2, d_model=8, n_heads=2, d_ff=16, vocab=16,
                         seq_len=4, n_classes=3)
DESK = enc.EncoderConfig()


class TestMakeTask:
    def test_same_seed_identical_bytes(self, tmp_path):
        a = tr.make_task(3, TINY, 32, 16)
        b = tr.make_task(3, TINY, 32, 16)
        for field in ("train_tokens", "train_labels", "val_tokens", "val_labels"):
            assert np.array_equal(getattr(a, field), getattr(b, field))
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        tr.save_task_csv(pa, a.train_tokens, a.train_labels)
        tr.save_task_csv(pb, b.train_tokens, b.train_labels)
        assert pa.read_bytes() == pb.read_bytes()

    def test_teacher_self_consistency(self):
        # rebuilding the teacher and its calibration offset from the task
        # seed and re-scoring the task rows reproduces the labels exactly
        from lilylab.linalg import derive_seed

        task = tr.make_task(5, TINY, 32, 16)
        teacher = enc.build_encoder(TINY, derive_seed(5, "teacher"))
        bundle = enc.frozen_bundle()
        calib_rng = np.random.Generator(
            np.random.PCG64(derive_seed(5, "calibration")))
        calib = calib_rng.integers(0, TINY.vocab, size=(256, TINY.seq_len),
                                   dtype=np.int64)
        offset = np.mean(enc.logits_batch(teacher, bundle, calib), axis=0)
        for tokens, labels in ((task.train_tokens, task.train_labels),
                               (task.val_tokens, task.val_labels)):
            recomputed = np.argmax(
                enc.logits_batch(teacher, bundle, tokens) - offset, axis=1)
            assert np.array_equal(recomputed, labels)

    def test_splits_disjoint_and_balanced(self):
        task = tr.make_task(0, TINY, 64, 32)
        train = {tuple(r) for r in task.train_tokens}
        val = {tuple(r) for r in task.val_tokens}
        assert not train & val
        for labels, n in ((task.train_labels, 64), (task.val_labels, 32)):
            counts = np.bincount(labels, minlength=TINY.n_classes)
            assert counts.min() >= 1

    def test_overall_balance_within_two_of_uniform(self):
        task = tr.make_task(0, DESK, 256, 128)
        labels = np.concatenate([task.train_labels, task.val_labels])
        counts = np.bincount(labels, minlength=DESK.n_classes)
        target = labels.size / DESK.n_classes
        assert counts.min() >= target / 2
        assert counts.max() <= target * 2

    def test_csv_roundtrip(self, tmp_path):
        task = tr.make_task(1, TINY, 16, 8)
        path = tmp_path / "train.csv"
        tr.save_task_csv(path, task.train_tokens, task.train_labels)
        tokens, labels = tr.load_task_csv(path)
        assert np.array_equal(tokens, task.train_tokens)
        assert np.array_equal(labels, task.train_labels)

    def test_linear_probe_beats_chance(self):
        # independent oracle: scikit-learn logistic regression on frozen
        # student features must clear chance + 10 points, otherwise the
        # synthetic task carries no learnable signal
        from sklearn.linear_model import LogisticRegression

        task = tr.make_task(0, DESK, 256, 128)
        student = enc.build_encoder(DESK, 999)
        bundle = enc.frozen_bundle()
        ftrain = enc.pooled_features(student, bundle, task.train_tokens)
        fval = enc.pooled_features(student, bundle, task.val_tokens)
        probe = LogisticRegression(max_iter=2000).fit(ftrain, task.train_labels)
        acc = probe.score(fval, task.val_labels)
        assert acc > 1 / DESK.n_classes + 0.10, f"probe accuracy {acc:.3f}"


class TestAdamStep:
    def test_zero_gradient_zero_decay_is_identity(self):
        opt = tr.OptimizerConfig(lr=1e-3, weight_decay=0.0)
        p = {"w": seeded_gaussian(3, 3, 1.0, 1)}
        before = p["w"].copy()
        tr.step(p, {"w": np.zeros((3, 3))}, tr.AdamState(), opt)
        assert np.array_equal(p["w"], before)

    def test_constant_gradient_approaches_sign_update(self):
        opt = tr.OptimizerConfig(lr=1e-3, weight_decay=0.0, eps=1e-12)
        g = np.array([[0.3, -2.0, 0.001]])
        p = {"w": np.zeros((1, 3))}
        state = tr.AdamState()
        prev = p["w"].copy()
        for _ in range(500):
            prev = p["w"].copy()
            tr.step(p, {"w": g.copy()}, state, opt)
        delta = p["w"] - prev
        # the moment recursions converge to m-hat = g, v-hat = g*g, so the
        # per-step move tends to -lr * sign(g)
        assert np.max(np.abs(delta - (-opt.lr * np.sign(g)))) < 1e-6

    def test_decoupled_decay_shrinks_parameters(self):
        opt = tr.OptimizerConfig(lr=0.01, weight_decay=0.5)
        p = {"w": seeded_gaussian(2, 2, 1.0, 2)}
        before = p["w"].copy()
        tr.step(p, {"w": np.zeros((2, 2))}, tr.AdamState(), opt)
        assert np.max(np.abs(p["w"] - before * (1 - 0.01 * 0.5))) < 1e-15

    def test_shape_mismatch_rejected(self):
        opt = tr.OptimizerConfig()
        with pytest.raises(ValueError, match="shape"):
            tr.step({"w": np.zeros((2, 2))}, {"w": np.zeros((3, 3))},
                    tr.AdamState(), opt)

    def test_unknown_gradient_name_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            tr.step({"w": np.zeros((1, 1))}, {"v": np.zeros((1, 1))},
                    tr.AdamState(), tr.OptimizerConfig())


class TestSchedules:
    def test_constant(self):
        opt = tr.OptimizerConfig(lr=0.1, lr_schedule="constant")
        assert tr.lr_at(opt, 50, 100) == 0.1

    def test_linear_decay(self):
        opt = tr.OptimizerConfig(lr=0.1, lr_schedule="linear-decay")
        assert abs(tr.lr_at(opt, 50, 100) - 0.05) < 1e-15
        assert tr.lr_at(opt, 0, 100) == 0.1

    def test_cosine(self):
        opt = tr.OptimizerConfig(lr=0.1, lr_schedule="cosine")
        assert tr.lr_at(opt, 0, 100) == 0.1
        assert abs(tr.lr_at(opt, 50, 100) - 0.05) < 1e-15

    def test_unknown_schedule_rejected(self):
        with pytest.raises(ValueError):
            tr.OptimizerConfig(lr_schedule="step")


def tiny_run(lr=5e-3, epochs=2, seed=4, router_mode="routed"):
    task = tr.make_task(7, TINY, 32, 16)
    model = enc.build_encoder(TINY, 11)
    cfg = ad.LilyConfig(rank_r=2, ne_1=2, ne_2=2, router_mode=router_mode)
    bundle = enc.inject(model, cfg.placement, cfg, 12)
    opt = tr.OptimizerConfig(lr=lr, epochs=epochs, batch_size=8)
    return tr.train(model, bundle, task, opt, seed), model, bundle, task


class TestTrain:
    def test_zero_learning_rate_is_a_no_op(self):
        trace, _, _, _ = tiny_run(lr=0.0)
        assert trace.val_accuracy[-1] == trace.initial_val_accuracy

    def test_initial_accuracy_matches_frozen_model(self):
        task = tr.make_task(7, TINY, 32, 16)
        model = enc.build_encoder(TINY, 11)
        frozen_acc = enc.accuracy(model, enc.frozen_bundle(),
                                  task.val_tokens, task.val_labels)
        trace, _, _, _ = tiny_run(lr=5e-3, epochs=1)
        assert trace.initial_val_accuracy == frozen_acc

    def test_identical_seeds_identical_traces(self, tmp_path):
        a, _, _, _ = tiny_run(seed=21)
        b, _, _, _ = tiny_run(seed=21)
        assert a.losses == b.losses
        assert a.val_accuracy == b.val_accuracy
        for sa, sb in zip(a.snapshots, b.snapshots):
            for name in sa:
                assert np.array_equal(sa[name], sb[name])
        da, db = tmp_path / "a", tmp_path / "b"
        tr.save_trace_csvs(a, da)
        tr.save_trace_csvs(b, db)
        for name in ("loss.csv", "accuracy.csv", "routes.csv"):
            assert (da / name).read_bytes() == (db / name).read_bytes()

    def test_different_seeds_differ(self):
        a, _, _, _ = tiny_run(seed=21)
        b, _, _, _ = tiny_run(seed=22)
        assert a.losses != b.losses

    def test_route_logs_sum_to_one(self):
        trace, _, _, _ = tiny_run()
        assert trace.route_log
        for (_e, _b, _l, weights) in trace.route_log:
            assert abs(weights.sum() - 1.0) < 1e-9
            assert np.all(weights >= 0)

    def test_uniform_mode_logs_exact_uniform(self):
        trace, _, _, _ = tiny_run(router_mode="uniform")
        for (_e, _b, _l, weights) in trace.route_log:
            assert np.all(weights == 0.5)

    def test_snapshot_and_loss_lengths(self):
        trace, _, _, task = tiny_run(epochs=3)
        assert len(trace.snapshots) == 3
        assert len(trace.val_accuracy) == 3
        assert len(trace.losses) == 3 * trace.n_batches_per_epoch

    def test_divergence_aborts_with_step_index(self):
        task = tr.make_task(7, TINY, 32, 16)
        model = enc.build_encoder(TINY, 11)
        model.head[0, 0] = np.nan
        cfg = ad.LilyConfig(rank_r=2, ne_1=2, ne_2=2)
        bundle = enc.inject(model, cfg.placement, cfg, 12)
        with pytest.raises(tr.DivergenceError) as err:
            tr.train(model, bundle, task, tr.OptimizerConfig(epochs=1,
                                                             batch_size=8), 1)
        assert err.value.step_index == 0


@pytest.mark.slow
class TestBudgetMatchedComparison:
    """Thirty epochs: shared routed adapters at rank 32 against per-layer
    rank-8 pairs under a smaller parameter budget, both clearing a
    head-only baseline by a wide margin."""

    def test_lily_matches_lora_and_both_beat_frozen(self):
        # the per-layer baseline budget L * 2 * C * r must dominate the
        # shared adapters' ne * C * (2 r); at C=64, r32-vs-r8 needs L >= 9.
        # 1024 training rows keep both adapter flavors out of the
        # memorization regime that flattens their validation gains.
        ecfg = enc.EncoderConfig(n_layers=9)
        task = tr.make_task(0, ecfg, 1024, 256)
        opt = tr.OptimizerConfig(epochs=30)
        lily_cfg = ad.LilyConfig(rank_r=32, ne_1=2, ne_2=2)
        lora_cfg = ad.LoraConfig(rank_r=8)

        import lilylab.analysis as an
        an.check_budget(lily_cfg, lora_cfg, ecfg)

        results = {}
        for name, acfg in (("lily", lily_cfg), ("lora", lora_cfg), ("frozen", None)):
            model = enc.build_encoder(ecfg, 31)
            if acfg is None:
                bundle = enc.frozen_bundle()
            else:
                bundle = enc.inject(model, acfg.placement, acfg, 32)
            trace = tr.train(model, bundle, task, opt, seed=33)
            results[name] = trace.final_val_accuracy
        print("budget-matched:", results)
        assert results["lily"] >= results["lora"] - 0.02
        assert results["lily"] >= results["frozen"] + 0.15
        assert results["lora"] >= results["frozen"] + 0.15
