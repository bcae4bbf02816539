import math

import numpy as np
import pytest

from moeslim import autodiff as ad
from moeslim.autodiff import NumericsError, Tape, Tensor, backward
from moeslim.distill import (
    DistillConfig,
    DistillError,
    TeacherCache,
    TrainState,
    adamw_update,
    cache_teacher_topk,
    clm_loss,
    cosine_lr,
    distill_step,
    kd_topk_loss,
    load_teacher_cache,
    plateau_early_stop,
    run_training,
    save_teacher_cache,
    total_loss,
)
from moeslim.model import ModelConfig, fingerprint, forward_batch, init_model
from moeslim.tasks import TaskSpec, gen_synthetic_corpus


def small_model(seed=0, vocab=8, **kw):
    base = dict(d_model=8, n_head_q=2, n_head_kv=1, d_head=4, d_expert=8, n_layer=1,
                n_expert=2, top_k=2, vocab_size=vocab, max_seq_len=16)
    base.update(kw)
    return init_model(ModelConfig(**base), seed)


def dcfg(**kw):
    base = dict(total_steps=10, batch_tokens=32, warmup_steps=2, eval_every=5, eval_seqs=4)
    base.update(kw)
    return DistillConfig(**base)


class TestKDTopkLoss:
    def test_matching_student_gives_zero(self):
        # student puts the renormalized teacher mass on the support, ~nothing elsewhere
        idx = np.array([[0, 1]])
        probs = np.array([[0.6, 0.3]])
        student = Tensor(np.array([[math.log(2 / 3), math.log(1 / 3), -1e3]]))
        loss = kd_topk_loss(idx, probs, student)
        assert abs(loss.item()) < 1e-12

    def test_hand_computed_two_thirds_ln2(self):
        idx = np.array([[0, 1]])
        probs = np.array([[0.6, 0.3]])  # renormalizes to [2/3, 1/3]
        student = Tensor(np.zeros((1, 3)))  # uniform
        loss = kd_topk_loss(idx, probs, student)
        assert loss.item() == pytest.approx((2 / 3) * math.log(2), abs=1e-12)
        assert round(loss.item(), 5) == 0.46210

    def test_default_k_is_8(self):
        assert dcfg().topk_teacher == 8

    def test_index_out_of_vocab_rejected(self):
        with pytest.raises(DistillError, match="vocab"):
            kd_topk_loss(np.array([[5]]), np.array([[1.0]]), Tensor(np.zeros((1, 3))))

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v, k = 12, 4
            t_logits = rng.normal(scale=2, size=v)
            order = np.argsort(-t_logits)[:k]
            p = np.exp(t_logits - t_logits.max())
            p /= p.sum()
            student = Tensor(rng.normal(scale=2, size=(1, v)))
            loss = kd_topk_loss(order[None, :], p[order][None, :], student)
            assert loss.item() >= -1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        idx = np.array([[0, 2], [3, 1]])
        probs = np.array([[0.5, 0.2], [0.4, 0.4]])
        logits = rng.normal(size=(2, 5))
        t = Tensor(logits.copy(), requires_grad=True, name="s")
        with Tape() as tape:
            loss = kd_topk_loss(idx, probs, t)
        g = backward(tape, loss, {"s": t})["s"]
        h = 1e-5
        for i in range(2):
            for j in range(5):
                t.data = logits.copy()
                t.data[i, j] += h
                up = kd_topk_loss(idx, probs, t).item()
                t.data = logits.copy()
                t.data[i, j] -= h
                dn = kd_topk_loss(idx, probs, t).item()
                fd = (up - dn) / (2 * h)
                assert abs(g[i, j] - fd) <= 1e-8 + 1e-3 * max(abs(fd), abs(g[i, j]))


class TestCLMLoss:
    def test_uniform_logits_give_log_vocab(self):
        loss = clm_loss(Tensor(np.zeros((5, 7))), np.arange(5) % 7)
        assert loss.item() == pytest.approx(math.log(7), abs=1e-12)

    def test_confident_correct_approaches_zero(self):
        logits = np.full((3, 4), -50.0)
        targets = np.array([1, 2, 0])
        logits[np.arange(3), targets] = 50.0
        assert clm_loss(Tensor(logits), targets).item() < 1e-12

    def test_two_token_hand_case(self):
        logits = np.array([[1.0, 0.0], [0.5, 2.0]])
        targets = np.array([1, 0])
        z0 = math.log(math.exp(1) + math.exp(0))
        z1 = math.log(math.exp(0.5) + math.exp(2))
        want = ((z0 - 0.0) + (z1 - 0.5)) / 2
        assert clm_loss(Tensor(logits), targets).item() == pytest.approx(want, abs=1e-12)

    def test_target_out_of_vocab(self):
        with pytest.raises(DistillError):
            clm_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestTotalLoss:
    def test_balanced_router_adds_nothing(self):
        out = total_loss(Tensor(np.asarray(2.5)), Tensor(np.asarray(1.0)), 0.01)
        assert out.item() == 2.5

    def test_zero_coef_disables_aux(self):
        out = total_loss(Tensor(np.asarray(2.5)), Tensor(np.asarray(3.0)), 0.0)
        assert out.item() == 2.5

    def test_hand_arithmetic(self):
        out = total_loss(Tensor(np.asarray(1.0)), Tensor(np.asarray(1.6)), 0.01)
        assert out.item() == pytest.approx(1.006, abs=1e-12)

    def test_monotone_in_aux(self):
        main = Tensor(np.asarray(1.0))
        vals = [total_loss(main, Tensor(np.asarray(a)), 0.05).item()
                for a in (0.9, 1.0, 1.3, 2.0)]
        assert vals == sorted(vals)

    def test_nan_rejected(self):
        with pytest.raises(NumericsError):
            total_loss(Tensor(np.asarray(np.nan)), None, 0.0)


class TestCosineLR:
    def test_warmup_endpoints(self):
        c = dcfg(total_steps=100, warmup_steps=10, lr_peak=1e-3)
        assert cosine_lr(0, c) == 0.0
        assert cosine_lr(10, c) == pytest.approx(1e-3)

    def test_midpoint_half_peak_with_zero_floor(self):
        c = dcfg(total_steps=110, warmup_steps=10, lr_peak=2e-3, lr_floor_ratio=0.0)
        assert cosine_lr(60, c) == pytest.approx(1e-3, rel=1e-12)

    def test_clamps_past_end(self):
        c = dcfg(total_steps=100, warmup_steps=10, lr_peak=1e-3)
        assert cosine_lr(100, c) == pytest.approx(1e-4)
        assert cosine_lr(250, c) == pytest.approx(1e-4)

    def test_continuous_at_warmup_joint(self):
        c = dcfg(total_steps=1000, warmup_steps=100, lr_peak=1e-3)
        assert cosine_lr(100, c) == pytest.approx(cosine_lr(101, c), rel=1e-4)


class TestPlateau:
    def test_clear_improvement_is_not_plateau(self):
        hist = [1.0, 1.0, 1.0, 0.9, 0.9, 0.9]
        assert plateau_early_stop(hist, 3, 0.01) is False

    def test_flat_history_is_plateau(self):
        assert plateau_early_stop([0.7] * 6, 3, 0.01) is True

    def test_half_percent_under_one_percent_eps(self):
        hist = [1.0, 1.0, 0.995, 0.995]
        assert plateau_early_stop(hist, 2, 0.01) is True

    def test_short_history_never_plateaus(self):
        assert plateau_early_stop([1.0, 1.0], 3, 0.5) is False


class TestTeacherCache:
    def test_full_vocab_probs_sum_to_one(self):
        m = small_model(1)
        seqs = np.random.default_rng(2).integers(0, 8, size=(3, 6))
        cache = cache_teacher_topk(m, seqs, k=8)
        sums = cache.probs.astype(np.float64).sum(axis=-1)
        np.testing.assert_allclose(sums, np.ones_like(sums), atol=1e-6)

    def test_deterministic(self):
        m = small_model(1)
        seqs = np.random.default_rng(2).integers(0, 8, size=(3, 6))
        c1 = cache_teacher_topk(m, seqs, k=3)
        c2 = cache_teacher_topk(m, seqs, k=3)
        assert np.array_equal(c1.indices, c2.indices)
        assert np.array_equal(c1.probs, c2.probs)

    def test_matches_fresh_forward_spot_checks(self):
        m = small_model(3)
        seqs = np.random.default_rng(4).integers(0, 8, size=(4, 6))
        cache = cache_teacher_topk(m, seqs, k=3, batch_size=2)
        logits, _ = forward_batch(m, seqs[2:3])
        row = logits.data[0, 4]
        idx = ad.topk_indices(row, 3)
        p = np.exp(row - row.max())
        p /= p.sum()
        assert cache.indices[2, 4].tolist() == idx.tolist()
        np.testing.assert_allclose(cache.probs[2, 4], p[idx].astype(np.float32), atol=1e-6)

    def test_k_above_vocab_rejected(self):
        with pytest.raises(DistillError, match="vocab"):
            cache_teacher_topk(small_model(1), np.zeros((1, 4), dtype=int), k=9)

    def test_wire_round_trip(self, tmp_path):
        m = small_model(5)
        seqs = np.random.default_rng(6).integers(0, 8, size=(3, 5))
        cache = cache_teacher_topk(m, seqs, k=4)
        path = tmp_path / "cache.smtc"
        save_teacher_cache(cache, path)
        loaded = load_teacher_cache(path, seq_len=5)
        assert np.array_equal(loaded.indices, cache.indices)
        assert np.array_equal(loaded.probs, cache.probs)
        assert loaded.teacher_fingerprint == fingerprint(m)
        assert loaded.k == 4 and loaded.vocab_size == 8

    def test_wire_format_is_little_endian_fixed_width(self, tmp_path):
        m = small_model(5)
        seqs = np.zeros((1, 2), dtype=int)
        cache = cache_teacher_topk(m, seqs, k=2)
        path = tmp_path / "c.smtc"
        save_teacher_cache(cache, path)
        blob = path.read_bytes()
        assert blob[:4] == b"SMTC"
        assert len(blob) == 4 + 28 + 2 * (8 + 2 * 8)

    def test_invalid_cache_rejected(self):
        with pytest.raises(DistillError, match="descending"):
            TeacherCache(np.array([[[0, 1]]]), np.array([[[0.2, 0.8]]], dtype=np.float32),
                         2, 4, 0)
        with pytest.raises(DistillError, match="duplicate"):
            TeacherCache(np.array([[[1, 1]]]), np.array([[[0.5, 0.4]]], dtype=np.float32),
                         2, 4, 0)


class TestOptimizer:
    def test_zero_grads_zero_decay_keeps_params(self):
        m = small_model(7)
        before = {n: p.tensor.data.copy() for n, p in m.registry.items()}
        state = TrainState.fresh(m, 0)
        grads = {n: np.zeros_like(p.tensor.data) for n, p in m.registry.items()}
        adamw_update(state, m, grads, lr=0.1, cfg=dcfg(weight_decay=0.0))
        for n, p in m.registry.items():
            assert np.array_equal(p.tensor.data, before[n]), n

    def test_first_step_is_lr_times_sign(self):
        # fresh moments with bias correction: unit gradient moves w=1 to ~0.9 at lr 0.1
        m = small_model(8)
        state = TrainState.fresh(m, 0)
        grads = {n: np.zeros_like(p.tensor.data) for n, p in m.registry.items()}
        grads["final_norm.g"] = np.ones_like(grads["final_norm.g"])
        adamw_update(state, m, grads, lr=0.1, cfg=dcfg(weight_decay=0.0))
        got = m.registry["final_norm.g"].tensor.data
        np.testing.assert_allclose(got, np.full_like(got, 0.9), atol=1e-8)

    def test_paper_defaults(self):
        c = dcfg()
        assert c.lr_peak == 1e-4
        assert c.weight_decay == 0.01
        assert DistillConfig(total_steps=500, batch_tokens=64).warmup_steps == 100


class TestDistillStep:
    def make_batch(self, model, rng, b=4, n=8):
        return rng.integers(0, model.config.vocab_size, size=(b, n))

    def test_kd_step_reduces_loss_on_repeat_batch(self):
        teacher = small_model(9)
        student = small_model(10)
        rng = np.random.default_rng(11)
        batch = self.make_batch(teacher, rng)
        cache = cache_teacher_topk(teacher, batch, k=4)
        cfg = dcfg(total_steps=30, warmup_steps=1, lr_peak=5e-3)
        state = TrainState.fresh(student, 0)
        idx, probs = cache.slice(np.arange(4))
        sl = (idx.reshape(-1, 4), probs.reshape(-1, 4))
        first = distill_step(state, student, batch, cfg, cache_slice=sl).loss
        for _ in range(20):
            last = distill_step(state, student, batch, cfg, cache_slice=sl).loss
        assert last < first

    def test_bit_reproducible(self):
        def run():
            teacher = small_model(12)
            student = small_model(13)
            rng = np.random.default_rng(14)
            batch = self.make_batch(teacher, rng)
            cache = cache_teacher_topk(teacher, batch, k=3)
            cfg = dcfg(total_steps=5, warmup_steps=1, lr_peak=1e-3)
            state = TrainState.fresh(student, 0)
            idx, probs = cache.slice(np.arange(4))
            sl = (idx.reshape(-1, 3), probs.reshape(-1, 3))
            for _ in range(5):
                distill_step(state, student, batch, cfg, cache_slice=sl)
            return {n: p.tensor.data.copy() for n, p in student.registry.items()}

        p1, p2 = run(), run()
        for n in p1:
            assert np.array_equal(p1[n], p2[n]), n

    def test_abort_leaves_state_intact(self):
        student = small_model(15)
        student.registry["unembed.w"].tensor.data[:] = 1e308  # logits overflow downstream
        state = TrainState.fresh(student, 0)
        before = {n: p.tensor.data.copy() for n, p in student.registry.items()}
        batch = np.zeros((2, 4), dtype=int)
        with np.errstate(all="ignore"), pytest.raises((NumericsError, FloatingPointError)):
            distill_step(state, student, batch, dcfg(), targets=batch[:, 1:])
        assert state.step == 0
        assert state.loss_history == []
        for n, p in student.registry.items():
            assert np.array_equal(p.tensor.data, before[n]), n

    def test_requires_exactly_one_target_mode(self):
        student = small_model(16)
        batch = np.zeros((1, 4), dtype=int)
        state = TrainState.fresh(student, 0)
        with pytest.raises(DistillError):
            distill_step(state, student, batch, dcfg())


class TestRunTraining:
    def test_clm_training_learns_markov_task(self):
        spec = TaskSpec("markov_chars", vocab_size=8, seq_len=16, train_tokens=4096,
                        eval_tokens=512, seed=0)
        corpus = gen_synthetic_corpus(spec)
        model = small_model(17, vocab=8, d_model=16, d_expert=16, d_head=8)
        cfg = dcfg(total_steps=60, batch_tokens=128, warmup_steps=5, lr_peak=8e-3,
                   eval_every=20)
        tokens, rows, hist = run_training(model, corpus.train, corpus.eval, cfg, seed=1)
        assert tokens == 60 * 128
        assert rows[-1].eval_loss < math.log(8)  # beats the uniform baseline
        assert hist[-1] < hist[0]

    def test_plateau_rule_stops_early(self):
        spec = TaskSpec("copy_memory", vocab_size=6, seq_len=9, train_tokens=512,
                        eval_tokens=128, seed=1)
        corpus = gen_synthetic_corpus(spec)
        model = small_model(18, vocab=6)
        cfg = dcfg(total_steps=400, batch_tokens=36, warmup_steps=1, lr_peak=1e-5,
                   eval_every=2, plateau_window=3, plateau_eps=0.5)
        tokens, rows, hist = run_training(model, corpus.train, corpus.eval, cfg, seed=2,
                                          stop_rule="plateau")
        assert rows[-1].step < 400  # a huge eps forces an early stop
