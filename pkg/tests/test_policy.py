"""Recommender likelihoods, training steps, and batched/scalar agreement."""

import math

import numpy as np
import pytest

from prefopt.beta import BetaConfig, dual_margins, dynamic_beta
from prefopt.core import Context, InvalidParameterError, LikelihoodRecord, PreferenceInstance
from prefopt.losses import BetaVector, LogRatioSet, dmpo_loss, mppo_loss, sdpo_loss
from prefopt.policy import (
    Adam,
    PolicyModel,
    ReferenceModel,
    Variant,
    _batch_loss,
    _dynamic_betas,
    _select_mask,
    selection_log,
    batch_log_probs,
    likelihood_records,
    load_checkpoint,
    log_prob,
    parse_variant,
    po_forward,
    po_step,
    save_checkpoint,
    sft_step,
)
from prefopt.selection import BoundarySelection, select_boundary

from oracles import grads_match

CFG = BetaConfig(beta0=1.0, alpha=0.5, gamma=6.0)


def instance(history, positive, negatives, user=0):
    return PreferenceInstance(context=Context(user=user, history=tuple(history)),
                              positive=positive, negatives=tuple(negatives))


def tiny_model(seed=0, vocab=5, dim=2):
    return PolicyModel.initialize(vocab, dim, seed)


class TestLogProb:
    def test_identical_output_embeddings_give_uniform(self):
        model = PolicyModel(np.ones((4, 3)), np.ones((4, 3)))
        ctx = Context(user=0, history=(0, 1))
        for item in range(4):
            assert log_prob(model, ctx, item) == pytest.approx(-math.log(4), abs=1e-12)

    def test_two_item_softmax_by_hand(self):
        # scores (1, 0): log p(item 0) = -log(1 + e^{-1}), frozen from direct evaluation
        item = np.zeros((2, 1))
        item[0, 0] = 1.0
        out = np.array([[1.0], [0.0]])
        model = PolicyModel(item, out)
        ctx = Context(user=0, history=(0,))
        assert log_prob(model, ctx, 0) == pytest.approx(-0.3132616875182228, abs=1e-12)

    def test_normalization(self):
        rng = np.random.default_rng(60)
        model = PolicyModel(rng.normal(size=(30, 4)), rng.normal(size=(30, 4)))
        for _ in range(20):
            hist = tuple(rng.integers(0, 30, size=rng.integers(1, 8)).tolist())
            logp = batch_log_probs(model, [Context(user=0, history=hist)])[0]
            assert np.exp(logp).sum() == pytest.approx(1.0, abs=1e-12)

    def test_item_out_of_range_rejected(self):
        model = tiny_model()
        with pytest.raises(InvalidParameterError):
            log_prob(model, Context(user=0, history=(0,)), 99)


def sft_loss_value(model, batch):
    contexts = [c for c, _ in batch]
    logp = batch_log_probs(model, contexts)
    return float(np.mean([-logp[i, item] for i, (_, item) in enumerate(batch)]))


class TestSftStep:
    def test_zero_init_first_loss_is_log_vocab(self):
        model = PolicyModel(np.zeros((7, 3)), np.zeros((7, 3)))
        opt = Adam(lr=1e-3)
        batch = [(Context(user=0, history=(1, 2)), 4), (Context(user=1, history=(3,)), 5)]
        loss = sft_step(model, batch, opt)
        assert loss == pytest.approx(math.log(7), abs=1e-12)

    def test_loss_decreases_on_repeated_pair(self):
        model = tiny_model(seed=1)
        opt = Adam(lr=1e-3)
        batch = [(Context(user=0, history=(0, 2)), 3)]
        losses = [sft_step(model, batch, opt) for _ in range(11)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_parameter_gradients_match_finite_differences(self):
        model = tiny_model(seed=2)
        batch = [(Context(user=0, history=(0, 2, 2)), 3), (Context(user=1, history=(4,)), 1)]
        # analytic gradient via one zero-lr probe of the internal backward
        from prefopt.policy import _backward, encode_contexts
        from prefopt.numerics import logsumexp

        contexts = [c for c, _ in batch]
        cand = np.array([[i] for _, i in batch])
        u = encode_contexts(model, contexts)
        scores = u @ model.output_embeddings.T
        probs = np.exp(scores - logsumexp(scores, axis=1, keepdims=True))
        grads = _backward(model, contexts, u, probs, cand, np.full((2, 1), -1.0))

        h = 1e-6
        for name, table in model.params().items():
            for idx in np.ndindex(table.shape):
                table[idx] += h
                hi = sft_loss_value(model, batch)
                table[idx] -= 2 * h
                lo = sft_loss_value(model, batch)
                table[idx] += h
                assert grads_match(grads[name][idx], (hi - lo) / (2 * h), rtol=1e-4)


class TestPoStep:
    def test_model_equals_ref_gives_ln2(self):
        model = tiny_model(seed=3, vocab=20, dim=4)
        ref = ReferenceModel(model)
        batch = [instance((0, 1), 2, (3, 4, 5)), instance((6,), 7, (8, 9, 10))]
        loss, _ = po_step(model, ref, batch, "dmpo", Variant.naive(), CFG, Adam(lr=0.0))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_naive_matches_scalar_dmpo(self):
        model = tiny_model(seed=4, vocab=30, dim=3)
        ref = ReferenceModel(tiny_model(seed=5, vocab=30, dim=3))
        batch = [instance((0, 3), 2, (4, 5, 6, 7)), instance((8, 9), 10, (11, 12, 13, 14))]
        loss, _, _, _ = po_forward(model, ref, batch, "dmpo", Variant.naive(), CFG)
        records = likelihood_records(model, ref, batch)
        expected = np.mean([
            dmpo_loss(LogRatioSet(r.pos_theta - r.pos_ref,
                                  tuple(t - q for t, q in zip(r.neg_theta, r.neg_ref))),
                      BetaVector.uniform(CFG.beta0, r.k)).value
            for r in records
        ])
        assert loss == pytest.approx(expected, abs=1e-12)

    def test_end_to_end_gradients_match_finite_differences(self):
        """Parameter gradients through likelihoods and loss on a 5-item, dim-2 model."""
        ref = ReferenceModel(tiny_model(seed=7))
        batch = [instance((0, 2), 1, (3, 4))]
        h = 1e-6
        for objective in ("dmpo", "sdpo", "mppo"):
            model = tiny_model(seed=6)
            _, grads, _, _ = po_forward(model, ref, batch, objective, Variant.naive(), CFG)
            for name, table in model.params().items():
                for idx in np.ndindex(table.shape):
                    table[idx] += h
                    hi = po_forward(model, ref, batch, objective, Variant.naive(), CFG)[0]
                    table[idx] -= 2 * h
                    lo = po_forward(model, ref, batch, objective, Variant.naive(), CFG)[0]
                    table[idx] += h
                    assert grads_match(grads[name][idx], (hi - lo) / (2 * h), rtol=1e-4)

    def test_dpo_objective_needs_single_active(self):
        model = tiny_model(seed=8, vocab=25, dim=3)
        ref = ReferenceModel(model)
        batch = [instance((0,), 1, (2, 3, 4))]
        with pytest.raises(InvalidParameterError):
            po_step(model, ref, batch, "dpo", Variant.naive(), CFG, Adam())
        loss, _ = po_step(model, ref, batch, "dpo", Variant.topk(1), CFG, Adam())
        assert math.isfinite(loss)

    def test_topk_larger_than_k_rejected(self):
        model = tiny_model(seed=9, vocab=25, dim=3)
        ref = ReferenceModel(model)
        batch = [instance((0,), 1, (2, 3))]
        with pytest.raises(InvalidParameterError):
            po_step(model, ref, batch, "dmpo", Variant.topk(5), CFG, Adam())

    def test_reference_is_immutable(self):
        model = tiny_model(seed=10, vocab=25, dim=3)
        ref = ReferenceModel(model)
        before = (ref.item_embeddings.copy(), ref.output_embeddings.copy())
        batch = [instance((0, 1), 2, (3, 4, 5))]
        opt = Adam(lr=0.05)
        for _ in range(5):
            po_step(model, ref, batch, "dmpo", Variant.dynamic(), CFG, opt)
        np.testing.assert_array_equal(ref.item_embeddings, before[0])
        np.testing.assert_array_equal(ref.output_embeddings, before[1])
        with pytest.raises(ValueError):
            ref.item_embeddings[0, 0] = 1.0

    def test_ablated_stages_reproduce_naive_bitwise(self):
        """With both stages off the dynamic path must follow naive exactly."""
        batch = [instance((0, 1), 2, (3, 4, 5, 6)), instance((7, 8), 9, (10, 11, 12, 13))]
        ablated = parse_variant("dynamic:no-stage1,no-stage2")
        models = []
        for variant in (Variant.naive(), ablated):
            model = tiny_model(seed=11, vocab=20, dim=3)
            ref = ReferenceModel(tiny_model(seed=12, vocab=20, dim=3))
            opt = Adam(lr=0.01)
            for _ in range(10):
                po_step(model, ref, batch, "dmpo", variant, CFG, opt)
            models.append(model)
        np.testing.assert_array_equal(models[0].item_embeddings, models[1].item_embeddings)
        np.testing.assert_array_equal(models[0].output_embeddings, models[1].output_embeddings)

    def test_determinism_across_runs(self):
        def train():
            model = tiny_model(seed=13, vocab=25, dim=3)
            ref = ReferenceModel(tiny_model(seed=14, vocab=25, dim=3))
            opt = Adam(lr=0.02)
            batch = [instance((0, 1), 2, (3, 4, 5))]
            for _ in range(7):
                po_step(model, ref, batch, "dmpo", Variant.dynamic(), CFG, opt)
            return model

        a, b = train(), train()
        np.testing.assert_array_equal(a.item_embeddings, b.item_embeddings)
        np.testing.assert_array_equal(a.output_embeddings, b.output_embeddings)


class TestBatchedAgainstScalar:
    """The vectorized selection/beta/loss paths must agree with the
    per-record operations that define their semantics."""

    def _random_rows(self, rng, batch, k, force_cluster=False):
        pos = rng.uniform(-1.0 if force_cluster else -6.0, 0.0, size=batch)
        neg = rng.uniform(-9.0, -1.0 if force_cluster else 0.0, size=(batch, k))
        return pos, neg

    def test_dynamic_selection_matches_select_boundary(self):
        rng = np.random.default_rng(70)
        for trial in range(50):
            k = int(rng.integers(1, 16))
            pos, neg = self._random_rows(rng, 32, k, force_cluster=trial % 2 == 0)
            mask, stages = _select_mask(pos, neg, Variant.dynamic())
            logged = selection_log(mask, stages)
            for b in range(32):
                rec = LikelihoodRecord(float(pos[b]), 0.0, tuple(neg[b]), (0.0,) * k)
                sel = select_boundary(rec)
                assert logged[b].boundary == sel.boundary
                assert logged[b].stage == sel.stage

    def test_stage_ablations(self):
        rng = np.random.default_rng(71)
        pos, neg = self._random_rows(rng, 64, 15)
        vio = neg > pos[:, None]

        mask, stages = _select_mask(pos, neg, parse_variant("dynamic:no-stage2"))
        logged = selection_log(mask, stages)
        for b in range(64):
            if vio[b].any():
                assert np.array_equal(mask[b], vio[b])
                assert logged[b].stage == "violation"
            else:
                assert mask[b].all()
                assert logged[b].stage == "all"

        mask1, stages1 = _select_mask(pos, neg, parse_variant("dynamic:no-stage1"))
        logged1 = selection_log(mask1, stages1)
        for b in range(64):
            rec = LikelihoodRecord(float(pos[b]) + 100.0, 0.0, tuple(neg[b]), (0.0,) * 15)
            # a positive far above every negative cannot trigger stage 1,
            # so select_boundary reduces to pure clustering here
            sel = select_boundary(rec)
            assert logged1[b].boundary == sel.boundary
            assert logged1[b].stage == "cluster"

        mask2, stages2 = _select_mask(pos, neg, parse_variant("dynamic:no-stage1,no-stage2"))
        assert mask2.all()
        assert {s.stage for s in selection_log(mask2, stages2)} == {"all"}

    def test_topk_selection(self):
        rng = np.random.default_rng(72)
        pos, neg = self._random_rows(rng, 32, 10)
        mask, stages = _select_mask(pos, neg, Variant.topk(3))
        assert stages is None
        for b in range(32):
            chosen = np.flatnonzero(mask[b])
            order = sorted(range(10), key=lambda i: (-neg[b, i], i))[:3]
            assert set(chosen) == set(order)

    def test_dynamic_betas_match_scalar(self):
        rng = np.random.default_rng(73)
        for _ in range(50):
            k = int(rng.integers(1, 16))
            pos, neg = self._random_rows(rng, 16, k)
            mask, _ = _select_mask(pos, neg, Variant.dynamic())
            betas = _dynamic_betas(pos, neg, mask, CFG)
            for b in range(16):
                rec = LikelihoodRecord(float(pos[b]), 0.0, tuple(neg[b]), (0.0,) * k)
                sel = BoundarySelection(boundary=tuple(np.flatnonzero(mask[b]).tolist()),
                                        stage="violation")
                for i in sel.boundary:
                    expected = dynamic_beta(dual_margins(rec, sel, i), CFG)
                    assert betas[b, i] == pytest.approx(expected, rel=1e-12)

    def test_batch_losses_match_scalar(self):
        rng = np.random.default_rng(74)
        scalar = {"dmpo": dmpo_loss, "sdpo": sdpo_loss, "mppo": mppo_loss}
        for _ in range(50):
            k = int(rng.integers(1, 12))
            batch = 8
            r_pos = rng.uniform(-5, 5, size=batch)
            r_neg = rng.uniform(-5, 5, size=(batch, k))
            betas = rng.uniform(0.1, 1.5, size=(batch, k))
            mask = rng.random((batch, k)) < 0.6
            mask[np.arange(batch), rng.integers(0, k, size=batch)] = True  # non-empty
            for name, fn in scalar.items():
                value, grad_pos, grad_neg = _batch_loss(name, r_pos, r_neg, betas, mask)
                for b in range(batch):
                    active = tuple(np.flatnonzero(mask[b]).tolist())
                    out = fn(LogRatioSet(float(r_pos[b]), tuple(r_neg[b])),
                             BetaVector(tuple(betas[b, list(active)])), active)
                    assert value[b] == pytest.approx(out.value, rel=1e-12, abs=1e-15)
                    assert grad_pos[b] == pytest.approx(out.grad_pos, rel=1e-12, abs=1e-15)
                    np.testing.assert_allclose(grad_neg[b], out.grad_neg, rtol=1e-12, atol=1e-15)


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        model = tiny_model(seed=15, vocab=40, dim=6)
        path = tmp_path / "model.npz"
        save_checkpoint(path, model, seed=12345)
        loaded, seed = load_checkpoint(path)
        assert seed == 12345
        np.testing.assert_array_equal(loaded.item_embeddings, model.item_embeddings)
        np.testing.assert_array_equal(loaded.output_embeddings, model.output_embeddings)
        assert loaded.item_embeddings.tobytes() == model.item_embeddings.tobytes()


class TestVariantParsing:
    def test_round_trips(self):
        for text in ("naive", "dynamic", "topk:4", "dynamic:no-stage1",
                     "dynamic:no-stage2,fixed-beta", "dynamic:no-stage1,no-stage2"):
            assert parse_variant(text).label == text

    def test_invalid_variants_rejected(self):
        for text in ("bogus", "topk:x", "topk:0", "dynamic:nope", "naive:oops"):
            with pytest.raises(InvalidParameterError):
                parse_variant(text)
