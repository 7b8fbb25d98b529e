from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np
import pytest

from alignpref.corpus import TranslationCandidate
from alignpref.dpo import (
    EmptyDataset,
    EmptyTarget,
    NonFiniteInput,
    PolicyScores,
    ToyPolicy,
    TrainConfig,
    dpo_grad,
    dpo_loss,
    dpo_margin,
    load_policy,
    save_policy,
    save_trace,
    sequence_logprob,
    train_toy,
)
from alignpref.preference import PreferenceTriplet

from oracles import logprob_oracle
from synthdata import separable_triplets

DATA = Path(__file__).parent / "data"


def triplet(source: str, chosen: str, rejected: str, tag: str = "t0") -> PreferenceTriplet:
    return PreferenceTriplet(
        tag,
        source,
        TranslationCandidate(tag, "a", chosen, 90.0),
        TranslationCandidate(tag, "b", rejected, 40.0),
        [],
    )


def random_policy(vocab: list[str], rng: np.random.Generator) -> ToyPolicy:
    policy = ToyPolicy(vocab)
    policy.theta = rng.normal(0, 1.0, policy.theta.shape)
    policy.phi = rng.normal(0, 1.0, policy.phi.shape)
    return policy


def random_triplets(n: int, vocab: list[str], rng: np.random.Generator) -> list[PreferenceTriplet]:
    out = []
    for i in range(n):
        source = " ".join(rng.choice(vocab, size=rng.integers(1, 4)))
        chosen = " ".join(rng.choice(vocab, size=rng.integers(2, 5)))
        rejected = " ".join(rng.choice(vocab, size=rng.integers(2, 5)))
        out.append(triplet(source, chosen, rejected, tag=f"s{i}"))
    return out


class TestSequenceLogprob:
    def test_uniform_zero_parameters(self):
        policy = ToyPolicy([f"t{i}" for i in range(7)])  # +UNK -> V=8
        size = len(policy.vocab)
        value = sequence_logprob(policy, ["t0"], ["t1", "t2", "t3"])
        assert value == pytest.approx(-3 * math.log(size), abs=1e-12)

    def test_single_token_vocab_is_certain(self):
        policy = ToyPolicy(["<unk>"])
        assert sequence_logprob(policy, ["x"], ["y", "z"]) == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force_enumeration(self):
        rng = np.random.default_rng(11)
        vocab = ["a", "b", "c"]
        policy = random_policy(vocab, rng)
        src = ["a", "c", "a"]
        tgt = ["b", "a", "b", "c"]
        expected = logprob_oracle(
            policy.vocab,
            policy.theta.tolist(),
            policy.phi.tolist(),
            [policy.token_id(t) for t in src],
            [policy.token_id(t) for t in tgt],
        )
        assert sequence_logprob(policy, src, tgt) == pytest.approx(expected, abs=1e-12)

    def test_unknown_tokens_map_to_unk(self):
        policy = ToyPolicy(["a", "b"])
        assert sequence_logprob(policy, ["zzz"], ["qqq"]) == sequence_logprob(
            policy, ["<unk>"], ["<unk>"]
        )

    def test_empty_target_raises(self):
        with pytest.raises(EmptyTarget):
            sequence_logprob(ToyPolicy(["a"]), ["a"], [])

    def test_always_nonpositive(self):
        rng = np.random.default_rng(3)
        policy = random_policy(["a", "b", "c", "d"], rng)
        for _ in range(50):
            tgt = list(rng.choice(["a", "b", "c", "d"], size=rng.integers(1, 6)))
            assert sequence_logprob(policy, ["a"], tgt) <= 0.0

    def test_length_one_targets_normalize(self):
        rng = np.random.default_rng(4)
        policy = random_policy(["a", "b", "c"], rng)
        total = sum(
            math.exp(sequence_logprob(policy, ["b", "c"], [tok])) for tok in policy.vocab
        )
        assert total == pytest.approx(1.0, abs=1e-9)


class TestDpoLoss:
    def scores(self, margin_per_beta: float) -> PolicyScores:
        # margin = beta * (logp_chosen - 0 - 0 + 0); isolate it in one slot
        return PolicyScores(margin_per_beta, 0.0, 0.0, 0.0)

    def test_equal_policies_give_ln2(self):
        scores = PolicyScores(-1.3, -2.1, -1.3, -2.1)
        assert dpo_loss(scores, 0.1) == pytest.approx(math.log(2), abs=1e-12)

    def test_unit_positive_margin(self):
        assert dpo_loss(self.scores(10.0), 0.1) == pytest.approx(0.313262, abs=1e-6)

    def test_unit_negative_margin(self):
        assert dpo_loss(self.scores(-10.0), 0.1) == pytest.approx(1.313262, abs=1e-6)

    def test_softplus_identity_on_random_margins(self):
        rng = np.random.default_rng(17)
        beta = 0.1
        for margin in rng.normal(0, 20, size=100):
            gap = dpo_loss(self.scores(margin), beta) - dpo_loss(self.scores(-margin), beta)
            assert gap == pytest.approx(-beta * margin, abs=1e-9)

    def test_loss_nonnegative_and_decreasing_in_margin(self):
        beta = 0.1
        values = [dpo_loss(self.scores(m), beta) for m in (-5.0, -1.0, 0.0, 1.0, 5.0)]
        assert all(v >= 0 for v in values)
        assert values == sorted(values, reverse=True)

    def test_reference_shift_invariance(self):
        base = PolicyScores(-1.0, -3.0, -1.5, -2.5)
        shifted = PolicyScores(-1.0 + 0.7, -3.0, -1.5 + 0.7, -2.5)
        assert dpo_loss(base, 0.1) == pytest.approx(dpo_loss(shifted, 0.1), abs=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteInput):
            dpo_loss(PolicyScores(float("nan"), 0.0, 0.0, 0.0), 0.1)

    def test_nonpositive_beta_rejected(self):
        with pytest.raises(ValueError):
            dpo_loss(PolicyScores(0.0, 0.0, 0.0, 0.0), 0.0)

    def test_extreme_margins_stable(self):
        assert dpo_loss(self.scores(1e5), 0.1) == 0.0  # softplus underflow, not overflow
        assert math.isfinite(dpo_loss(self.scores(-1e5), 0.1))


class TestDpoGrad:
    VOCAB = [f"t{i}" for i in range(6)]

    def mean_loss(self, triplets, policy, ref, beta):
        from alignpref.aligner import tokenize
        from alignpref.dpo import _softplus

        total = 0.0
        for t in triplets:
            src, chosen, rejected = tokenize(t.source), tokenize(t.chosen.text), tokenize(t.rejected.text)
            scores = PolicyScores(
                sequence_logprob(policy, src, chosen),
                sequence_logprob(policy, src, rejected),
                sequence_logprob(ref, src, chosen),
                sequence_logprob(ref, src, rejected),
            )
            total += _softplus(-dpo_margin(scores, beta))
        return total / len(triplets)

    def test_finite_difference_agreement(self):
        rng = np.random.default_rng(7)
        triplets = random_triplets(5, self.VOCAB, rng)
        policy = random_policy(self.VOCAB, rng)
        ref = random_policy(self.VOCAB, rng)
        beta = 0.1
        grads = dpo_grad(triplets, policy, ref, beta)
        h = 1e-5
        max_rel = 0.0
        for array, grad in ((policy.theta, grads.dtheta), (policy.phi, grads.dphi)):
            it = np.nditer(array, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = array[idx]
                array[idx] = orig + h
                up = self.mean_loss(triplets, policy, ref, beta)
                array[idx] = orig - h
                down = self.mean_loss(triplets, policy, ref, beta)
                array[idx] = orig
                fd = (up - down) / (2 * h)
                denom = max(abs(grad[idx]), abs(fd))
                if denom >= 1e-10:
                    max_rel = max(max_rel, abs(grad[idx] - fd) / denom)
        assert max_rel < 1e-5

    def test_zero_margin_batch_scales_margin_gradient(self):
        # at margin 0 the sigmoid factor is 1/2: grad = -(beta/2) * d(raw margin)/dparams
        rng = np.random.default_rng(5)
        triplets = random_triplets(4, self.VOCAB, rng)
        policy = random_policy(self.VOCAB, rng)
        ref = policy.copy()  # margins are exactly zero
        beta = 0.1
        grads = dpo_grad(triplets, policy, ref, beta)
        assert all(m == 0.0 for m in grads.margins)

        h = 1e-6

        def mean_raw_margin():
            from alignpref.aligner import tokenize

            total = 0.0
            for t in triplets:
                src = tokenize(t.source)
                total += sequence_logprob(policy, src, tokenize(t.chosen.text)) - sequence_logprob(
                    policy, src, tokenize(t.rejected.text)
                )
            return total / len(triplets)

        for _ in range(20):
            i = rng.integers(0, policy.theta.shape[0])
            j = rng.integers(0, policy.theta.shape[1])
            orig = policy.theta[i, j]
            policy.theta[i, j] = orig + h
            up = mean_raw_margin()
            policy.theta[i, j] = orig - h
            down = mean_raw_margin()
            policy.theta[i, j] = orig
            margin_grad = (up - down) / (2 * h)
            assert grads.dtheta[i, j] == pytest.approx(-beta / 2 * margin_grad, abs=1e-7)

    def test_duplicated_batch_matches_single(self):
        rng = np.random.default_rng(9)
        one = random_triplets(1, self.VOCAB, rng)
        policy = random_policy(self.VOCAB, rng)
        ref = random_policy(self.VOCAB, rng)
        single = dpo_grad(one, policy, ref, 0.1)
        repeated = dpo_grad(one * 4, policy, ref, 0.1)
        np.testing.assert_allclose(single.dtheta, repeated.dtheta, atol=1e-12)
        np.testing.assert_allclose(single.dphi, repeated.dphi, atol=1e-12)
        assert single.mean_loss == pytest.approx(repeated.mean_loss, abs=1e-12)

    def test_empty_batch_raises(self):
        with pytest.raises(EmptyDataset):
            dpo_grad([], ToyPolicy(["a"]), ToyPolicy(["a"]), 0.1)

    def test_length_normalized_variant_gradients(self):
        rng = np.random.default_rng(13)
        triplets = random_triplets(3, self.VOCAB, rng)
        policy = random_policy(self.VOCAB, rng)
        ref = random_policy(self.VOCAB, rng)
        beta = 0.1
        grads = dpo_grad(triplets, policy, ref, beta, length_normalize=True)

        from alignpref.aligner import tokenize
        from alignpref.dpo import _softplus

        def mean_loss():
            total = 0.0
            for t in triplets:
                src = tokenize(t.source)
                scores = PolicyScores(
                    sequence_logprob(policy, src, tokenize(t.chosen.text), True),
                    sequence_logprob(policy, src, tokenize(t.rejected.text), True),
                    sequence_logprob(ref, src, tokenize(t.chosen.text), True),
                    sequence_logprob(ref, src, tokenize(t.rejected.text), True),
                )
                total += _softplus(-dpo_margin(scores, beta))
            return total / len(triplets)

        h = 1e-5
        for _ in range(25):
            i = rng.integers(0, policy.phi.shape[0])
            j = rng.integers(0, policy.phi.shape[1])
            orig = policy.phi[i, j]
            policy.phi[i, j] = orig + h
            up = mean_loss()
            policy.phi[i, j] = orig - h
            down = mean_loss()
            policy.phi[i, j] = orig
            fd = (up - down) / (2 * h)
            assert grads.dphi[i, j] == pytest.approx(fd, abs=1e-9)


class TestTrainToy:
    def test_zero_epochs_leaves_parameters_and_gives_ln2(self):
        triplets = separable_triplets(20, seed=42)
        policy, trace = train_toy(triplets, TrainConfig(lr=0.5, epochs=0, seed=42))
        assert np.all(policy.theta == 0.0) and np.all(policy.phi == 0.0)
        assert len(trace) == 1
        assert trace[0].mean_loss == pytest.approx(math.log(2), abs=1e-12)
        assert trace[0].reward_accuracy == 0.0

    def test_separable_fixture_reaches_accuracy(self):
        triplets = separable_triplets(20, seed=42)
        start = time.perf_counter()
        _, trace = train_toy(triplets, TrainConfig(lr=0.5, epochs=200, seed=42))
        assert time.perf_counter() - start < 10.0
        assert trace[-1].reward_accuracy >= 0.9

    def test_loss_trace_non_increasing(self):
        triplets = separable_triplets(20, seed=42)
        _, trace = train_toy(triplets, TrainConfig(lr=0.5, epochs=200, seed=42))
        for prev, after in zip(trace, trace[1:]):
            assert after.mean_loss <= prev.mean_loss + 1e-6

    def test_trace_matches_frozen_fixture(self):
        triplets = separable_triplets(20, seed=42)
        _, trace = train_toy(triplets, TrainConfig(lr=0.5, epochs=200, seed=42))
        lines = (DATA / "dpo_trace_fixture.tsv").read_text().strip().splitlines()[1:]
        assert len(lines) == len(trace)
        for entry, line in zip(trace, lines):
            epoch, loss, accuracy = line.split("\t")
            assert entry.epoch == int(epoch)
            assert entry.mean_loss == pytest.approx(float(loss), abs=1e-9)
            assert entry.reward_accuracy == pytest.approx(float(accuracy), abs=1e-9)

    def test_reference_policy_stays_frozen(self):
        triplets = separable_triplets(5, seed=3)
        initial = ToyPolicy(sorted({tok for t in triplets for tok in
                                    (t.source + " " + t.chosen.text + " " + t.rejected.text).split()}))
        trained, _ = train_toy(triplets, TrainConfig(lr=0.5, epochs=20, seed=3), initial_policy=initial)
        # the caller's policy object is untouched; training works on copies
        assert np.all(initial.theta == 0.0) and np.all(initial.phi == 0.0)
        assert not np.array_equal(trained.theta, initial.theta)

    def test_empty_dataset_raises(self):
        with pytest.raises(EmptyDataset):
            train_toy([], TrainConfig())

    def test_deterministic(self):
        triplets = separable_triplets(10, seed=1)
        first, trace_a = train_toy(triplets, TrainConfig(lr=0.3, epochs=30, seed=1))
        second, trace_b = train_toy(triplets, TrainConfig(lr=0.3, epochs=30, seed=1))
        np.testing.assert_array_equal(first.theta, second.theta)
        assert trace_a == trace_b


class TestPolicyIo:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        policy = random_policy(["alpha", "beta", "gamma"], rng)
        path = tmp_path / "policy.txt"
        save_policy(path, policy, header={"seed": 42})
        loaded = load_policy(path)
        assert loaded.vocab == policy.vocab
        assert loaded.beta == policy.beta
        np.testing.assert_array_equal(loaded.theta, policy.theta)
        np.testing.assert_array_equal(loaded.phi, policy.phi)

    def test_trace_file_format(self, tmp_path):
        triplets = separable_triplets(5, seed=8)
        _, trace = train_toy(triplets, TrainConfig(lr=0.5, epochs=3, seed=8))
        path = tmp_path / "trace.tsv"
        save_trace(path, trace, header={"seed": 8})
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# seed=8")
        assert lines[1] == "epoch\tmean_loss\treward_accuracy"
        assert len(lines) == 2 + len(trace)
