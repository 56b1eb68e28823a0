import copy

import numpy as np
import pytest

from transkb.dataset import Dataset, Vocabulary, parse_triples, triples_to_array
from transkb.encoders import ConfigError
from transkb.kernels import NumericError, Parameter, gradient_check
from transkb.synthetic import ring_kb
from transkb.trainer import (IntegrityError, PrecisionError, TrainConfig, TrainingError,
                             UnsupportedVersionError, checkpoint_bytes, init_state, load_checkpoint,
                             nesterov_step, parse_checkpoint, run_epochs, save_checkpoint,
                             substream, train_baseline, train_joint)
from transkb.transe import corrupt_batch, corruption_set_loss, margin_loss

from conftest import random_word_vectors


def ring_config(**kw):
    base = dict(mode="baseline", dim=16, epochs=5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def small_joint_dataset():
    vocab = Vocabulary()
    train = parse_triples("".join(f"e{i}\tnext\te{(i + 1) % 6}\n" for i in range(6)) + "e0\tself\te0\n", vocab)
    desc = {i: f"entity number {w} here" for i, w in enumerate(["zero", "one", "two", "three", "four", "five"])}
    return Dataset(vocab, train, [], [], desc)


class TestNesterov:
    def test_zero_momentum_is_sgd(self):
        p = Parameter(np.array([1.0, -2.0]), np.array([0.5, 0.25]))
        nesterov_step(p, np.zeros(2), 0.1, 0.0)
        np.testing.assert_array_equal(p.value, [0.95, -2.025])
        assert not p.grad.any()

    def test_zero_gradient_no_velocity(self):
        p = Parameter(np.array([1.0, 2.0]))
        nesterov_step(p, np.zeros(2), 0.1, 0.9)
        np.testing.assert_array_equal(p.value, [1.0, 2.0])

    def test_scalar_oracle(self):
        lr, mu = 0.1, 0.9
        w, v = 1.0, 0.0
        traj = []
        for _ in range(2):
            g = w  # f(w) = w^2 / 2
            v = mu * v - lr * g
            w = w + mu * v - lr * g
            traj.append(w)
        p, vel = Parameter(np.array([1.0])), np.zeros(1)
        got = []
        for _ in range(2):
            p.grad[...] = p.value
            nesterov_step(p, vel, lr, mu)
            got.append(float(p.value[0]))
        assert got == traj
        assert traj[0] == pytest.approx(0.81) and traj[1] == pytest.approx(0.5751)

    def test_non_finite_gradient(self):
        p = Parameter(np.array([1.0]), np.array([np.nan]))
        with pytest.raises(NumericError):
            nesterov_step(p, np.zeros(1), 0.1, 0.9)
        assert p.value[0] == 1.0


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(momentum=1.0), dict(momentum=-0.1),
                                    dict(batch_size=0), dict(gamma=0), dict(mode="rnn"),
                                    dict(distance="cos")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_default_batch(self):
        assert TrainConfig().batch_size == 512
        assert TrainConfig(mode="joint_cnn").batch_size == 64

    def test_round_trip_and_unknown_keys(self):
        cfg = TrainConfig(mode="joint_mlp", gamma=2.0)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ConfigError, match="gama"):
            TrainConfig.from_dict({"gama": 1})


def test_substreams_are_independent():
    a = substream(3, "shuffle").random(4)
    assert np.array_equal(a, substream(3, "shuffle").random(4))
    assert not np.array_equal(a, substream(3, "corrupt").random(4))


class TestBaseline:
    def test_exact_loss_decreases_over_first_epochs(self):
        ds = ring_kb()
        train = triples_to_array(ds.train)
        decreasing = 0
        for seed in range(10):
            state = init_state(ds, ring_config(seed=seed, momentum=0.5))
            losses = [corruption_set_loss(state.store(), train, 1.0, state.candidates)]
            for _ in run_epochs(state, ds, epochs=5):
                losses.append(corruption_set_loss(state.store(), train, 1.0, state.candidates))
            decreasing += all(b < a for a, b in zip(losses, losses[1:]))
        assert decreasing >= 10

    def test_entity_norms_after_each_iteration(self, ring):
        checked = []

        def check(state):
            checked.append(np.max(np.abs(np.linalg.norm(state.entities.value, axis=1) - 1)))

        for _ in train_baseline(ring, ring_config(batch_size=32, epochs=2), on_iteration=check):
            pass
        assert len(checked) == 2 * 4
        assert max(checked) <= 1e-9

    def test_relation_renormalization_flag(self, ring):
        *_, (_, state) = train_baseline(ring, ring_config(epochs=2, renormalize_relations=True))
        assert abs(np.linalg.norm(state.relations.value[0]) - 1) <= 1e-9

    def test_deterministic(self, ring):
        runs = []
        for _ in range(2):
            *_, (_, state) = train_baseline(ring, ring_config(epochs=3))
            runs.append(checkpoint_bytes(state))
        assert runs[0] == runs[1]

    def test_empty_train(self):
        with pytest.raises(ConfigError):
            init_state(Dataset(Vocabulary(), []), ring_config())

    def test_filtered_negatives_avoid_true_triples(self, ring, monkeypatch):
        import transkb.trainer as tr
        state = init_state(ring, ring_config(filtered_negatives=True, batch_size=10, epochs=1))
        known = {tuple(t) for t in triples_to_array(ring.train).tolist()}
        seen = []
        original = tr._baseline_iteration

        def spy(st, pos, neg):
            seen.append(neg.copy())
            return original(st, pos, neg)

        monkeypatch.setattr(tr, "_baseline_iteration", spy)
        list(run_epochs(state, ring, epochs=1))
        negs = np.concatenate(seen)
        assert not any(tuple(t) in known for t in negs.tolist())

    def test_validation_metrics_and_early_stopping(self, ring):
        cfg = ring_config(epochs=30, eval_every=1, early_stopping=True, patience=1, learning_rate=0.001)
        results = [r for r, _ in train_baseline(ring, cfg)]
        ranks = [r.val_mean_rank for r in results]
        assert all(r is not None for r in ranks)
        # patience 1: stop at the first evaluation that fails to improve on the best so far
        first_bad = next((i for i in range(1, len(ranks)) if ranks[i] >= min(ranks[:i])), None)
        if first_bad is None:
            assert len(results) == 30 and not results[-1].stopped
        else:
            assert len(results) == first_bad + 1 and results[-1].stopped


class TestJoint:
    def test_outputs_and_relations_unit_norm(self):
        ds = small_joint_dataset()
        cfg = TrainConfig(mode="joint_mlp", dim=4, hidden=8, batch_size=3, epochs=2)
        checks = []

        def check(state):
            out = state.encoder.encode_batch(list(ds.descriptions.values()))
            checks.append((np.max(np.abs(np.linalg.norm(out, axis=1) - 1)),
                           np.max(np.abs(np.linalg.norm(state.relations.value, axis=1) - 1))))

        for result, _ in train_joint(ds, cfg, on_iteration=check):
            assert abs(result.mean_output_norm - 1) <= 1e-12
        assert len(checks) == 6
        assert max(c[0] for c in checks) <= 1e-12 and max(c[1] for c in checks) <= 1e-9

    def test_gradient_flow_matches_finite_differences(self):
        ds = small_joint_dataset()
        cfg = TrainConfig(mode="joint_mlp", dim=4, hidden=8, batch_size=100, epochs=1,
                          momentum=0.0, learning_rate=0.05, gamma=2.0, distance="l2")
        state = init_state(ds, cfg)
        for p in state.encoder.parameters().values():
            p.value += np.random.default_rng(0).normal(scale=0.05, size=p.shape)
        before = copy.deepcopy(state)
        list(run_epochs(state, ds, epochs=1))

        train = triples_to_array(ds.train)
        pos = train[before.rngs["shuffle"].permutation(len(train))]
        neg = corrupt_batch(pos, before.rngs["corrupt"], before.candidates)
        enc = before.encoder
        R = before.relations.value
        texts = [ds.descriptions[i] for i in range(6)]

        def loss():
            emb = enc.encode_batch(texts)
            return margin_loss((emb[pos[:, 0]], R[pos[:, 1]], emb[pos[:, 2]]),
                               (emb[neg[:, 0]], R[neg[:, 1]], emb[neg[:, 2]]), 2.0, "l2")[0]

        params = enc.parameters()
        implied = {k: (params[k].value - state.encoder.parameters()[k].value) / cfg.learning_rate
                   for k in params}
        report = gradient_check(loss, {k: p.value for k, p in params.items()}, implied, tolerance=1e-4)
        assert report.passed, report.errors

        # relations: the step is followed by renormalization
        fd = np.zeros_like(R)
        for idx in np.ndindex(R.shape):
            old = R[idx]
            R[idx] = old + 1e-6
            up = loss()
            R[idx] = old - 1e-6
            down = loss()
            R[idx] = old
            fd[idx] = (up - down) / 2e-6
        stepped = R - cfg.learning_rate * fd
        stepped /= np.linalg.norm(stepped, axis=1, keepdims=True)
        np.testing.assert_allclose(state.relations.value, stepped, atol=1e-8)

    def test_missing_description_named(self):
        ds = small_joint_dataset()
        del ds.descriptions[3]
        with pytest.raises(TrainingError, match="e3"):
            init_state(ds, TrainConfig(mode="joint_mlp", dim=4, hidden=8))

    def test_cnn_needs_word_vectors(self):
        with pytest.raises(ConfigError):
            init_state(small_joint_dataset(), TrainConfig(mode="joint_cnn"))

    def test_cnn_trains_word_vectors(self):
        ds = small_joint_dataset()
        wv = random_word_vectors(ds.descriptions.values(), 5)
        cfg = TrainConfig(mode="joint_cnn", dim=4, word_dim=5, dense=6, epochs=1, batch_size=4,
                          cnn_layers=[["conv", 3, 1], ["conv", 3, 3], ["pool", 2, 2]], min_len=4)
        state = init_state(ds, cfg, wv)
        words0 = state.encoder.params["words"].value.copy()
        list(run_epochs(state, ds))
        assert not np.array_equal(words0, state.encoder.params["words"].value)

    def test_ablation_calibrated_start(self, nameable):
        cfg = TrainConfig(mode="joint_mlp", dim=8, hidden=16, normalize_output=False)
        state = init_state(nameable, cfg)
        texts = [nameable.descriptions[int(e)] for e in state.candidates]
        norms = np.linalg.norm(state.encoder.encode_batch(texts), axis=1)
        assert norms.mean() == pytest.approx(1.0, rel=1e-12)


class TestCheckpoint:
    @pytest.fixture
    def trained(self, ring):
        *_, (_, state) = train_baseline(ring, ring_config(epochs=3))
        return state

    def test_round_trip_bytes(self, trained, tmp_path):
        path = tmp_path / "a.tkb"
        save_checkpoint(trained, path)
        again = load_checkpoint(path)
        assert checkpoint_bytes(again) == path.read_bytes()
        assert not list(tmp_path.glob("*.tmp"))

    def test_round_trip_metrics(self, trained, ring, tmp_path):
        from transkb.evaluate import link_prediction_eval
        path = tmp_path / "a.tkb"
        save_checkpoint(trained, path)
        again = load_checkpoint(path)
        a = link_prediction_eval(trained.store(), ring.test, trained.candidates)
        b = link_prediction_eval(again.store(), ring.test, again.candidates)
        assert a.to_tsv() == b.to_tsv()

    def test_joint_round_trip(self, nameable):
        cfg = TrainConfig(mode="joint_mlp", dim=8, hidden=16, epochs=1)
        *_, (_, state) = train_joint(nameable, cfg)
        data = checkpoint_bytes(state, nameable)
        again = parse_checkpoint(data)
        assert checkpoint_bytes(again) == data
        np.testing.assert_array_equal(again.encoder.encode("item001"), state.encoder.encode("item001"))
        np.testing.assert_array_equal(again.store().entities, state.store(nameable).entities)

    def test_resume_matches_uninterrupted(self, ring):
        cfg = ring_config(epochs=4)
        *_, (_, full) = train_baseline(ring, cfg)
        state = init_state(ring, ring_config(epochs=4))
        list(run_epochs(state, ring, epochs=2))
        resumed = parse_checkpoint(checkpoint_bytes(state))
        list(run_epochs(resumed, ring))
        assert checkpoint_bytes(resumed) == checkpoint_bytes(full)

    def test_corrupt_byte(self, trained):
        data = bytearray(checkpoint_bytes(trained))
        data[len(data) // 2] ^= 0x01
        with pytest.raises(IntegrityError):
            parse_checkpoint(bytes(data))

    def test_truncated(self, trained):
        data = checkpoint_bytes(trained)
        with pytest.raises(IntegrityError):
            parse_checkpoint(data[:-10])

    def test_version_mismatch(self, trained):
        data = checkpoint_bytes(trained)
        with pytest.raises(UnsupportedVersionError):
            parse_checkpoint(b"TKB2" + data[4:])

    def test_precision_mismatch(self, trained):
        with pytest.raises(PrecisionError):
            parse_checkpoint(checkpoint_bytes(trained), np.float32)
