"""Prototype table, normalized distance, loss bounds, and step-1 training."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muco.corpus import Corpus, LabeledExample, Sentence, SyntheticSpec, generate_synthetic
from muco.encoder import EncoderState
from muco.grad import Tensor, stable_softmax
from muco.prototypes import (
    TrainConfig,
    classify,
    distance,
    init_prototypes,
    load_prototypes,
    proto_loss,
    save_prototypes,
    train_step1,
)

RNG = np.random.default_rng(7)


def ceiling(k: int) -> float:
    """Best softmax probability with logits clamped to [-1, 1] and k classes."""
    return math.exp(1) / (math.exp(1) + (k - 1) * math.exp(-1))


class TestInitPrototypes:
    def test_same_seed_identical(self):
        a = init_prototypes(["x", "y"], 8, seed=3)
        b = init_prototypes(["x", "y"], 8, seed=3)
        np.testing.assert_array_equal(a.matrix.values, b.matrix.values)

    def test_rows_unit_norm(self):
        table = init_prototypes(["x", "y", "z"], 16, seed=0)
        norms = np.linalg.norm(table.matrix.values, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_default_scale_is_ten(self):
        assert float(init_prototypes(["x"], 4, seed=0).scale.values) == 10.0

    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            init_prototypes(["x", "x"], 4, seed=0)

    def test_add_classes_disjointness_enforced(self):
        table = init_prototypes(["x"], 4, seed=0)
        with pytest.raises(ValueError, match="x"):
            table.add_classes(["x"], seed=1)
        table.add_classes(["o_1"], seed=1)
        assert table.class_names == ["x", "o_1"]


class TestDistance:
    def test_self_distance_minus_one(self):
        v = RNG.normal(size=6)
        assert distance(Tensor(v), Tensor(v)).item() == pytest.approx(-1.0)

    def test_orthogonal_zero(self):
        assert distance(Tensor([1.0, 0.0]), Tensor([0.0, 2.0])).item() == pytest.approx(0.0)

    def test_scale_invariant(self):
        h, p = RNG.normal(size=5), RNG.normal(size=5)
        d1 = distance(Tensor(h), Tensor(p)).item()
        d2 = distance(Tensor(3.7 * h), Tensor(p)).item()
        assert d1 == pytest.approx(d2, abs=1e-12)

    @given(st.lists(st.floats(-5, 5), min_size=4, max_size=4),
           st.lists(st.floats(-5, 5), min_size=4, max_size=4))
    def test_range(self, a, b):
        a, b = np.asarray(a), np.asarray(b)
        if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
            return
        d = distance(Tensor(a), Tensor(b)).item()
        assert -1.0 - 1e-9 <= d <= 1.0 + 1e-9


def single_token_setup(n_classes=2, d_h=6, seed=0):
    """One-sentence-per-class corpus over distinct tokens, plus encoder/table."""
    data = generate_synthetic(
        SyntheticSpec(predefined_classes=n_classes, latent_classes=1, noise_types=1,
                      sentences=0, seed=seed)
    )
    # build the corpus by hand: one entity token per sentence
    classes = [f"E{i + 1}" for i in range(n_classes)]
    sentences = [Sentence((f"e{i + 1}w00",), (f"B-{classes[i]}",)) for i in range(n_classes)]
    corp = Corpus(sentences=sentences)
    enc = EncoderState.create(data.embeddings, hidden_dim=d_h, window=1, seed=seed)
    table = init_prototypes(classes, d_h, seed=seed)
    return corp, enc, table, classes


class TestProtoLoss:
    def test_equidistant_two_classes_is_ln2(self):
        corp, enc, table, classes = single_token_setup()
        # force both prototypes to the same vector: both distances equal
        table.matrix.values[1] = table.matrix.values[0]
        ex = LabeledExample(0, 0, classes[0])
        loss = proto_loss(ex, enc, table, classes, scaled=False, corpus=corp)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_logit_floor_four_classes(self):
        # with distances bounded in [-1, 1] the best unscaled loss is the
        # ceiling value even for a perfect prediction
        expected = -math.log(ceiling(4))
        logits = np.array([1.0, -1.0, -1.0, -1.0])
        probs = stable_softmax(logits)
        assert probs.max() == pytest.approx(ceiling(4), abs=1e-12)
        assert -math.log(probs.max()) == pytest.approx(expected, abs=1e-12)

    def test_scaled_probability_exceeds_ceiling(self):
        probs = stable_softmax(10.0 * np.array([1.0, -1.0, -1.0, -1.0]))
        assert probs.max() > 0.999

    def test_label_outside_subset_rejected(self):
        corp, enc, table, classes = single_token_setup()
        ex = LabeledExample(0, 0, "missing")
        with pytest.raises(ValueError, match="missing"):
            proto_loss(ex, enc, table, classes, corpus=corp)

    @given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40)
    def test_unscaled_probability_ceiling_property(self, k, seed):
        rng = np.random.default_rng(seed)
        logits = rng.uniform(-1.0, 1.0, size=k)
        assert stable_softmax(logits).max() <= ceiling(k) + 1e-12

    def test_scale_monotonicity(self):
        logits = np.array([0.8, 0.1, -0.5])
        probs = [stable_softmax(s * logits).max() for s in (1.0, 2.0, 5.0, 10.0, 30.0)]
        assert all(b > a for a, b in zip(probs, probs[1:]))


class TestClassify:
    def test_single_class_probability_one(self):
        corp, enc, table, classes = single_token_setup()
        out = classify((corp.sentences[0].tokens, 0), enc, table, [classes[0]])
        np.testing.assert_allclose(out.probabilities, [1.0])

    def test_probabilities_sum_to_one(self):
        corp, enc, table, classes = single_token_setup(n_classes=4)
        out = classify((corp.sentences[0].tokens, 0), enc, table, classes)
        assert abs(out.probabilities.sum() - 1.0) <= 1e-9

    def test_permutation_equivariance(self):
        corp, enc, table, classes = single_token_setup(n_classes=3)
        fwd = classify((corp.sentences[0].tokens, 0), enc, table, classes)
        rev = classify((corp.sentences[0].tokens, 0), enc, table, classes[::-1])
        np.testing.assert_allclose(fwd.probabilities, rev.probabilities[::-1], atol=1e-12)
        assert fwd.predicted == rev.predicted

    def test_argmax_invariant_to_prototype_order(self):
        corp, enc, table, classes = single_token_setup(n_classes=3)
        out = classify((corp.sentences[0].tokens, 0), enc, table, classes)
        assert out.predicted in classes


class TestTrainStep1:
    def train_setup(self, seed=0):
        spec = SyntheticSpec(predefined_classes=2, latent_classes=1, noise_types=2,
                             sentences=60, seed=seed, separation=6.0)
        data = generate_synthetic(spec)
        enc = EncoderState.create(data.embeddings, hidden_dim=16, window=2, seed=seed)
        table = init_prototypes(list(data.corpus.classes), 16, seed=seed)
        examples = data.corpus.entity_examples()
        return data.corpus, enc, table, examples

    def test_two_separated_classes_reach_full_accuracy(self):
        corp, enc, table, examples = self.train_setup()
        train_step1(examples, enc, table, TrainConfig(epochs=50, lr=0.05, seed=0), corp)
        correct = 0
        for ex in examples:
            out = classify(ex, enc, table, table.class_names, corpus=corp)
            correct += out.predicted == ex.label
        assert correct / len(examples) == 1.0

    def test_zero_epochs_leaves_encoder_unchanged(self):
        corp, enc, table, examples = self.train_setup()
        before = {k: v.copy() for k, v in enc.state_arrays().items()}
        train_step1(examples, enc, table, TrainConfig(epochs=0), corp)
        for k, v in enc.state_arrays().items():
            np.testing.assert_array_equal(v, before[k])

    def test_same_seed_identical_loss_curves(self):
        corp1, enc1, table1, ex1 = self.train_setup()
        corp2, enc2, table2, ex2 = self.train_setup()
        cfg = TrainConfig(epochs=5, lr=0.05, seed=4)
        log1 = train_step1(ex1, enc1, table1, cfg, corp1)
        log2 = train_step1(ex2, enc2, table2, cfg, corp2)
        assert log1 == log2

    def test_full_batch_loss_monotone_non_increasing(self):
        corp, enc, table, examples = self.train_setup()
        cfg = TrainConfig(epochs=30, lr=0.02, batch_size=10_000, seed=0)
        log = train_step1(examples, enc, table, cfg, corp)
        assert all(b <= a + 1e-12 for a, b in zip(log, log[1:]))

    def test_prototypes_stay_unit_norm(self):
        corp, enc, table, examples = self.train_setup()
        train_step1(examples, enc, table, TrainConfig(epochs=3, seed=0), corp)
        norms = np.linalg.norm(table.matrix.values, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_empty_example_set_rejected(self):
        corp, enc, table, _ = self.train_setup()
        with pytest.raises(ValueError):
            train_step1([], enc, table, TrainConfig(), corp)


class TestPrototypeFile:
    def test_round_trip(self, tmp_path):
        table = init_prototypes(["a", "b", "O"], 8, seed=1)
        path = tmp_path / "protos.txt"
        save_prototypes(table, path)
        again = load_prototypes(path)
        assert again.class_names == table.class_names
        np.testing.assert_array_equal(again.matrix.values, table.matrix.values)
        assert float(again.scale.values) == float(table.scale.values)
