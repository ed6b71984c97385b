"""Prototype table and metric-learning losses over normalized dot-product distance.

A class is represented by a unit-norm vector; the distance between an encoded
token and a prototype is the negative inner product of the two L2-normalized
vectors, so distances live in [-1, 1]. Classification is a softmax over
negative distances, optionally multiplied by a trainable scale factor that
lifts the probability ceiling the bounded logits would otherwise impose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, LabeledExample
from .encoder import EncoderState, encode_batch
from .grad import (
    SGD,
    Tape,
    Tensor,
    gather_rows,
    l2_normalize,
    matmul,
    mul_scalar,
    neg_dot,
    softmax_xent,
    stable_softmax,
    transpose,
)

SCALE_FLOOR = 0.01
DEFAULT_SCALE = 10.0


@dataclass
class PrototypeTable:
    """One unit-norm vector per class, plus a shared trainable scale factor."""

    class_names: list[str]
    matrix: Tensor  # [C, d_h], rows re-normalized after every update
    scale: Tensor  # positive scalar

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("duplicate class names in prototype table")

    @property
    def dim(self) -> int:
        return self.matrix.values.shape[1]

    def index_of(self, name: str) -> int:
        return self.class_names.index(name)

    def vector(self, name: str) -> np.ndarray:
        return self.matrix.values[self.index_of(name)]

    def parameters(self) -> list[Tensor]:
        return [self.matrix, self.scale]

    def add_classes(self, names, seed: int) -> None:
        """Append freshly initialized unit-norm prototypes for new classes."""
        names = list(names)
        clash = set(names) & set(self.class_names)
        if clash:
            raise ValueError(f"classes already present: {sorted(clash)}")
        if not names:
            return
        rng = np.random.default_rng([seed, 5])
        rows = rng.normal(size=(len(names), self.dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        self.matrix.values = np.vstack([self.matrix.values, rows])
        self.matrix.grad = None
        self.class_names.extend(names)

    def renormalize(self) -> None:
        """Project rows back to unit norm and clamp the scale positive.

        Called after every optimizer step: only prototype direction matters
        (distance normalizes internally), so the radial degree of freedom is
        removed rather than left to drift.
        """
        norms = np.linalg.norm(self.matrix.values, axis=1, keepdims=True)
        np.divide(self.matrix.values, norms, out=self.matrix.values, where=norms > 0)
        if float(self.scale.values) < SCALE_FLOOR:
            self.scale.values[...] = SCALE_FLOOR


def init_prototypes(classes, dim: int, seed: int, scale: float = DEFAULT_SCALE) -> PrototypeTable:
    """Randomly initialize unit-norm prototypes for the given classes."""
    names = list(classes)
    if not names:
        raise ValueError("cannot initialize an empty prototype table")
    if len(set(names)) != len(names):
        raise ValueError("duplicate class names")
    rng = np.random.default_rng([seed, 5])
    rows = rng.normal(size=(len(names), dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return PrototypeTable(
        class_names=names,
        matrix=Tensor(rows, requires_grad=True),
        scale=Tensor(np.asarray(float(scale)), requires_grad=True),
    )


def save_prototypes(table: PrototypeTable, path) -> None:
    """Text format: header `d_h s`, then one `class v1 ... vd` line per class."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{table.dim} {float(table.scale.values):.17g}\n")
        for name, row in zip(table.class_names, table.matrix.values):
            fh.write(name + " " + " ".join(f"{v:.17g}" for v in row) + "\n")


def load_prototypes(path) -> PrototypeTable:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        dim, scale = int(header[0]), float(header[1])
        names, rows = [], []
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            names.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(names), dim)
    return PrototypeTable(
        class_names=names,
        matrix=Tensor(matrix, requires_grad=True),
        scale=Tensor(np.asarray(scale), requires_grad=True),
    )


def distance(h: Tensor, p: Tensor) -> Tensor:
    """Normalized negative-dot distance: -(h/|h|) . (p/|p|), in [-1, 1]."""
    return neg_dot(l2_normalize(h), l2_normalize(p))


@dataclass(frozen=True)
class ClassifierOutput:
    class_names: tuple[str, ...]
    probabilities: np.ndarray

    @property
    def predicted(self) -> str:
        return self.class_names[int(np.argmax(self.probabilities))]


def _subset_logits(
    encoded: Tensor, table: PrototypeTable, class_subset, scaled: bool
) -> tuple[Tensor, list[str]]:
    names = list(class_subset)
    idx = np.array([table.index_of(n) for n in names], dtype=np.intp)
    protos = l2_normalize(gather_rows(table.matrix, idx))
    sims = matmul(l2_normalize(encoded), transpose(protos))  # [B, C] = -distances
    if scaled:
        sims = mul_scalar(sims, table.scale)
    return sims, names


def batch_loss(
    encoder: EncoderState,
    table: PrototypeTable,
    items,
    targets: np.ndarray,
    class_subset,
    scaled: bool,
) -> Tensor:
    """Mean cross-entropy over a batch of (tokens, index) items.

    `targets` holds one distribution row per item, aligned with class_subset.
    """
    logits, _ = _subset_logits(encode_batch(encoder, items), table, class_subset, scaled)
    return softmax_xent(logits, targets)


def proto_loss(
    example,
    encoder: EncoderState,
    table: PrototypeTable,
    class_subset,
    scaled: bool = False,
    corpus: Corpus | None = None,
) -> Tensor:
    """Cross-entropy of one labeled example against a class subset.

    `example` is a LabeledExample (resolved through `corpus`) or a
    (tokens, index, label) triple.
    """
    if isinstance(example, LabeledExample):
        if corpus is None:
            raise ValueError("proto_loss needs the corpus to resolve a LabeledExample")
        tokens = corpus.sentences[example.sentence_id].tokens
        index, label = example.token_index, example.label
    else:
        tokens, index, label = example
    names = list(class_subset)
    if label not in names:
        raise ValueError(f"label '{label}' is not in the class subset {names}")
    target = np.zeros((1, len(names)))
    target[0, names.index(label)] = 1.0
    return batch_loss(encoder, table, [(tokens, index)], target, names, scaled)


def classify(
    example,
    encoder: EncoderState,
    table: PrototypeTable,
    class_subset=None,
    corpus: Corpus | None = None,
) -> ClassifierOutput:
    """Class probabilities for one token occurrence (inference mode)."""
    if isinstance(example, LabeledExample):
        if corpus is None:
            raise ValueError("classify needs the corpus to resolve a LabeledExample")
        tokens, index = corpus.sentences[example.sentence_id].tokens, example.token_index
    else:
        tokens, index = example
    names = list(class_subset) if class_subset is not None else list(table.class_names)
    if not names:
        raise ValueError("class subset is empty")
    logits, _ = _subset_logits(encode_batch(encoder, [(tokens, index)]), table, names, True)
    probs = stable_softmax(logits.values[0])
    return ClassifierOutput(class_names=tuple(names), probabilities=probs)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.05
    batch_size: int = 64
    seed: int = 0


def train_step1(
    examples: list[LabeledExample],
    encoder: EncoderState,
    table: PrototypeTable,
    config: TrainConfig,
    corpus: Corpus,
) -> list[float]:
    """Minibatch SGD on the unscaled prototype loss over predefined classes.

    Returns the per-epoch mean loss. Deterministic for a fixed seed.
    """
    if not examples:
        raise ValueError("train_step1 requires a non-empty example set")
    names = list(table.class_names)
    for ex in examples:
        if ex.label not in names:
            raise ValueError(f"example labeled '{ex.label}' has no prototype")
    items = [
        (corpus.sentences[ex.sentence_id].tokens, ex.token_index) for ex in examples
    ]
    target_rows = np.zeros((len(examples), len(names)))
    for i, ex in enumerate(examples):
        target_rows[i, names.index(ex.label)] = 1.0

    params = encoder.parameters() + [table.matrix]
    opt = SGD(params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 6])
    log: list[float] = []
    n = len(examples)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            with Tape() as tape:
                loss = batch_loss(
                    encoder,
                    table,
                    [items[i] for i in batch],
                    target_rows[batch],
                    names,
                    scaled=False,
                )
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            table.renormalize()
            losses.append(loss.item() * len(batch))
        log.append(float(sum(losses) / n))
    return log
