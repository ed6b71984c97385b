"""Mining latent classes out of the O tag with a weakly supervised pair classifier.

The group classifier scores token pairs on an 8-block feature built from two
encoder states: the frozen pre-training snapshot (position h) and the live
trained state (position h-tilde). Same-class pairs of annotated tokens are
positives, cross-class pairs negatives; at inference the classifier scores
all pairs of O-tagged candidates, pairs above the threshold gamma are joined,
and connected components of the resulting graph become the mined classes.
Components below the minimum size, and isolated tokens, are treated as
task-irrelevant and stay plain O.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse
from scipy.sparse.csgraph import connected_components

from .corpus import Corpus, LabeledExample, Occurrence
from .encoder import EncoderState, encode, encode_values
from .grad import SGD, Tape, Tensor, affine, sigmoid, sigmoid_bce
from .prototypes import TrainConfig

DEFAULT_GAMMA = 0.68
DEFAULT_MIN_SIZE = 3
IRRELEVANT = -1
_CHUNK = 256


@dataclass
class GroupClassifier:
    """Affine pair scorer (8*d_h -> 1) with a same-group threshold in (0, 1)."""

    weight: Tensor  # [8*d_h, 1]
    bias: Tensor  # [1]
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be strictly between 0 and 1, got {self.gamma}")

    @property
    def hidden_dim(self) -> int:
        return self.weight.values.shape[0] // 8

    @classmethod
    def create(cls, hidden_dim: int, seed: int, gamma: float = DEFAULT_GAMMA) -> "GroupClassifier":
        rng = np.random.default_rng([seed, 8])
        return cls(
            weight=Tensor(rng.uniform(-0.1, 0.1, size=(8 * hidden_dim, 1)), requires_grad=True),
            bias=Tensor(np.zeros(1), requires_grad=True),
            gamma=gamma,
        )


def pair_feature(item_i, item_j, frozen: EncoderState, live: EncoderState) -> np.ndarray:
    """8-block pair feature from unlearned (h) and learned (h-tilde) positions.

    Layout: [h_i; h_j; ht_i; ht_j; |h_i-h_j|; |ht_i-ht_j|; |h_i-ht_i|; |h_j-ht_j|].
    """
    hi = encode(frozen, *item_i).values
    hj = encode(frozen, *item_j).values
    ti = encode(live, *item_i).values
    tj = encode(live, *item_j).values
    return _feature_from_vectors(hi, hj, ti, tj)


def _feature_from_vectors(hi, hj, ti, tj) -> np.ndarray:
    return np.concatenate(
        [hi, hj, ti, tj, np.abs(hi - hj), np.abs(ti - tj), np.abs(hi - ti), np.abs(hj - tj)]
    )


def _feature_matrix(H: np.ndarray, T: np.ndarray, I, J) -> np.ndarray:
    """Vectorized pair features for index arrays I, J over precomputed encodings."""
    hi, hj, ti, tj = H[I], H[J], T[I], T[J]
    return np.hstack(
        [hi, hj, ti, tj, np.abs(hi - hj), np.abs(ti - tj), np.abs(hi - ti), np.abs(hj - tj)]
    )


def pair_score(clf: GroupClassifier, feature_ij: np.ndarray, feature_ji: np.ndarray) -> float:
    """Symmetric same-group confidence: sigmoid of the mean of both orientations."""
    w = clf.weight.values[:, 0]
    b = float(clf.bias.values[0])
    logit = 0.5 * (feature_ij @ w + feature_ji @ w) + b
    return float(sigmoid(logit))


def _symmetric_logits(clf: GroupClassifier, H: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Full matrix of symmetrized pair logits.

    The affine score decomposes over the feature blocks: averaging the two
    orientations leaves per-token terms (blocks 1-4 and 7-8) plus the two
    symmetric distance blocks, so the M x M matrix costs O(M^2 d) instead of
    building every 8d feature.
    """
    d = clf.hidden_dim
    w = clf.weight.values[:, 0]
    w_h_i, w_h_j = w[0:d], w[d:2 * d]
    w_t_i, w_t_j = w[2 * d:3 * d], w[3 * d:4 * d]
    w_dh, w_dt = w[4 * d:5 * d], w[5 * d:6 * d]
    w_m_i, w_m_j = w[6 * d:7 * d], w[7 * d:8 * d]

    per_token = (
        H @ (0.5 * (w_h_i + w_h_j))
        + T @ (0.5 * (w_t_i + w_t_j))
        + np.abs(H - T) @ (0.5 * (w_m_i + w_m_j))
    )
    m = H.shape[0]
    logits = per_token[:, None] + per_token[None, :] + float(clf.bias.values[0])
    for start in range(0, m, _CHUNK):
        stop = min(start + _CHUNK, m)
        logits[start:stop] += np.abs(H[start:stop, None, :] - H[None, :, :]) @ w_dh
        logits[start:stop] += np.abs(T[start:stop, None, :] - T[None, :, :]) @ w_dt
    return logits


def _resolve(corpus: Corpus, occ: Occurrence):
    return corpus.sentences[occ.sentence_id].tokens, occ.token_index


def _encode_pair_inputs(corpus: Corpus, occurrences, frozen, live):
    items = [_resolve(corpus, o) for o in occurrences]
    return encode_values(frozen, items), encode_values(live, items)


def train_step2(
    examples: list[LabeledExample],
    frozen: EncoderState,
    live: EncoderState,
    config: TrainConfig,
    corpus: Corpus,
    pairs_per_example: int = 50,
    gamma: float = DEFAULT_GAMMA,
) -> GroupClassifier:
    """Train the binary group classifier on class-labeled token pairs.

    Pairs are sampled 1:1 positive:negative per batch (positives with
    replacement, so self-pairs occur and anchor the zero-distance regime).
    Both encoder states are frozen here; only the affine scorer updates.
    """
    labels = sorted({ex.label for ex in examples})
    if len(labels) < 2:
        raise ValueError("train_step2 needs at least two distinct classes to form negative pairs")
    by_class = {cls: [i for i, ex in enumerate(examples) if ex.label == cls] for cls in labels}

    occurrences = [Occurrence(ex.sentence_id, ex.token_index) for ex in examples]
    H, T = _encode_pair_inputs(corpus, occurrences, frozen, live)

    clf = GroupClassifier.create(live.output_dim, seed=config.seed, gamma=gamma)
    opt = SGD([clf.weight, clf.bias], lr=config.lr)
    rng = np.random.default_rng([config.seed, 9])

    n = len(examples)
    pairs_per_epoch = pairs_per_example * n
    half = config.batch_size // 2
    for _ in range(config.epochs):
        remaining = pairs_per_epoch
        while remaining > 0:
            take = min(half, (remaining + 1) // 2)
            # positives: same class, sampled with replacement
            pos_cls = rng.integers(len(labels), size=take)
            pos_i = np.array([by_class[labels[c]][rng.integers(len(by_class[labels[c]]))]
                              for c in pos_cls])
            pos_j = np.array([by_class[labels[c]][rng.integers(len(by_class[labels[c]]))]
                              for c in pos_cls])
            # negatives: two different classes
            neg_a = rng.integers(len(labels), size=take)
            neg_shift = 1 + rng.integers(len(labels) - 1, size=take)
            neg_b = (neg_a + neg_shift) % len(labels)
            neg_i = np.array([by_class[labels[c]][rng.integers(len(by_class[labels[c]]))]
                              for c in neg_a])
            neg_j = np.array([by_class[labels[c]][rng.integers(len(by_class[labels[c]]))]
                              for c in neg_b])

            I = np.concatenate([pos_i, neg_i])
            J = np.concatenate([pos_j, neg_j])
            y = np.concatenate([np.ones(take), np.zeros(take)])
            feats = Tensor(_feature_matrix(H, T, I, J))
            with Tape() as tape:
                logits = affine(feats, clf.weight, clf.bias)
                loss = sigmoid_bce(logits, y.reshape(-1, 1))
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            remaining -= 2 * take
    return clf


def pair_accuracy(
    clf: GroupClassifier,
    examples: list[LabeledExample],
    frozen: EncoderState,
    live: EncoderState,
    corpus: Corpus,
    n_pairs: int = 2000,
    seed: int = 0,
) -> float:
    """Balanced held-out pair accuracy at the 0.5 decision point."""
    labels = sorted({ex.label for ex in examples})
    by_class = {cls: [i for i, ex in enumerate(examples) if ex.label == cls] for cls in labels}
    occurrences = [Occurrence(ex.sentence_id, ex.token_index) for ex in examples]
    H, T = _encode_pair_inputs(corpus, occurrences, frozen, live)
    rng = np.random.default_rng([seed, 10])
    w = clf.weight.values[:, 0]
    b = float(clf.bias.values[0])
    correct = 0
    for t in range(n_pairs):
        positive = t % 2 == 0
        if positive:
            cls = labels[rng.integers(len(labels))]
            i, j = rng.choice(by_class[cls], size=2)
        else:
            ca, cb = rng.choice(len(labels), size=2, replace=False)
            i = rng.choice(by_class[labels[ca]])
            j = rng.choice(by_class[labels[cb]])
        logit = 0.5 * (
            _feature_from_vectors(H[i], H[j], T[i], T[j]) @ w
            + _feature_from_vectors(H[j], H[i], T[j], T[i]) @ w
        ) + b
        correct += (logit > 0) == positive
    return correct / n_pairs


@dataclass
class GroupAssignment:
    """Hard partition of O candidates into mined classes plus a remainder.

    `labels[i]` is the mined-class index of `candidates[i]`, or -1 for
    task-irrelevant tokens. `soft` (once soft labeling has run) holds one
    probability row over the mined classes for every assigned candidate.
    """

    candidates: tuple[Occurrence, ...]  # canonical order
    class_names: tuple[str, ...]  # o_1 .. o_r, by decreasing size
    labels: np.ndarray  # [M] int
    spans: tuple[tuple[int, int, int, int], ...]  # (sentence_id, start, end, class_idx)
    soft: np.ndarray | None = None  # [M, r]; rows meaningful where labels >= 0

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def members(self, class_idx: int) -> list[Occurrence]:
        return [c for c, l in zip(self.candidates, self.labels) if l == class_idx]

    def irrelevant_fraction(self) -> float:
        if len(self.candidates) == 0:
            return 0.0
        return float(np.mean(self.labels == IRRELEVANT))


def _canonical(candidates) -> tuple[Occurrence, ...]:
    return tuple(sorted(set(candidates), key=lambda o: (o.sentence_id, o.token_index)))


def _merge_spans(candidates, labels) -> tuple[tuple[int, int, int, int], ...]:
    """Merge consecutive same-class candidate tokens into multi-word spans."""
    spans = []
    by_sentence: dict[int, list[tuple[int, int]]] = {}
    for occ, lab in zip(candidates, labels):
        if lab != IRRELEVANT:
            by_sentence.setdefault(occ.sentence_id, []).append((occ.token_index, int(lab)))
    for sid in sorted(by_sentence):
        run_start = None
        prev_tid = prev_lab = None
        for tid, lab in sorted(by_sentence[sid]):
            if run_start is not None and tid == prev_tid + 1 and lab == prev_lab:
                prev_tid = tid
                continue
            if run_start is not None:
                spans.append((sid, run_start, prev_tid, prev_lab))
            run_start, prev_tid, prev_lab = tid, tid, lab
        if run_start is not None:
            spans.append((sid, run_start, prev_tid, prev_lab))
    return tuple(spans)


def _components_to_assignment(candidates, component_ids: np.ndarray, min_size: int) -> GroupAssignment:
    sizes: dict[int, int] = {}
    first_member: dict[int, int] = {}
    for idx, comp in enumerate(component_ids):
        sizes[comp] = sizes.get(comp, 0) + 1
        first_member.setdefault(comp, idx)
    kept = [c for c, s in sizes.items() if s >= min_size]
    # name o_1.. by decreasing size; ties by smallest contained candidate index
    kept.sort(key=lambda c: (-sizes[c], first_member[c]))
    remap = {comp: i for i, comp in enumerate(kept)}
    labels = np.array([remap.get(c, IRRELEVANT) for c in component_ids], dtype=np.int64)
    names = tuple(f"o_{i + 1}" for i in range(len(kept)))
    return GroupAssignment(
        candidates=tuple(candidates),
        class_names=names,
        labels=labels,
        spans=_merge_spans(candidates, labels),
    )


def _threshold_components(logits: np.ndarray, gamma: float) -> np.ndarray:
    probs = sigmoid(logits)
    adj = probs > gamma
    np.fill_diagonal(adj, False)
    graph = scipy.sparse.csr_matrix(adj)
    _, comp = connected_components(graph, directed=False)
    return comp


def mine(
    clf: GroupClassifier,
    candidates,
    frozen: EncoderState,
    live: EncoderState,
    corpus: Corpus,
    gamma: float | None = None,
    min_size: int = DEFAULT_MIN_SIZE,
) -> GroupAssignment:
    """Partition O candidates into mined classes by thresholded pair grouping.

    An undirected edge joins candidates whose symmetric pair score exceeds
    gamma; connected components of size >= min_size become classes o_1..o_r
    (named by decreasing size). The result is independent of candidate input
    order: candidates are canonicalized by position first.
    """
    if gamma is None:
        gamma = clf.gamma
    cands = _canonical(candidates)
    if not cands:
        raise ValueError("mine requires a non-empty candidate set")
    H, T = _encode_pair_inputs(corpus, cands, frozen, live)
    logits = _symmetric_logits(clf, H, T)
    comp = _threshold_components(logits, gamma)
    return _components_to_assignment(cands, comp, min_size)


def soft_label(assignment: GroupAssignment, live: EncoderState, corpus: Corpus) -> GroupAssignment:
    """Attach per-token soft rows: softmax over cosine similarity to class centers.

    Each mined class's center is the mean of its members' live encodings;
    rows are computed for assigned tokens only.
    """
    if assignment.n_classes < 1:
        raise ValueError("soft_label requires at least one mined class")
    items = [_resolve(corpus, o) for o in assignment.candidates]
    T = encode_values(live, items)
    centers = np.zeros((assignment.n_classes, T.shape[1]))
    for k in range(assignment.n_classes):
        member_rows = T[assignment.labels == k]
        assert member_rows.shape[0] > 0, "mined classes are non-empty by construction"
        centers[k] = member_rows.mean(axis=0)

    def unit(rows):
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return rows / norms

    cosines = unit(T) @ unit(centers).T  # [M, r]
    shifted = cosines - cosines.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    soft = expo / expo.sum(axis=1, keepdims=True)
    soft[assignment.labels == IRRELEVANT] = 0.0
    return replace(assignment, soft=soft)


def calibrate_gamma(
    clf: GroupClassifier,
    candidates,
    frozen: EncoderState,
    live: EncoderState,
    corpus: Corpus,
    target_r: int,
    min_size: int = DEFAULT_MIN_SIZE,
    iterations: int = 30,
) -> float:
    """Find the threshold whose mined class count is (nearest to) target_r.

    Bisection runs in logit space between the extreme pair scores, where the
    class count on the merging branch is a monotone step function of the
    threshold: exact matches return early, otherwise the nearest count seen
    wins. Deterministic.
    """
    if target_r < 1:
        raise ValueError(f"target_r must be >= 1, got {target_r}")
    cands = _canonical(candidates)
    if not cands:
        raise ValueError("calibrate_gamma requires a non-empty candidate set")
    H, T = _encode_pair_inputs(corpus, cands, frozen, live)
    logits = _symmetric_logits(clf, H, T)
    off_diag = logits[~np.eye(len(cands), dtype=bool)]
    lo = float(off_diag.min()) - 1.0
    hi = float(off_diag.max()) + 1.0

    def count_at(logit_threshold: float) -> int:
        gamma = float(sigmoid(np.asarray(logit_threshold)))
        gamma = min(max(gamma, 1e-12), 1.0 - 1e-12)
        comp = _threshold_components(logits, gamma)
        sizes = np.bincount(comp)
        return int((sizes >= min_size).sum()), gamma

    best_gamma, best_diff = None, None
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        count, gamma = count_at(mid)
        diff = abs(count - target_r)
        if best_diff is None or diff < best_diff:
            best_gamma, best_diff = gamma, diff
        if count == target_r:
            return gamma
        if count > target_r:
            hi = mid  # too many classes: lower the threshold to merge groups
        else:
            lo = mid
    return best_gamma


def ws_baseline(candidates, embeddings, k: int, corpus: Corpus, seed: int = 0) -> GroupAssignment:
    """Word-similarity baseline: seeded k-means over static word embeddings.

    Initial centers are k candidates with distinct embedding vectors; Lloyd
    iterations run until centers move less than 1e-6 or 100 rounds. Every
    candidate is assigned (there is no irrelevant remainder); classes are
    named o_1.. by decreasing size like the main miner, and the caller applies
    the same soft labeling afterwards.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    cands = _canonical(candidates)
    X = np.stack(
        [embeddings.table[embeddings.vocab.id_of(corpus.sentences[o.sentence_id].tokens[o.token_index])]
         for o in cands]
    )
    distinct = np.unique(X, axis=0)
    if k > distinct.shape[0]:
        raise ValueError(
            f"k={k} exceeds the number of distinct candidate vectors ({distinct.shape[0]})"
        )

    rng = np.random.default_rng([seed, 11])
    order = rng.permutation(len(cands))
    centers: list[np.ndarray] = []
    for idx in order:
        if not any(np.array_equal(X[idx], c) for c in centers):
            centers.append(X[idx].copy())
        if len(centers) == k:
            break
    centers = np.stack(centers)

    assign = np.zeros(len(cands), dtype=np.int64)
    for _ in range(100):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for c in range(k):
            members = X[assign == c]
            if members.shape[0]:
                new_centers[c] = members.mean(axis=0)
        movement = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if movement < 1e-6:
            break

    return _components_to_assignment(cands, assign, min_size=1)
