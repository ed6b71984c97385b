"""Data plane: BIO corpora, class splits, episodes, and the synthetic benchmark.

The synthetic generator builds a token-level corpus whose embedding space has
known cluster structure: every class (entity classes, latent undefined
classes hiding inside the O tag, and noise types) owns a sub-vocabulary drawn
from an isotropic Gaussian around a class center, with centers kept at least
`separation` within-cluster standard deviations apart. Latent-class tokens
are emitted next to entities of correlated classes, so that "O words that
co-occur with entities" is a real, recoverable signal; the true latent label
of every O token is retained in a sidecar for scoring the miner.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .encoder import UNK_ID, Vocabulary, WordEmbeddings

O_TAG = "O"
MINED_CLASS_RE = re.compile(r"^o_\d+$")


@dataclass(frozen=True)
class Sentence:
    """Ordered tokens with same-length BIO tags."""

    tokens: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.tags):
            raise ValueError(
                f"sentence has {len(self.tokens)} tokens but {len(self.tags)} tags"
            )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Occurrence:
    """A token position: sentence id (index into the corpus) and token index."""

    sentence_id: int
    token_index: int


@dataclass(frozen=True)
class LabeledExample:
    """A queried token occurrence together with its class label."""

    sentence_id: int
    token_index: int
    label: str


def tag_class(tag: str) -> str:
    """Class name carried by a BIO tag ('B-PER' -> 'PER', 'O' -> 'O')."""
    return tag[2:] if tag.startswith(("B-", "I-")) else tag


def entity_spans(sentence: Sentence) -> list[tuple[str, int, int]]:
    """Extract (class, start, end_inclusive) spans from BIO tags.

    An I- tag that does not continue a span of the same class starts a new
    span, mirroring the orphan repair applied at load time.
    """
    spans: list[tuple[str, int, int]] = []
    current: tuple[str, int] | None = None
    for i, tag in enumerate(sentence.tags):
        if tag.startswith("B-"):
            if current is not None:
                spans.append((current[0], current[1], i - 1))
            current = (tag[2:], i)
        elif tag.startswith("I-"):
            if current is None or current[0] != tag[2:]:
                if current is not None:
                    spans.append((current[0], current[1], i - 1))
                current = (tag[2:], i)
        else:
            if current is not None:
                spans.append((current[0], current[1], i - 1))
                current = None
    if current is not None:
        spans.append((current[0], current[1], len(sentence) - 1))
    return spans


@dataclass
class Corpus:
    """A list of sentences plus bookkeeping from loading."""

    sentences: list[Sentence]
    repaired_tags: int = 0

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def classes(self) -> tuple[str, ...]:
        seen = {tag_class(t) for s in self.sentences for t in s.tags} - {O_TAG}
        return tuple(sorted(seen))

    def entity_counts(self) -> dict[str, int]:
        counts: Counter[str] = Counter()
        for s in self.sentences:
            for cls, _, _ in entity_spans(s):
                counts[cls] += 1
        return dict(counts)

    def entity_examples(self, classes=None, sentence_ids=None) -> list[LabeledExample]:
        """Token-level labeled examples for entity-tagged tokens."""
        wanted = None if classes is None else set(classes)
        ids = range(len(self.sentences)) if sentence_ids is None else sentence_ids
        out = []
        for sid in ids:
            for tid, tag in enumerate(self.sentences[sid].tags):
                cls = tag_class(tag)
                if cls != O_TAG and (wanted is None or cls in wanted):
                    out.append(LabeledExample(sid, tid, cls))
        return out

    def o_occurrences(self, sentence_ids=None) -> list[Occurrence]:
        ids = range(len(self.sentences)) if sentence_ids is None else sentence_ids
        return [
            Occurrence(sid, tid)
            for sid in ids
            for tid, tag in enumerate(self.sentences[sid].tags)
            if tag == O_TAG
        ]


def load_bio(path) -> Corpus:
    """Parse a BIO TSV file: `token TAB tag` lines, blank line between sentences.

    Orphan I- tags (no preceding B-/I- of the same class) are promoted to B-
    and counted in ``Corpus.repaired_tags``.
    """
    sentences: list[Sentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    repaired = 0

    def flush():
        nonlocal tokens, tags, repaired
        if tokens:
            fixed = []
            prev_cls = None
            for tag in tags:
                if tag.startswith("I-"):
                    cls = tag[2:]
                    if prev_cls != cls:
                        tag = "B-" + cls
                        repaired += 1
                fixed.append(tag)
                prev_cls = tag_class(tag) if tag != O_TAG else None
            sentences.append(Sentence(tuple(tokens), tuple(fixed)))
            tokens, tags = [], []

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'token<TAB>tag', got {line!r}")
            tokens.append(parts[0])
            tags.append(parts[1])
    flush()
    if not sentences:
        raise ValueError(f"corpus file {path} contains no sentences")
    return Corpus(sentences=sentences, repaired_tags=repaired)


def write_bio(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, sent in enumerate(corpus.sentences):
            if i:
                fh.write("\n")
            for tok, tag in zip(sent.tokens, sent.tags):
                fh.write(f"{tok}\t{tag}\n")


def load_latent_sidecar(path) -> dict[tuple[int, int], str]:
    """Read `sentence_id TAB token_index TAB latent_class` rows."""
    labels: dict[tuple[int, int], str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 3 tab-separated fields")
            labels[(int(parts[0]), int(parts[1]))] = parts[2]
    return labels


def write_latent_sidecar(labels: dict[tuple[int, int], str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (sid, tid), cls in sorted(labels.items()):
            fh.write(f"{sid}\t{tid}\t{cls}\n")


# ---------------------------------------------------------------------------
# class split
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassSplit:
    base_classes: tuple[str, ...]
    few_shot_classes: tuple[str, ...]
    dissimilarity: dict[str, float] = field(default_factory=dict)


def split_classes(corpus: Corpus, embeddings: WordEmbeddings, fraction: float = 1 / 3) -> ClassSplit:
    """Partition the class inventory into base and few-shot classes.

    Each class is represented by the mean static embedding of its entity
    tokens. The class with the largest mean cosine dissimilarity to the other
    remaining classes is moved to the few-shot set, repeatedly, until the
    few-shot set is at least `fraction` of the remaining base set. Ties break
    alphabetically; the result is deterministic.
    """
    inventory = corpus.classes
    if not inventory:
        raise ValueError("corpus has no entity classes to split")

    vectors: dict[str, np.ndarray] = {}
    for cls in inventory:
        rows = []
        for sent in corpus.sentences:
            for tid, tag in enumerate(sent.tags):
                if tag_class(tag) == cls and tag != O_TAG:
                    tok_id = embeddings.vocab.id_of(sent.tokens[tid])
                    if tok_id != UNK_ID:
                        rows.append(embeddings.table[tok_id])
        if not rows:
            raise ValueError(f"class '{cls}' has no embeddable tokens")
        vectors[cls] = np.mean(rows, axis=0)

    def cos_dissim(a: np.ndarray, b: np.ndarray) -> float:
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return 1.0
        return 1.0 - float(a @ b) / (na * nb)

    base = list(inventory)
    few_shot: list[str] = []
    scores: dict[str, float] = {}
    while len(base) > 1 and len(few_shot) < fraction * len(base):
        best_cls, best_d = None, -np.inf
        for cls in sorted(base):
            mean_d = float(
                np.mean([cos_dissim(vectors[cls], vectors[o]) for o in base if o != cls])
            )
            scores[cls] = mean_d
            if mean_d > best_d:
                best_cls, best_d = cls, mean_d
        base.remove(best_cls)
        few_shot.append(best_cls)
    return ClassSplit(
        base_classes=tuple(sorted(base)),
        few_shot_classes=tuple(sorted(few_shot)),
        dissimilarity=scores,
    )


def write_split(split: ClassSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cls in split.base_classes:
            fh.write(f"{cls}\tbase\t{split.dissimilarity.get(cls, 0.0):.17g}\n")
        for cls in split.few_shot_classes:
            fh.write(f"{cls}\tfew_shot\t{split.dissimilarity.get(cls, 0.0):.17g}\n")


def load_split(path) -> ClassSplit:
    base, few = [], []
    scores = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            cls, role, score = line.split("\t")
            scores[cls] = float(score)
            (base if role == "base" else few).append(cls)
    return ClassSplit(tuple(sorted(base)), tuple(sorted(few)), scores)


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Episode:
    """Support sentences for training, query sentences for testing."""

    support_ids: tuple[int, ...]
    query_ids: tuple[int, ...]
    k: int


def sample_episode(corpus: Corpus, split: ClassSplit, k: int, seed: int) -> Episode:
    """Greedily pick support sentences until every few-shot class has >= k entities.

    Sentences are visited in a seeded random order; a sentence is taken only
    if it contains an entity of a still-unsatisfied few-shot class, so one
    sentence may satisfy several classes at once. All remaining sentences
    containing few-shot entities become the query set.
    """
    few = set(split.few_shot_classes)
    per_sentence: list[Counter] = []
    for sent in corpus.sentences:
        per_sentence.append(Counter(cls for cls, _, _ in entity_spans(sent) if cls in few))

    totals: Counter = Counter()
    for c in per_sentence:
        totals.update(c)
    for cls in few:
        if totals[cls] < k:
            raise ValueError(
                f"few-shot class '{cls}' has only {totals[cls]} entities; need at least {k}"
            )

    rng = np.random.default_rng([seed, 3])
    order = rng.permutation(len(corpus.sentences))
    need = {cls: k for cls in few}
    support: list[int] = []
    for sid in order:
        counts = per_sentence[sid]
        if not counts:
            continue
        if any(need[cls] > 0 for cls in counts):
            support.append(int(sid))
            for cls, n in counts.items():
                need[cls] = max(0, need[cls] - n)
        if all(v == 0 for v in need.values()):
            break
    support_set = set(support)
    query = [
        sid
        for sid in range(len(corpus.sentences))
        if sid not in support_set and per_sentence[sid]
    ]
    return Episode(tuple(sorted(support)), tuple(query), k)


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic benchmark generator."""

    predefined_classes: int = 6
    latent_classes: int = 3
    noise_types: int = 8
    vocab_per_class: int = 10
    embedding_dim: int = 32
    separation: float = 6.0  # minimum center distance, in within-cluster sigmas
    sentences: int = 180
    min_len: int = 6
    max_len: int = 11
    entity_rate: float = 0.22
    undefined_rate: float = 0.04
    noise_rate: float = 0.0  # extra explicit noise mass; the remainder is noise too
    correlation: float = 0.85  # chance an entity is followed by its partner latent token
    two_token_entity_rate: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        total = self.entity_rate + self.undefined_rate + self.noise_rate
        if total > 1.0 + 1e-12:
            raise ValueError(f"mixing rates sum to {total}, must be <= 1")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("invalid sentence length bounds")
        for name in ("predefined_classes", "latent_classes", "noise_types", "vocab_per_class"):
            if getattr(self, name) < (1 if name != "noise_types" else 0):
                raise ValueError(f"{name} must be positive")
        if self.noise_types == 0 and total < 1.0 - 1e-12:
            raise ValueError("with no noise types the mixing rates must sum to 1")


@dataclass
class SyntheticData:
    corpus: Corpus
    latent_labels: dict[tuple[int, int], str]  # every O token -> true hidden class
    embeddings: WordEmbeddings
    centers: dict[str, np.ndarray]
    word_class: dict[str, str]
    spec: SyntheticSpec


def _place_centers(names, dim, separation, rng, max_tries=10_000) -> dict[str, np.ndarray]:
    # Draw from a wide Gaussian and reject until the minimum pairwise
    # distance clears the separation floor.
    scale = max(separation, 1.0)
    centers: list[np.ndarray] = []
    for name in names:
        for attempt in range(max_tries):
            cand = rng.normal(scale=scale, size=dim)
            if all(np.linalg.norm(cand - c) >= separation for c in centers):
                centers.append(cand)
                break
        else:
            raise ValueError(
                f"could not place center for '{name}' at separation {separation} "
                f"in dimension {dim}"
            )
    return dict(zip(names, centers))


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Build a corpus with known latent structure inside the O class.

    Tags expose only the entity classes and O. Each O token's true class
    (latent undefined class `u<i>` or noise type `n<i>`) goes into the
    sidecar. Latent class `u<j>` tokens are emitted immediately after
    entities of partner classes {E<i> : i mod latent_classes == j}, at the
    configured correlation rate; standalone latent tokens and noise fill the
    rest of each sentence.
    """
    spec.validate()
    rng = np.random.default_rng([spec.seed, 4])

    pred = [f"E{i + 1}" for i in range(spec.predefined_classes)]
    latent = [f"u{i + 1}" for i in range(spec.latent_classes)]
    noise = [f"n{i + 1}" for i in range(spec.noise_types)]
    all_classes = pred + latent + noise

    centers = _place_centers(all_classes, spec.embedding_dim, spec.separation, rng)

    tokens: list[str] = []
    vectors: list[np.ndarray] = []
    word_class: dict[str, str] = {}
    class_words: dict[str, list[str]] = {}
    for cls in all_classes:
        words = [f"{cls.lower()}w{t:02d}" for t in range(spec.vocab_per_class)]
        class_words[cls] = words
        for w in words:
            tokens.append(w)
            vectors.append(centers[cls] + rng.normal(size=spec.embedding_dim))
            word_class[w] = cls

    raw = np.stack(vectors)
    # Rescale so embedding components have unit variance; relative geometry
    # (separation measured in within-cluster sigmas) is unchanged.
    scale = raw.std()
    table_real = raw / scale
    centers = {cls: centers[cls] / scale for cls in all_classes}

    rng_specials = np.random.default_rng([spec.seed, 2])
    specials = rng_specials.uniform(-0.1, 0.1, size=(2, spec.embedding_dim))
    embeddings = WordEmbeddings(
        vocab=Vocabulary.from_tokens(tokens), table=np.vstack([specials, table_real])
    )

    def pick(cls: str) -> str:
        return class_words[cls][rng.integers(len(class_words[cls]))]

    partner = {pred[i]: latent[i % spec.latent_classes] for i in range(len(pred))}

    sentences: list[Sentence] = []
    latent_labels: dict[tuple[int, int], str] = {}
    for sid in range(spec.sentences):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        toks: list[str] = []
        tags: list[str] = []
        hidden: list[str | None] = []
        while len(toks) < length:
            u = rng.random()
            if u < spec.entity_rate:
                cls = pred[rng.integers(len(pred))]
                span = 2 if rng.random() < spec.two_token_entity_rate else 1
                toks.append(pick(cls))
                tags.append(f"B-{cls}")
                hidden.append(None)
                if span == 2 and len(toks) < length:
                    toks.append(pick(cls))
                    tags.append(f"I-{cls}")
                    hidden.append(None)
                if rng.random() < spec.correlation and len(toks) < length:
                    lat = partner[cls]
                    toks.append(pick(lat))
                    tags.append(O_TAG)
                    hidden.append(lat)
            elif u < spec.entity_rate + spec.undefined_rate:
                lat = latent[rng.integers(len(latent))]
                toks.append(pick(lat))
                tags.append(O_TAG)
                hidden.append(lat)
            else:
                typ = noise[rng.integers(len(noise))]
                toks.append(pick(typ))
                tags.append(O_TAG)
                hidden.append(typ)
        sentences.append(Sentence(tuple(toks), tuple(tags)))
        for tid, h in enumerate(hidden):
            if h is not None:
                latent_labels[(sid, tid)] = h

    return SyntheticData(
        corpus=Corpus(sentences=sentences),
        latent_labels=latent_labels,
        embeddings=embeddings,
        centers=centers,
        word_class=word_class,
        spec=spec,
    )
