"""Windowed token encoder: maps a token in sentence context to a trainable vector.

The encoder reads the embeddings of the tokens inside a fixed radius around
the queried position, mixes them through one hidden affine layer with a tanh
nonlinearity, and applies an output affine layer. A residual projection of
the queried token's own embedding (identity-initialized) is added to the
output: tokens must stay lexically identifiable in the output space even
where the context mixer is untrained, otherwise unannotated token clusters
wash out before the grouping stage can find them. The module is deliberately
small: the pipeline only needs a deterministic, differentiable, snapshottable
map from tokens-in-context to a vector space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grad import Tensor, add, affine, gather_rows, matmul, reshape, tanh

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1
_INIT_RANGE = 0.1


@dataclass(frozen=True)
class Vocabulary:
    """Dense 0-based token ids with reserved padding and unknown ids."""

    tokens: tuple[str, ...]  # includes the two specials at ids 0 and 1
    token_to_id: dict[str, int] = field(repr=False)

    @classmethod
    def from_tokens(cls, real_tokens) -> "Vocabulary":
        tokens = (PAD_TOKEN, UNK_TOKEN) + tuple(real_tokens)
        mapping = {tok: i for i, tok in enumerate(tokens)}
        if len(mapping) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        return cls(tokens=tokens, token_to_id=mapping)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        """Look up a token id; unknown tokens map to the reserved unknown id."""
        return self.token_to_id.get(token, UNK_ID)


@dataclass(frozen=True)
class WordEmbeddings:
    """A static embedding table aligned with a vocabulary (row i = token i)."""

    vocab: Vocabulary
    table: np.ndarray  # [|V|, d_e], float64

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def vector(self, token: str) -> np.ndarray:
        return self.table[self.vocab.id_of(token)]


def load_embeddings(path, seed: int = 0) -> WordEmbeddings:
    """Read a text embedding file: one `token v1 ... vd` line per token.

    The dimension is inferred from the first line and enforced on all lines.
    Rows for the padding and unknown specials are drawn uniformly from
    [-0.1, 0.1] using the given seed.
    """
    tokens: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split(" ")
            token, vals = parts[0], parts[1:]
            if token in seen:
                raise ValueError(f"duplicate token '{token}' on line {lineno}")
            if dim is None:
                dim = len(vals)
                if dim == 0:
                    raise ValueError(f"line {lineno}: no embedding values")
            elif len(vals) != dim:
                raise ValueError(
                    f"line {lineno}: dimension {len(vals)} does not match first-line dimension {dim}"
                )
            seen.add(token)
            tokens.append(token)
            rows.append(np.array([float(v) for v in vals], dtype=np.float64))
    if not tokens:
        raise ValueError(f"embedding file {path} is empty")
    rng = np.random.default_rng([seed, 2])
    specials = rng.uniform(-_INIT_RANGE, _INIT_RANGE, size=(2, dim))
    table = np.vstack([specials, np.stack(rows)])
    return WordEmbeddings(vocab=Vocabulary.from_tokens(tokens), table=table)


def write_embeddings(emb: WordEmbeddings, path) -> None:
    """Write the real-token rows (not the specials) in the load format."""
    with open(path, "w", encoding="utf-8") as fh:
        for idx in range(2, len(emb.vocab)):
            vals = " ".join(f"{v:.17g}" for v in emb.table[idx])
            fh.write(f"{emb.vocab.tokens[idx]} {vals}\n")


@dataclass
class EncoderState:
    """Full parameter set of the token encoder; snapshottable."""

    vocab: Vocabulary
    embedding: Tensor  # [|V|, d_e]
    window: int  # context radius in tokens
    mix_w: Tensor  # [(2w+1)*d_e, d_h]
    mix_b: Tensor  # [d_h]
    out_w: Tensor  # [d_h, d_h]
    out_b: Tensor  # [d_h]
    center_w: Tensor  # [d_e, d_h] residual lexical projection, identity at init
    nonlinearity: str = "tanh"
    frozen: bool = False

    @classmethod
    def create(
        cls,
        embeddings: WordEmbeddings,
        hidden_dim: int,
        window: int,
        seed: int,
        train_embeddings: bool = True,
    ) -> "EncoderState":
        if window < 0:
            raise ValueError(f"window radius must be non-negative, got {window}")
        rng = np.random.default_rng([seed, 1])
        d_e = embeddings.dim
        span = (2 * window + 1) * d_e
        u = lambda shape: rng.uniform(-_INIT_RANGE, _INIT_RANGE, size=shape)
        center = np.zeros((d_e, hidden_dim))
        np.fill_diagonal(center, 1.0)
        return cls(
            vocab=embeddings.vocab,
            embedding=Tensor(embeddings.table.copy(), requires_grad=train_embeddings),
            window=window,
            mix_w=Tensor(u((span, hidden_dim)), requires_grad=True),
            mix_b=Tensor(u(hidden_dim), requires_grad=True),
            out_w=Tensor(u((hidden_dim, hidden_dim)), requires_grad=True),
            out_b=Tensor(u(hidden_dim), requires_grad=True),
            center_w=Tensor(center, requires_grad=True),
        )

    @property
    def output_dim(self) -> int:
        return self.out_w.values.shape[1]

    def parameters(self) -> list[Tensor]:
        params = [self.mix_w, self.mix_b, self.out_w, self.out_b, self.center_w]
        if self.embedding.requires_grad:
            params.insert(0, self.embedding)
        return params

    def snapshot(self) -> "EncoderState":
        """Deep, immutable copy; later training never alters it."""
        return EncoderState(
            vocab=self.vocab,
            embedding=Tensor(self.embedding.values.copy()),
            window=self.window,
            mix_w=Tensor(self.mix_w.values.copy()),
            mix_b=Tensor(self.mix_b.values.copy()),
            out_w=Tensor(self.out_w.values.copy()),
            out_b=Tensor(self.out_b.values.copy()),
            center_w=Tensor(self.center_w.values.copy()),
            nonlinearity=self.nonlinearity,
            frozen=True,
        )

    def restore(self, snap: "EncoderState") -> None:
        """Copy a snapshot's parameter values back into this live state."""
        self.embedding.values[...] = snap.embedding.values
        self.mix_w.values[...] = snap.mix_w.values
        self.mix_b.values[...] = snap.mix_b.values
        self.out_w.values[...] = snap.out_w.values
        self.out_b.values[...] = snap.out_b.values
        self.center_w.values[...] = snap.center_w.values

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "embedding": self.embedding.values,
            "mix_w": self.mix_w.values,
            "mix_b": self.mix_b.values,
            "out_w": self.out_w.values,
            "out_b": self.out_b.values,
            "center_w": self.center_w.values,
        }

    def window_ids(self, tokens, index: int) -> np.ndarray:
        """Token ids of the context window around index; out-of-range is padding."""
        n = len(tokens)
        if not 0 <= index < n:
            raise IndexError(f"token index {index} out of range for sentence of length {n}")
        ids = np.full(2 * self.window + 1, PAD_ID, dtype=np.intp)
        for off in range(-self.window, self.window + 1):
            pos = index + off
            if 0 <= pos < n:
                ids[off + self.window] = self.vocab.id_of(tokens[pos])
        return ids


def encode_batch(state: EncoderState, items) -> Tensor:
    """Encode a batch of (tokens, index) pairs into a [B, d_h] tensor.

    Differentiable with respect to the encoder parameters; a pure function
    of the state and the tokens inside the context window.
    """
    if state.nonlinearity != "tanh":
        raise ValueError(f"unsupported nonlinearity tag '{state.nonlinearity}'")
    idx = np.stack([state.window_ids(tokens, index) for tokens, index in items])
    b, span = idx.shape
    d_e = state.embedding.values.shape[1]
    ctx = reshape(gather_rows(state.embedding, idx.reshape(-1)), (b, span * d_e))
    hidden = tanh(affine(ctx, state.mix_w, state.mix_b))
    mixed = affine(hidden, state.out_w, state.out_b)
    center = gather_rows(state.embedding, idx[:, state.window])
    return add(mixed, matmul(center, state.center_w))


def encode(state: EncoderState, tokens, index: int) -> Tensor:
    """Encode one queried token in its sentence; returns a [d_h] tensor."""
    out = encode_batch(state, [(tokens, index)])
    return reshape(out, (state.output_dim,))


def encode_values(state: EncoderState, items, batch_size: int = 512) -> np.ndarray:
    """Inference-mode batched encoding; returns a plain [n, d_h] array."""
    if not items:
        return np.zeros((0, state.output_dim))
    chunks = []
    for start in range(0, len(items), batch_size):
        chunks.append(encode_batch(state, items[start:start + batch_size]).values)
    return np.vstack(chunks)


def save_encoder(state: EncoderState, path) -> None:
    """Serialize an encoder to UTF-8 text; floats round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"window {state.window}\n")
        fh.write(f"nonlinearity {state.nonlinearity}\n")
        fh.write(f"train_embeddings {int(state.embedding.requires_grad)}\n")
        fh.write(f"vocab {len(state.vocab) - 2}\n")
        for tok in state.vocab.tokens[2:]:
            fh.write(tok + "\n")
        for name, arr in state.state_arrays().items():
            mat = np.atleast_2d(arr)
            fh.write(f"{name} {mat.shape[0]} {mat.shape[1]}\n")
            for row in mat:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_encoder(path) -> EncoderState:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    pos = 0

    def take() -> str:
        nonlocal pos
        line = lines[pos]
        pos += 1
        return line

    window = int(take().split()[1])
    nonlinearity = take().split()[1]
    train_embeddings = bool(int(take().split()[1]))
    n_tokens = int(take().split()[1])
    vocab = Vocabulary.from_tokens([take() for _ in range(n_tokens)])

    arrays: dict[str, np.ndarray] = {}
    for _ in range(6):
        name, rows, cols = take().split()
        mat = np.array(
            [[float(v) for v in take().split()] for _ in range(int(rows))], dtype=np.float64
        )
        arrays[name] = mat.reshape(int(rows), int(cols))
    return EncoderState(
        vocab=vocab,
        embedding=Tensor(arrays["embedding"], requires_grad=train_embeddings),
        window=window,
        mix_w=Tensor(arrays["mix_w"], requires_grad=True),
        mix_b=Tensor(arrays["mix_b"].reshape(-1), requires_grad=True),
        out_w=Tensor(arrays["out_w"], requires_grad=True),
        out_b=Tensor(arrays["out_b"].reshape(-1), requires_grad=True),
        center_w=Tensor(arrays["center_w"], requires_grad=True),
        nonlinearity=nonlinearity,
    )
