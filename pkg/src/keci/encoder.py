"""Token embedding and span representation.

The token-level encoder is a trainable embedding lookup (optionally with
fixed sinusoidal position encoding). Span representations concatenate the
boundary token vectors, an attention-weighted sum over the span's tokens,
and a learned span-length feature, then pass through a one-hidden-layer
feedforward network with ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor
from .corpus import Document, Span, tokenize
from .errors import ContractError, FormatError

UNK_TOKEN = "<unk>"


@dataclass
class EmbeddingProvider:
    """Token -> row-index mapping over a trainable (or frozen) table."""

    vocab: dict[str, int]
    dim: int
    trainable: bool = True
    pretrained: np.ndarray | None = None  # initial table values, row-aligned with vocab

    @classmethod
    def build(cls, docs: list[Document], dim: int, min_count: int = 1) -> "EmbeddingProvider":
        """Vocabulary from training documents; tokens rarer than min_count
        fall back to the UNK row."""
        counts: dict[str, int] = {}
        for doc in docs:
            for tok in doc.tokens:
                counts[tok.text] = counts.get(tok.text, 0) + 1
        kept = sorted(t for t, c in counts.items() if c >= min_count)
        vocab = {UNK_TOKEN: 0}
        for t in kept:
            vocab[t] = len(vocab)
        return cls(vocab=vocab, dim=dim)

    @classmethod
    def from_text_file(cls, path, trainable: bool = False) -> "EmbeddingProvider":
        """Load the text embedding format: a "<vocab_size> <dim>" header line,
        then one "<token> <f1> ... <fdim>" line per token."""
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise FormatError(f"embedding file {path}: empty file")
        header = lines[0].split()
        if len(header) != 2:
            raise FormatError(f"embedding file {path}: header must be '<vocab_size> <dim>'")
        try:
            n, dim = int(header[0]), int(header[1])
        except ValueError as e:
            raise FormatError(f"embedding file {path}: bad header: {e}") from e
        vocab = {UNK_TOKEN: 0}
        rows = [np.zeros(dim)]
        for line_no, line in enumerate(lines[1 : n + 1], start=2):
            parts = line.split()
            if len(parts) != dim + 1:
                raise FormatError(f"embedding file {path}:{line_no}: expected {dim} values")
            token = parts[0]
            if token in vocab:
                raise FormatError(f"embedding file {path}:{line_no}: duplicate token {token!r}")
            vocab[token] = len(rows)
            rows.append(np.asarray([float(x) for x in parts[1:]]))
        if len(rows) != n + 1:
            raise FormatError(f"embedding file {path}: header promises {n} rows, found {len(rows) - 1}")
        return cls(vocab=vocab, dim=dim, trainable=trainable, pretrained=np.stack(rows))

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def index(self, token: str) -> int:
        return self.vocab.get(token, 0)

    def indices(self, tokens: list[str]) -> list[int]:
        return [self.index(t) for t in tokens]


def sinusoidal_positions(n: int, dim: int, dtype) -> np.ndarray:
    """Fixed transformer-style position encoding, [n x dim]."""
    pos = np.arange(n)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    out = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return out.astype(dtype)


def embed_tokens(doc: Document, provider: EmbeddingProvider, table: Tensor, position_encoding: bool = False) -> Tensor:
    """[n x d_tok] token representations: table rows, UNK for out-of-vocab."""
    ids = provider.indices(doc.token_texts())
    x = ad.gather_rows(table, ids)
    if position_encoding and ids:
        x = ad.add(x, ad.constant(sinusoidal_positions(len(ids), provider.dim, table.dtype)))
    return x


def embed_text(text: str, provider: EmbeddingProvider, table: Tensor) -> Tensor:
    """[1 x d_tok] mean of token embeddings; zeros for empty text."""
    ids = provider.indices([t.text for t in tokenize(text)])
    if not ids:
        return ad.constant(np.zeros((1, provider.dim), dtype=table.dtype))
    return ad.mean_rows(ad.gather_rows(table, ids))


def head_attention(x: Tensor, span: Span, attn_vector: Tensor) -> Tensor:
    """Attention-weighted sum of the token vectors inside a span, [1 x d_tok].

    Scores are dot products with a learned vector; weights are a softmax
    over the span's tokens.
    """
    if span.length < 1:
        raise ContractError(f"head_attention: empty span {span}")
    rows = ad.gather_rows(x, range(span.start, span.end))
    scores = ad.matmul(rows, attn_vector)  # [len x 1]
    weights = ad.softmax(scores, axis=0)
    return ad.matmul(ad.transpose(weights), rows)


def span_length_feature(span: Span, length_table: Tensor) -> Tensor:
    """Learned embedding row for the span length, [1 x d_len]."""
    max_len = length_table.shape[0]
    if not (1 <= span.length <= max_len):
        raise ContractError(f"span length {span.length} outside [1, {max_len}]")
    return ad.gather_rows(length_table, [span.length - 1])


def encode_spans(x: Tensor, spans: list[Span], params: ParameterStore) -> Tensor:
    """[m x d] span representations.

    Per span: concat(boundary-start vector, boundary-end vector (last token
    inside the span), attention-weighted sum, length feature), then a
    one-hidden-layer ReLU feedforward network.
    """
    if not spans:
        d = params["encoder.span_ffnn.w1"].shape[1]
        return ad.constant(np.zeros((0, d), dtype=params.dtype))
    attn_vector = params["encoder.span_attn"]
    length_table = params["encoder.span_length"]
    rows = []
    for span in spans:
        x_start = ad.gather_rows(x, [span.start])
        x_end = ad.gather_rows(x, [span.end - 1])
        x_hat = head_attention(x, span, attn_vector)
        phi = span_length_feature(span, length_table)
        rows.append(ad.concat([x_start, x_end, x_hat, phi], axis=1))
    stacked = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    hidden = ad.relu(ad.linear(stacked, params["encoder.span_ffnn.w0"], params["encoder.span_ffnn.b0"]))
    return ad.linear(hidden, params["encoder.span_ffnn.w1"], params["encoder.span_ffnn.b1"])
