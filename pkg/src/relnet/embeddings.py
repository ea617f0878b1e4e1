"""Pretrained word-vector table: loading, class-name lookup, and
cosine-distance / analogy queries.

The file format is one record per line, token followed by D ASCII decimal
floats, single-space separated, UTF-8, no header.  Tokens are normalized
by lowercasing and trimming; duplicates keep the first occurrence and are
tallied.
"""

import logging
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from .errors import DegenerateVectorError, ParseError, UnknownClassError

log = logging.getLogger(__name__)

DEFAULT_DIM = 300

OOV_ERROR = "error"
OOV_ZERO = "zero"


def normalize_token(token: str) -> str:
    return token.strip().lower()


class EmbeddingTable:
    """Immutable token -> vector map backed by one (n, dim) float64 matrix."""

    def __init__(self, dim: int, tokens: list[str], matrix: np.ndarray, duplicates: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        if matrix.shape != (len(tokens), dim):
            raise ValueError(f"matrix shape {matrix.shape} does not match {len(tokens)} tokens of dim {dim}")
        self.dim = dim
        self.tokens = list(tokens)
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        self.duplicates = duplicates
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("tokens are not unique after normalization")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return normalize_token(token) in self._index

    def get(self, token: str) -> np.ndarray:
        key = normalize_token(token)
        if key not in self._index:
            raise UnknownClassError(f"token {token!r} is not in the embedding table")
        return self.matrix[self._index[key]]


def _line_iter(source) -> Iterable[str]:
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            yield from fh
    else:
        yield from source


def load_embeddings(source: str | Path | TextIO | Iterable[str],
                    expected_dim: int = DEFAULT_DIM) -> EmbeddingTable:
    """Parse a vector file; every line must carry exactly expected_dim floats."""
    if expected_dim < 1:
        raise ValueError("expected_dim must be positive")
    tokens: list[str] = []
    rows: list[np.ndarray] = []
    seen: dict[str, int] = {}
    duplicates = 0
    for lineno, line in enumerate(_line_iter(source), start=1):
        line = line.rstrip("\n")
        if line == "":
            raise ParseError(f"line {lineno}: empty line")
        fields = line.split(" ")
        token = normalize_token(fields[0])
        if token == "":
            raise ParseError(f"line {lineno}: missing token")
        values = fields[1:]
        if len(values) != expected_dim:
            raise ParseError(
                f"line {lineno}: expected {expected_dim} floats, found {len(values)}"
            )
        try:
            vec = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from exc
        if not np.all(np.isfinite(vec)):
            raise ParseError(f"line {lineno}: non-finite component")
        if token in seen:
            duplicates += 1
            continue
        seen[token] = len(tokens)
        tokens.append(token)
        rows.append(vec)
    if not tokens:
        raise ParseError("empty embedding source")
    if duplicates:
        log.warning("ignored %d duplicate token(s) while loading embeddings", duplicates)
    return EmbeddingTable(expected_dim, tokens, np.vstack(rows), duplicates)


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    """Write the table back in the load format; floats round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for token, row in zip(table.tokens, table.matrix):
            fh.write(token + " " + " ".join(repr(float(v)) for v in row) + "\n")


def lookup_class_vector(table: EmbeddingTable, class_name: str,
                        oov_policy: str = OOV_ERROR) -> np.ndarray:
    """Resolve a class name to a vector.

    Multi-token names average their constituents componentwise so norms
    stay comparable across classes.  Under the "zero" policy a missing
    constituent contributes a zero vector; under "error" it raises.
    """
    if oov_policy not in (OOV_ERROR, OOV_ZERO):
        raise ValueError(f"unknown oov policy {oov_policy!r}")
    parts = [p for p in normalize_token(class_name).split() if p]
    if not parts:
        raise UnknownClassError("class name is empty")
    if len(parts) == 1 and parts[0] in table:
        return table.get(parts[0])
    acc = np.zeros(table.dim)
    for part in parts:
        if part in table:
            acc += table.get(part)
        elif oov_policy == OOV_ERROR:
            raise UnknownClassError(
                f"class {class_name!r}: token {part!r} is not in the embedding table"
            )
    return acc / len(parts)


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cosine similarity; 0 for parallel vectors, up to 2 for opposite."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine distance undefined for zero-norm vectors")
    return float(1.0 - np.dot(u, v) / (nu * nv))


def analogy(table: EmbeddingTable, a: str, b: str, c: str, k: int) -> list[tuple[str, float]]:
    """k tokens nearest to vec(b) - vec(a) + vec(c), excluding a, b and c.

    Results are sorted by ascending cosine distance, ties broken by token.
    """
    if k < 1:
        raise ValueError("k must be positive")
    for name in (a, b, c):
        if name not in table:
            raise UnknownClassError(f"token {name!r} is not in the embedding table")
    query = table.get(b) - table.get(a) + table.get(c)
    qn = np.linalg.norm(query)
    if qn == 0.0:
        raise DegenerateVectorError("analogy query vector has zero norm")
    exclude = {normalize_token(t) for t in (a, b, c)}
    norms = np.linalg.norm(table.matrix, axis=1)
    usable = norms > 0.0
    sims = np.zeros(len(table))
    sims[usable] = table.matrix[usable] @ query / (norms[usable] * qn)
    dists = 1.0 - sims
    ranked = sorted(
        (float(dists[i]), tok)
        for i, tok in enumerate(table.tokens)
        if usable[i] and tok not in exclude
    )
    return [(tok, dist) for dist, tok in ranked[:k]]
