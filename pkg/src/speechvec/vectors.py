"""Word-vector tables: encode segments, average per word type, import/export.

After training only the encoder is kept. Every corpus segment is encoded
(with the stored feature normalization applied first) and the vectors of
all segments sharing a word label are averaged into one entry. Tables
round-trip through a plain text format, one `word v1 .. vd` line per
word, compatible with common pretrained-vector distributions.
"""

from dataclasses import dataclass, field

import numpy as np

from .corpus import NormalizationStats, apply_normalization
from .errors import FormatError, ValidationError
from .model import ModelParams, encode

FLOAT_FORMAT = "%.9g"  # 9 significant digits round-trip exactly through f64


@dataclass
class WordVectorTable:
    """word -> vector map with a fixed dimension and per-word counts."""

    dimension: int
    entries: dict
    counts: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, word: str):
        return self.entries.get(word)


def encode_corpus(params: ModelParams, normalization: NormalizationStats | None, segments):
    """Embed every segment: (word, vector) per segment, in input order."""
    pairs = []
    for segment in segments:
        features = segment.features
        if normalization is not None:
            features = apply_normalization(features, normalization)
        pairs.append((segment.word, encode(params, features)))
    return pairs


def average_by_word(pairs) -> WordVectorTable:
    """Arithmetic mean of the vectors of each word; reduce in sorted order."""
    grouped: dict[str, list] = {}
    for word, vector in pairs:
        grouped.setdefault(word, []).append(np.asarray(vector, dtype=np.float64))
    if not grouped:
        return WordVectorTable(dimension=0, entries={})
    dims = {vecs[0].shape[0] for vecs in grouped.values()}
    if len(dims) != 1:
        raise ValidationError(f"mixed vector dimensions {sorted(dims)}")
    entries, counts = {}, {}
    for word in sorted(grouped):
        stack = np.stack(grouped[word])
        entries[word] = stack.mean(axis=0)
        counts[word] = stack.shape[0]
    return WordVectorTable(dimension=dims.pop(), entries=entries, counts=counts)


def export_table(table: WordVectorTable, path) -> None:
    """Write `word v1 .. vd` lines in sorted word order; byte-stable."""
    with open(path, "w", encoding="utf-8") as fh:
        for word in sorted(table.entries):
            if not word or any(ch.isspace() for ch in word):
                raise ValidationError(f"word {word!r} cannot be written: whitespace delimiter")
            values = " ".join(FLOAT_FORMAT % v for v in table.entries[word])
            fh.write(f"{word} {values}\n")


def import_table(path) -> WordVectorTable:
    """Read a vector table; a `count dim` header line is accepted but optional."""
    entries: dict[str, np.ndarray] = {}
    dimension = None
    declared = None
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if line_number == 1 and len(fields) == 2:
                try:
                    declared = (int(fields[0]), int(fields[1]))
                    continue
                except ValueError:
                    pass  # a two-field first line that isn't a header
            word = fields[0].lower()
            try:
                vector = np.array(fields[1:], dtype=np.float64)
            except ValueError:
                raise FormatError(f"{path}:{line_number}: non-numeric vector component")
            if vector.size == 0:
                raise FormatError(f"{path}:{line_number}: no vector components")
            if dimension is None:
                dimension = vector.size
            elif vector.size != dimension:
                raise FormatError(
                    f"{path}:{line_number}: dimension {vector.size} != {dimension}"
                )
            if word in entries:
                raise FormatError(f"{path}:{line_number}: duplicate word {word!r}")
            entries[word] = vector
    if dimension is None:
        return WordVectorTable(dimension=0, entries={})
    if declared is not None and declared != (len(entries), dimension):
        raise FormatError(
            f"{path}: header declares {declared[0]} x {declared[1]}, "
            f"found {len(entries)} x {dimension}"
        )
    return WordVectorTable(dimension=dimension, entries=entries,
                           counts={w: 1 for w in entries})
