"""Corpus assembly: forced-alignment boundaries to skip-gram training examples.

Word boundaries arrive as a TSV of (utterance, word, start, end) rows.
Each utterance's feature matrix is sliced into per-word segments, features
are z-normalized globally, and every segment becomes the center of one
skip-gram example whose targets are its in-utterance neighbors within a
window of k. Context windows never cross utterance boundaries.
"""

import logging
import string
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
LONG_SEGMENT_FRAMES = 100  # ~1 s at a 10 ms hop; flagged, never truncated

MANIFEST_COLUMNS = ("utterance_id", "segment_index", "word", "start_frame", "end_frame")


@dataclass
class AlignmentEntry:
    """One aligned word: half-open time interval [start, end) in seconds."""

    utterance_id: str
    word: str
    start: float
    end: float


@dataclass
class WordSegment:
    """A word's feature slice plus its position within the utterance."""

    utterance_id: str
    index_in_utterance: int
    word: str
    features: np.ndarray
    start_frame: int
    end_frame: int


@dataclass
class SkipGramExample:
    """A center segment and its neighbor targets as (signed offset, segment)."""

    center: WordSegment
    targets: list  # of (offset, WordSegment), offsets in [-k,-1] U [1,k]


@dataclass
class NormalizationStats:
    """Per-coefficient mean and population std over all training frames."""

    mean: np.ndarray
    std: np.ndarray


def clean_word(raw: str) -> str:
    """Lowercase and strip surrounding punctuation; interior characters stay."""
    return raw.strip().strip(string.punctuation).lower()


def load_alignments(stream) -> dict:
    """Parse alignment TSV lines into entries grouped by utterance.

    Lines are `utterance_id<TAB>word<TAB>start<TAB>end`; `#` starts a
    comment. Groups keep first-seen utterance order; entries within a
    group are sorted by start time and must not overlap.
    """
    groups: dict[str, list[AlignmentEntry]] = {}
    for line_number, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        fields = text.split("\t")
        if len(fields) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", line_number)
        utterance_id, raw_word, raw_start, raw_end = fields
        try:
            start, end = float(raw_start), float(raw_end)
        except ValueError:
            raise ParseError(f"non-numeric time in {raw_start!r}/{raw_end!r}", line_number)
        if end <= start:
            raise ValidationError(f"line {line_number}: end {end} <= start {start}")
        word = clean_word(raw_word)
        if not word:
            raise ValidationError(f"line {line_number}: empty word label after trimming")
        groups.setdefault(utterance_id, []).append(
            AlignmentEntry(utterance_id, word, start, end)
        )

    for utterance_id, entries in groups.items():
        entries.sort(key=lambda e: e.start)
        for prev, cur in zip(entries, entries[1:]):
            if cur.start < prev.end:
                raise ValidationError(
                    f"utterance {utterance_id}: words {prev.word!r} and {cur.word!r} overlap"
                )
    return groups


def excise_segments(utterance_features: np.ndarray, entries, hop: float) -> list:
    """Slice an utterance's features into per-word segments.

    Boundary times map to frames by round-to-nearest against the hop;
    ranges are clamped to the utterance. Empty slices are dropped (with a
    warning count); surviving segments are re-indexed consecutively from 0.
    """
    total = utterance_features.shape[0]
    segments = []
    dropped = 0
    for entry in entries:
        start_frame = min(max(int(round(entry.start / hop)), 0), total)
        end_frame = min(max(int(round(entry.end / hop)), 0), total)
        if end_frame <= start_frame:
            dropped += 1
            continue
        segments.append(
            WordSegment(
                utterance_id=entry.utterance_id,
                index_in_utterance=len(segments),
                word=clean_word(entry.word),
                features=utterance_features[start_frame:end_frame],
                start_frame=start_frame,
                end_frame=end_frame,
            )
        )
    if not segments:
        raise ValidationError("all word slices are empty for this utterance")
    if dropped:
        logger.warning("dropped %d empty word slices", dropped)
    long_count = sum(1 for s in segments if s.features.shape[0] > LONG_SEGMENT_FRAMES)
    if long_count:
        logger.warning("%d segments exceed %d frames", long_count, LONG_SEGMENT_FRAMES)
    return segments


def compute_normalization(segments) -> NormalizationStats:
    """Per-coefficient mean/std over every frame of every segment."""
    matrices = [np.asarray(s.features, dtype=np.float64) for s in segments]
    if not matrices or sum(m.shape[0] for m in matrices) == 0:
        raise ValidationError("cannot normalize an empty corpus")
    stacked = np.concatenate(matrices, axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), STD_FLOOR)
    return NormalizationStats(mean=mean, std=std)


def apply_normalization(features: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - stats.mean) / stats.std


def normalize_segments(segments, stats: NormalizationStats) -> list:
    """Copy segments with z-normalized features."""
    return [
        WordSegment(
            utterance_id=s.utterance_id,
            index_in_utterance=s.index_in_utterance,
            word=s.word,
            features=apply_normalization(s.features, stats),
            start_frame=s.start_frame,
            end_frame=s.end_frame,
        )
        for s in segments
    ]


def build_skipgram_examples(segments_by_utterance: dict, k: int) -> list:
    """One example per segment with at least one in-utterance neighbor within k."""
    if k < 1:
        raise ValidationError("window k must be >= 1")
    examples = []
    singletons = 0
    for segments in segments_by_utterance.values():
        ordered = sorted(segments, key=lambda s: s.index_in_utterance)
        count = len(ordered)
        for n, center in enumerate(ordered):
            targets = [
                (offset, ordered[n + offset])
                for offset in range(-k, k + 1)
                if offset != 0 and 0 <= n + offset < count
            ]
            if targets:
                examples.append(SkipGramExample(center=center, targets=targets))
            else:
                singletons += 1
    if singletons:
        logger.info("%d single-word utterances yielded no examples", singletons)
    return examples


def write_manifest(path, segments) -> None:
    """Write segment rows as TSV with a commented header line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#" + "\t".join(MANIFEST_COLUMNS) + "\n")
        for s in segments:
            fh.write(
                f"{s.utterance_id}\t{s.index_in_utterance}\t{s.word}"
                f"\t{s.start_frame}\t{s.end_frame}\n"
            )


def read_manifest(path) -> list:
    """Read manifest rows as (utterance_id, index, word, start_frame, end_frame)."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split("\t")
            if len(fields) != 5:
                raise ParseError(f"expected 5 fields, got {len(fields)}", line_number)
            try:
                row = (fields[0], int(fields[1]), fields[2], int(fields[3]), int(fields[4]))
            except ValueError:
                raise ParseError("non-integer frame index", line_number)
            rows.append(row)
    return rows


def segments_from_manifest(rows, features_by_utterance: dict) -> dict:
    """Rebuild per-utterance WordSegments by slicing cached feature matrices."""
    grouped: dict[str, list[WordSegment]] = {}
    for utterance_id, index, word, start_frame, end_frame in rows:
        if utterance_id not in features_by_utterance:
            raise ValidationError(f"manifest references unknown utterance {utterance_id!r}")
        features = features_by_utterance[utterance_id]
        total = features.shape[0]
        if not 0 <= start_frame < end_frame <= total:
            raise ValidationError(
                f"utterance {utterance_id!r} segment {index}: frames "
                f"[{start_frame}, {end_frame}) outside cache of {total} frames"
            )
        grouped.setdefault(utterance_id, []).append(
            WordSegment(
                utterance_id=utterance_id,
                index_in_utterance=index,
                word=word,
                features=features[start_frame:end_frame],
                start_frame=start_frame,
                end_frame=end_frame,
            )
        )
    for utterance_id, segments in grouped.items():
        segments.sort(key=lambda s: s.index_in_utterance)
        if [s.index_in_utterance for s in segments] != list(range(len(segments))):
            raise ValidationError(
                f"utterance {utterance_id!r}: segment indices are not consecutive from 0"
            )
    return grouped
