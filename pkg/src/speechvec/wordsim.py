"""Word-similarity evaluation against human-rated benchmark pairs.

Each benchmark is a list of (word, word, human score) rows. A vector
table is scored by ranking pairs with cosine similarity and reporting
Spearman's rank correlation against the human ranking. Pairs with a
missing word (or a zero vector) are excluded and counted as not found,
so coverage and quality are reported side by side.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientDataError, ParseError, ValidationError
from .vectors import WordVectorTable

logger = logging.getLogger(__name__)

# The thirteen standard benchmarks in their customary order, with the
# pair counts the distributed files are expected to carry.
CANONICAL_BENCHMARKS = (
    ("WS-353", 353),
    ("WS-353-REL", 252),
    ("WS-353-SIM", 203),
    ("MC-30", 30),
    ("RG-65", 65),
    ("Rare-Word", 2034),
    ("MEN", 3000),
    ("MTurk-287", 287),
    ("MTurk-771", 771),
    ("YP-130", 130),
    ("SimLex-999", 999),
    ("Verb-143", 144),
    ("SimVerb-3500", 3500),
)


@dataclass
class BenchmarkPair:
    word_a: str
    word_b: str
    human_score: float


@dataclass
class EvalResult:
    dataset_name: str
    num_pairs: int
    num_not_found: int
    rho: float


def load_benchmark(stream) -> list:
    """Parse `word1 word2 score` lines (whitespace-separated, `#` comments)."""
    pairs = []
    for line_number, line in enumerate(stream, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        fields = text.split()
        if len(fields) != 3:
            raise ParseError(f"expected `word1 word2 score`, got {len(fields)} fields",
                             line_number)
        try:
            score = float(fields[2])
        except ValueError:
            raise ParseError(f"non-numeric score {fields[2]!r}", line_number)
        pairs.append(BenchmarkPair(fields[0].lower(), fields[1].lower(), score))
    return pairs


def cosine_similarity(u, v) -> float:
    """u.v / (|u||v|), in [-1, 1]; zero vectors have no defined direction."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValidationError(f"dimension mismatch {u.shape} vs {v.shape}")
    norm_u, norm_v = np.linalg.norm(u), np.linalg.norm(v)
    if norm_u == 0.0 or norm_v == 0.0:
        raise ValidationError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (norm_u * norm_v), -1.0, 1.0))


def average_ranks(values) -> np.ndarray:
    """Fractional ranks starting at 1; tied values share the mean position."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    start = 0
    while start < values.size:
        stop = start
        while stop + 1 < values.size and values[order[stop + 1]] == values[order[start]]:
            stop += 1
        ranks[order[start : stop + 1]] = (start + stop) / 2.0 + 1.0
        start = stop + 1
    return ranks


def spearman_rho(a, b) -> float:
    """Pearson correlation of average ranks; undefined for constant lists."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("spearman_rho needs two equal-length 1-D lists")
    if a.size < 2:
        raise InsufficientDataError("need at least two observations")
    rank_a = average_ranks(a)
    rank_b = average_ranks(b)
    centered_a = rank_a - rank_a.mean()
    centered_b = rank_b - rank_b.mean()
    denom = np.sqrt((centered_a**2).sum() * (centered_b**2).sum())
    if denom == 0.0:
        raise ValidationError("rank correlation undefined: a list is constant")
    return float(np.clip((centered_a * centered_b).sum() / denom, -1.0, 1.0))


def evaluate(table: WordVectorTable, pairs, dataset_name: str = "") -> EvalResult:
    """Score a table on one benchmark; unfindable pairs are counted, not scored."""
    if not pairs:
        raise ValidationError(f"{dataset_name or 'benchmark'} has no pairs")
    similarities, human = [], []
    not_found = 0
    for pair in pairs:
        vec_a = table.get(pair.word_a)
        vec_b = table.get(pair.word_b)
        if vec_a is None or vec_b is None:
            not_found += 1
            continue
        try:
            similarities.append(cosine_similarity(vec_a, vec_b))
        except ValidationError:
            not_found += 1
            continue
        human.append(pair.human_score)
    if len(similarities) < 2:
        raise InsufficientDataError(
            f"{dataset_name or 'benchmark'}: only {len(similarities)} of "
            f"{len(pairs)} pairs could be evaluated"
        )
    return EvalResult(
        dataset_name=dataset_name,
        num_pairs=len(pairs),
        num_not_found=not_found,
        rho=spearman_rho(similarities, human),
    )


def load_eval_manifest(path) -> list:
    """Read `name<TAB>path<TAB>expected_pairs` rows for a benchmark suite."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split("\t")
            if len(fields) != 3:
                raise ParseError(f"expected `name<TAB>path<TAB>pairs`, got {len(fields)} fields",
                                 line_number)
            try:
                expected = int(fields[2])
            except ValueError:
                raise ParseError(f"non-integer pair count {fields[2]!r}", line_number)
            rows.append((fields[0], fields[1], expected))
    return rows


def check_expected_pairs(name: str, pairs, expected: int) -> None:
    """Dataset revisions drift; a count mismatch warns instead of failing."""
    if expected and len(pairs) != expected:
        logger.warning("%s: expected %d pairs, file has %d", name, expected, len(pairs))


REPORT_COLUMNS = ("No.", "Dataset", "#(word pairs)", "#(not found)", "rho")


def report_rows(results) -> list:
    return [
        (str(i), r.dataset_name, str(r.num_pairs), str(r.num_not_found), f"{r.rho:.4f}")
        for i, r in enumerate(results, start=1)
    ]


def report_tsv(results) -> str:
    lines = ["\t".join(REPORT_COLUMNS)]
    lines += ["\t".join(row) for row in report_rows(results)]
    return "\n".join(lines) + "\n"


def report_text(results) -> str:
    """Aligned plain-text rendering of the evaluation table."""
    rows = [REPORT_COLUMNS, *report_rows(results)]
    widths = [max(len(row[col]) for row in rows) for col in range(len(REPORT_COLUMNS))]
    rendered = []
    for row in rows:
        cells = [text.ljust(widths[i]) if i == 1 else text.rjust(widths[i])
                 for i, text in enumerate(row)]
        rendered.append("  ".join(cells).rstrip())
    return "\n".join(rendered) + "\n"
