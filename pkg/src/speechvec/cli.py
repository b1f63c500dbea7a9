"""Command-line pipeline: features -> train -> export -> eval, plus gradcheck.

Each stage reads and writes files, so stages can be cached, inspected and
rerun independently. Exit codes: 0 on success, 1 for validation or format
problems, 2 for numerical failures.
"""

import argparse
import logging
import pathlib
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import corpus, features, vectors, wordsim
from .errors import NumericalError, SpeechvecError
from .model import (
    ModelConfig,
    finite_difference_check,
    make_probe_instance,
    skipgram_gradient,
)
from .training import (
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

GRADCHECK_THRESHOLD = 1e-6


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _clip_norm(text: str):
    if text.lower() == "none":
        return None
    return float(text)


def parse_config_file(path) -> dict:
    """Read flat `key = value` lines; `#` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            key, sep, value = text.partition("=")
            if not sep:
                raise SpeechvecError(f"{path}:{line_number}: expected `key = value`")
            values[key.strip()] = value.strip()
    return values


def _apply_config_file(subparser: argparse.ArgumentParser, values: dict) -> None:
    """Turn config-file strings into typed defaults; flags still win."""
    actions = {a.dest: a for a in subparser._get_optional_actions()}
    converted = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise SpeechvecError(f"unknown config key {key!r}")
        if action.nargs == 0 and isinstance(action.const, bool):
            if raw.lower() not in ("true", "false"):
                raise SpeechvecError(f"config key {key!r} expects true or false, got {raw!r}")
            converted[key] = raw.lower() == "true"
        elif action.type is not None:
            try:
                converted[key] = action.type(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise SpeechvecError(f"config key {key!r}: bad value {raw!r} ({exc})")
        else:
            converted[key] = raw
    subparser.set_defaults(**converted)


def _log_resolved_config(args: argparse.Namespace) -> None:
    shown = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}
    logger.info("resolved config: %s", " ".join(f"{k}={v}" for k, v in shown.items()))


def _worker_count(args) -> int:
    return 1 if getattr(args, "deterministic", False) else args.threads


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--threads", type=_positive_int, default=1,
                        help="worker thread cap (default 1)")
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-threaded, fixed-order reductions")


# --- features ----------------------------------------------------------------

def _extract_one(wav_path, cache_path, config, force):
    """Returns (T, d, status) where status is 'fresh' or 'cached'."""
    if (
        not force
        and cache_path.exists()
        and cache_path.stat().st_mtime >= wav_path.stat().st_mtime
    ):
        n_rows, n_cols = features.read_feature_cache_shape(cache_path)
        return n_rows, n_cols, "cached"
    wave = features.read_wav(wav_path)
    frames = features.extract_mfcc(wave, config)
    features.write_feature_cache(cache_path, frames)
    return frames.shape[0], frames.shape[1], "fresh"


def cmd_features(args) -> int:
    out_dir = pathlib.Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = features.MfccConfig(
        frame_length=args.frame_length,
        frame_hop=args.frame_hop,
        num_coefficients=args.num_coefficients,
        num_mel_filters=args.num_mel_filters,
        pre_emphasis=args.pre_emphasis,
        fft_size=args.fft_size,
        log_floor=args.log_floor,
    )
    config.validate()
    with open(args.alignments, encoding="utf-8") as fh:
        alignment_groups = corpus.load_alignments(fh)

    wav_paths = sorted(pathlib.Path(args.audio_dir).glob("*.wav"))
    jobs = [(path, out_dir / (path.stem + ".a2vf")) for path in wav_paths]

    results, failures = {}, []
    with ThreadPoolExecutor(max_workers=_worker_count(args)) as pool:
        futures = [(wav_path, cache_path, pool.submit(_extract_one, wav_path, cache_path,
                                                      config, args.force))
                   for wav_path, cache_path in jobs]
        for wav_path, cache_path, future in futures:
            try:
                n_rows, n_cols, status = future.result()
                results[wav_path.stem] = (n_rows, n_cols, status)
            except Exception as exc:  # keep going; report at the end
                failures.append((wav_path, exc))
                logger.error("%s: %s", wav_path, exc)

    segments = []
    for wav_path in wav_paths:
        utterance_id = wav_path.stem
        if utterance_id not in results:
            continue
        n_rows, _, _ = results[utterance_id]
        entries = alignment_groups.get(utterance_id)
        if not entries:
            logger.warning("%s: no alignment entries; cache written, no segments", utterance_id)
            continue
        placeholder = np.zeros((n_rows, 1))  # only frame ranges matter here
        try:
            segments.extend(corpus.excise_segments(placeholder, entries, hop=args.frame_hop))
        except SpeechvecError as exc:
            failures.append((wav_path, exc))
            logger.error("%s: %s", utterance_id, exc)

    manifest_path = out_dir / "manifest.tsv"
    corpus.write_manifest(manifest_path, segments)
    fresh = sum(1 for r in results.values() if r[2] == "fresh")
    logger.info(
        "%d utterances (%d fresh, %d cached), %d segments, %d failures",
        len(results), fresh, len(results) - fresh, len(segments), len(failures),
    )
    unaligned = len([u for u in alignment_groups if u not in results])
    if unaligned:
        logger.warning("%d alignment utterances had no matching WAV", unaligned)
    return 1 if failures else 0


# --- train -------------------------------------------------------------------

def _load_manifest_features(features_dir, manifest_path):
    rows = corpus.read_manifest(manifest_path)
    features_dir = pathlib.Path(features_dir)
    matrices = {}
    for utterance_id in {row[0] for row in rows}:
        cache_path = features_dir / (utterance_id + ".a2vf")
        matrices[utterance_id] = features.read_feature_cache(cache_path).astype(np.float64)
    return rows, matrices


def cmd_train(args) -> int:
    config = TrainConfig(
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        k=args.k,
        batch_size=args.batch_size,
        grad_clip_norm=args.grad_clip,
        seed=args.seed,
        precision=args.precision,
    )
    if args.faithful:
        config = config.faithful()
    config.validate()

    rows, matrices = _load_manifest_features(args.features_dir, args.manifest)
    grouped = corpus.segments_from_manifest(rows, matrices)
    all_segments = [s for group in grouped.values() for s in group]
    stats = corpus.compute_normalization(all_segments)
    normalized = {u: corpus.normalize_segments(group, stats) for u, group in grouped.items()}
    examples = corpus.build_skipgram_examples(normalized, k=config.k)
    if not examples:
        logger.error("no trainable examples: every utterance has a single segment")
        return 1
    feature_dim = all_segments[0].features.shape[1]
    model_config = ModelConfig(
        feature_dim=feature_dim,
        hidden_size=args.hidden_size,
        num_encoder_layers=args.encoder_layers,
    )
    logger.info("%d segments, %d examples, feature dim %d", len(all_segments),
                len(examples), feature_dim)

    out_path = pathlib.Path(args.out)
    log_lines = []

    def on_epoch(epoch, mean_loss, seconds, state):
        line = f"{epoch}\t{mean_loss:.9g}\t{seconds:.3f}"
        print(line, flush=True)
        log_lines.append(line)
        if args.checkpoint_every and epoch % args.checkpoint_every == 0:
            save_checkpoint(state, out_path)

    try:
        final = train(examples, config, model_config=model_config,
                      normalization=stats, on_epoch=on_epoch)
    except TrainingDivergedError as exc:
        logger.error("%s; keeping last good checkpoint (epoch %d)", exc, exc.state.epoch)
        save_checkpoint(exc.state, out_path)
        if args.log_file:
            pathlib.Path(args.log_file).write_text("\n".join(log_lines) + "\n")
        return 2
    save_checkpoint(final, out_path)
    if args.log_file:
        pathlib.Path(args.log_file).write_text("\n".join(log_lines) + "\n")
    logger.info("final mean loss %.9g after %d epochs", final.running_loss, final.epoch)
    return 0


# --- export ------------------------------------------------------------------

def cmd_export(args) -> int:
    state = load_checkpoint(args.checkpoint)
    rows, matrices = _load_manifest_features(args.features_dir, args.manifest)
    grouped = corpus.segments_from_manifest(rows, matrices)
    segments = [s for group in grouped.values() for s in group]

    workers = _worker_count(args)
    if workers == 1:
        pairs = vectors.encode_corpus(state.params, state.normalization, segments)
    else:
        chunks = [segments[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunk_pairs = list(pool.map(
                lambda chunk: vectors.encode_corpus(state.params, state.normalization, chunk),
                chunks,
            ))
        # Deterministic merge: round-robin inverse of the chunk split.
        pairs = [None] * len(segments)
        for offset, chunk in enumerate(chunk_pairs):
            pairs[offset::workers] = chunk
    table = vectors.average_by_word(pairs)
    vectors.export_table(table, args.out_vectors)
    logger.info("wrote %d word vectors of dimension %d", len(table), table.dimension)
    return 0


# --- eval --------------------------------------------------------------------

def cmd_eval(args) -> int:
    table = vectors.import_table(args.vectors)
    logger.info("loaded %d vectors of dimension %d", len(table), table.dimension)
    entries = wordsim.load_eval_manifest(args.benchmarks)

    def run_one(entry):
        name, path, expected = entry
        with open(path, encoding="utf-8") as fh:
            pairs = wordsim.load_benchmark(fh)
        wordsim.check_expected_pairs(name, pairs, expected)
        return wordsim.evaluate(table, pairs, dataset_name=name)

    results, failed = [], []
    with ThreadPoolExecutor(max_workers=_worker_count(args)) as pool:
        futures = [(entry[0], pool.submit(run_one, entry)) for entry in entries]
        for name, future in futures:  # collect in manifest order
            try:
                results.append(future.result())
            except (OSError, SpeechvecError) as exc:
                failed.append(name)
                logger.error("%s: %s", name, exc)
    sys.stdout.write(wordsim.report_text(results))
    if args.tsv:
        pathlib.Path(args.tsv).write_text(wordsim.report_tsv(results))
    return 1 if failed else 0


# --- gradcheck ---------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    worst = 0.0
    for seed in range(args.seed, args.seed + args.instances):
        params, example = make_probe_instance(seed)
        analytic = None
        if args.perturb_gradient:
            _, analytic = skipgram_gradient(params, example)
            analytic = analytic + 1e-3
        worst = max(worst, finite_difference_check(
            params, example, epsilon=args.epsilon, analytic=analytic))
    print(f"max relative error: {worst:.3e} over {args.instances} instances "
          f"(threshold {GRADCHECK_THRESHOLD:.0e})")
    if worst < GRADCHECK_THRESHOLD:
        return 0
    logger.error("gradient check failed: %.3e >= %.0e", worst, GRADCHECK_THRESHOLD)
    return 2


# --- wiring ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speechvec",
        description="Semantic word vectors from segmented speech, plus evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", help="extract MFCC caches and a segment manifest")
    p.add_argument("audio_dir")
    p.add_argument("alignments")
    p.add_argument("out_dir")
    p.add_argument("--force", action="store_true", help="recompute up-to-date caches")
    p.add_argument("--frame-length", type=float, default=0.025)
    p.add_argument("--frame-hop", type=float, default=0.010)
    p.add_argument("--num-coefficients", type=int, default=13)
    p.add_argument("--num-mel-filters", type=int, default=26)
    p.add_argument("--pre-emphasis", type=float, default=0.97)
    p.add_argument("--fft-size", type=int, default=None)
    p.add_argument("--log-floor", type=float, default=1e-10)
    _add_common(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train the encoder-decoder on a feature corpus")
    p.add_argument("features_dir")
    p.add_argument("manifest")
    p.add_argument("--out", default="model.a2vc", help="checkpoint path")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--k", type=int, default=5, help="skip-gram window")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--grad-clip", type=_clip_norm, default=5.0,
                   help="global gradient-norm clip, or `none`")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--faithful", action="store_true",
                   help="raw summed loss, no clipping")
    p.add_argument("--hidden-size", type=int, default=300)
    p.add_argument("--encoder-layers", type=int, default=3)
    p.add_argument("--checkpoint-every", type=int, default=25,
                   help="write the checkpoint every N epochs (0: only at the end)")
    p.add_argument("--log-file", default=None, help="also write the epoch log here")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="encode all segments and write averaged word vectors")
    p.add_argument("checkpoint")
    p.add_argument("features_dir")
    p.add_argument("manifest")
    p.add_argument("out_vectors")
    _add_common(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="score a vector table on similarity benchmarks")
    p.add_argument("vectors")
    p.add_argument("benchmarks", help="manifest: name<TAB>path<TAB>expected_pairs")
    p.add_argument("--tsv", default=None, help="also write machine-readable results here")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=_positive_int, default=1)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--perturb-gradient", action="store_true",
                   help="debug: corrupt the analytic gradient; the check must fail")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args, _ = parser.parse_known_args(argv)
        if getattr(args, "config", None):
            subparsers_action = next(
                a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
            )
            subparser = subparsers_action.choices[args.command]
            try:
                _apply_config_file(subparser, parse_config_file(args.config))
            except (OSError, SpeechvecError) as exc:
                logger.error("%s", exc)
                return 1
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; fold that into the validation code
        code = exc.code if isinstance(exc.code, int) else 1
        return 0 if code == 0 else 1
    _log_resolved_config(args)
    try:
        return args.func(args)
    except NumericalError as exc:
        logger.error("%s", exc)
        return 2
    except (OSError, SpeechvecError) as exc:
        logger.error("%s", exc)
        return 1


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
