"""
Command-line surface: train, decode, score, average, info, synth, extract.

Exit status is 0 on success, 1 for configuration or input problems and 2 when
training aborts on a non-finite loss.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from .audio import (
    FeatureConfig,
    SyntheticTask,
    Utterance,
    batches,
    extract_features,
    load_dataset,
    make_synthetic,
    read_audio,
    save_dataset,
)
from .checkpoint import Checkpoint
from .config import RunConfig, dump_run_config, load_run_config, validation_to_config_error
from .decode import HypothesisRecord, decode_features, write_hypotheses
from .errors import ConfigError, ContractError, DimensionError, InputError, NumericAbort
from .model import ConvTransformer, count_params
from .optim import AdaDeltaState, CheckpointSet, average_checkpoints, train
from .tensor import set_precision
from .text import Vocab, WerResult, align, corpus_wer, read_transcripts, write_transcripts

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 1, 2


def configure_logging() -> None:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("CONVASR_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _check_dataset(utts: List[Utterance], cfg: RunConfig) -> None:
    width = utts[0].features.shape[1]
    if width != cfg.model.input_dim:
        raise ConfigError(f"dataset features are {width}-D, model expects {cfg.model.input_dim}",
                          key="model.input_dim")
    shortest = min(u.features.shape[0] for u in utts)
    if shortest < cfg.model.min_frames:
        raise InputError(f"an utterance has {shortest} frames, the encoder needs at least {cfg.model.min_frames}")
    top = max((int(u.token_ids.max()) for u in utts if len(u.token_ids)), default=0)
    if top >= cfg.model.vocab_size:
        raise ConfigError(f"dataset uses token id {top}, vocab_size is {cfg.model.vocab_size}",
                          key="model.vocab_size")


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.overrides)
    set_precision(cfg.precision)
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, out / "config.yaml")
    if cfg.epochs == 0:
        logger.info("Trainer: epochs=0, nothing to do")
        return EXIT_OK
    if not cfg.data.train:
        raise ConfigError("no training data configured", key="data.train")
    utts = load_dataset(cfg.data.train)
    _check_dataset(utts, cfg)

    model = ConvTransformer(cfg.model, seed=cfg.seed)
    state = AdaDeltaState.for_model(model, cfg.optim)
    logger.info("Trainer: %d parameters, %d utterances, %d epochs", model.num_parameters(), len(utts), cfg.epochs)

    def batch_source(epoch: int):
        rng = np.random.default_rng([cfg.seed, epoch]) if cfg.data.shuffle else None
        return batches(utts, cfg.data.batch_size, rng)

    train(model, batch_source, state, cfg.epochs, out, clip=cfg.optim.clip, keep_last=cfg.keep_last or None,
          header={"features": cfg.features.model_dump(), "seed": cfg.seed})
    return EXIT_OK


def cmd_decode(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    if args.config:
        cfg = load_run_config(args.config, args.overrides)
        model = ConvTransformer(cfg.model)
        ckpt.apply_to(model)
        model.eval()
    else:
        model = ckpt.to_model()
    vocab = Vocab.from_file(args.vocab)
    records = []
    for utt in load_dataset(args.data):
        best, _ = decode_features(model, utt.features, beam=args.beam, max_len=args.max_len)
        records.append(HypothesisRecord(utt.utt_id, best.score, vocab.decode(best.tokens)))
        logger.debug("Decoder: %s -> %s", utt.utt_id, records[-1].text)
    write_hypotheses(args.out, records)
    logger.info("Decoder: wrote %d hypotheses to %s", len(records), args.out)
    return EXIT_OK


def cmd_score(args) -> int:
    """WER of each hypothesis set against one reference file, then the pooled total."""
    refs = read_transcripts(args.ref)
    overall = WerResult()
    for hyp_path in args.hyp:
        hyps = read_transcripts(hyp_path)
        missing = sorted(set(refs) - set(hyps))
        if missing:
            logger.warning("Scorer: %d utterance(s) missing from %s, scored as empty", len(missing), hyp_path)
        if args.per_utt:
            for utt, ref in refs.items():
                res = align(ref, hyps.get(utt, ""))
                print(f"{utt}\tS={res.substitutions} I={res.insertions} D={res.deletions} N={res.ref_words}")
        total = corpus_wer((ref, hyps.get(utt, "")) for utt, ref in refs.items())
        print(f"{Path(hyp_path).name}\t{total.summary()}")
        overall = overall + total
    if len(args.hyp) > 1:
        print(f"all\t{overall.summary()}")
    return EXIT_OK


def cmd_average(args) -> int:
    ckpt_set = CheckpointSet.from_directory(args.checkpoint_dir, last_n=args.last_n)
    averaged = average_checkpoints(ckpt_set)
    out = args.out or Path(args.checkpoint_dir) / "averaged.safetensors"
    averaged.save(out)
    logger.info("Averager: %d checkpoints -> %s", len(ckpt_set.checkpoints), out)
    return EXIT_OK


def cmd_info(args) -> int:
    overrides = list(args.overrides)
    if args.preset:
        overrides.append(f"preset={args.preset}")
    cfg = load_run_config(args.config, overrides)
    counts = count_params(cfg.model)
    width = max(len(name) for name in counts.components)
    for name, size in counts.components.items():
        print(f"{name:<{width}}  {size:>13,}")
    print(f"{'total':<{width}}  {counts.total:>13,}")
    return EXIT_OK


def cmd_synth(args) -> int:
    task = SyntheticTask(noise=args.noise)
    out = Path(args.out_dir)
    utts = make_synthetic(task, args.n_utts, seed=args.seed)
    save_dataset(out / "train.npz", utts)
    task.vocab().save(out / "vocab.txt")
    write_transcripts(out / "refs.txt", {u.utt_id: u.text for u in utts})
    logger.info("Synthetic: wrote %d utterances to %s", len(utts), out)
    return EXIT_OK


def cmd_extract(args) -> int:
    """Manifest lines are `utt_id<TAB>audio path<TAB>transcript`."""
    try:
        features = FeatureConfig(mel_bins=args.mel_bins, normalize=not args.no_normalize)
    except ValidationError as exc:
        raise validation_to_config_error(exc, prefix="features") from exc
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise InputError(f"manifest not found: {manifest}")
    vocab = Vocab.from_file(args.vocab) if args.vocab else None
    utts = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise InputError(f"{manifest}:{lineno}: expected utt_id<TAB>path<TAB>text")
        utt_id, audio_path, text = fields
        samples, rate = read_audio(audio_path)
        ids = vocab.encode(text)[1:-1] if vocab else []
        utts.append(Utterance(utt_id, extract_features(samples, features, rate), np.array(ids, dtype=np.int64), text))
    save_dataset(args.out, utts)
    logger.info("Extractor: wrote %d utterances to %s", len(utts), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convasr", description="Convolutional-context transformer ASR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("config")
    p.add_argument("overrides", nargs="*", help="dotted key=value overrides")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a feature dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--out", default="hyp.txt")
    p.add_argument("--config", default=None, help="build the model from this config instead of the header")
    p.add_argument("overrides", nargs="*")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="word error rate of a hypothesis file")
    p.add_argument("ref")
    p.add_argument("hyp", nargs="+")
    p.add_argument("--per-utt", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("average", help="average the newest checkpoints")
    p.add_argument("checkpoint_dir")
    p.add_argument("--last-n", type=int, default=30)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("info", help="parameter count per component")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", default=None)
    p.add_argument("overrides", nargs="*")
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("synth", help="write a synthetic dataset, vocab and references")
    p.add_argument("out_dir")
    p.add_argument("--n-utts", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="audio manifest -> feature dataset")
    p.add_argument("manifest")
    p.add_argument("out")
    p.add_argument("--vocab", default=None)
    p.add_argument("--mel-bins", type=int, default=80)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_extract)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericAbort as e:
        logger.error("Trainer: aborted: %s", e)
        return EXIT_ABORT
    except (ConfigError, InputError, DimensionError, ContractError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
