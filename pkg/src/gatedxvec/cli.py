"""Command-line entry point: ``gatedxvec <command> [options]``.

Every option can also be given in a ``key = value`` file passed with
``--config``; command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import selftest
from .config import ConfigError, RunConfig, load_run_config
from .data import (FeatureArchive, FeatureFormatError, TrialFormatError, cmvn,
                   generate_synthetic, holdout_split, read_features,
                   read_trials, write_features, write_trials)
from .evalkit import (ScoreFormatError, TrialMismatchError, attach_labels,
                      evaluate, fuse_scores, lda_project, read_scores,
                      score_trials, write_det_csv, write_scores)
from .network import (SYSTEMS, CheckpointError, SpecError, build_network,
                      extract_embedding, load_checkpoint, save_checkpoint)
from .trainer import TrainingDiverged, train

log = logging.getLogger("gatedxvec")


class CommandError(Exception):
    pass


def _need(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if not getattr(cfg, name):
            raise CommandError(f"missing required option --{name.replace('_', '-')}")


def _existing(path: str, what: str) -> str:
    if not Path(path).is_file():
        raise CommandError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> None:
    _need(cfg, "out")
    archive = generate_synthetic(cfg.synth_spec())
    if cfg.holdout:
        _need(cfg, "eval_out", "trials_out")
        try:
            archive, held, trials = holdout_split(archive, cfg.holdout, cfg.enroll)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        write_features(held, cfg.eval_out)
        write_trials(trials, cfg.trials_out)
        log.info("wrote %d held-out utterances and %d trials", len(held), len(trials))
    write_features(archive, cfg.out)
    print(f"wrote {len(archive)} utterances to {cfg.out}")


def _split_validation(archive: FeatureArchive, per_speaker: int, seed: int):
    rng = np.random.default_rng([seed, 2])
    by_spk: dict[str, list[str]] = {}
    for utt in archive:
        by_spk.setdefault(archive[utt].speaker, []).append(utt)
    valid = []
    for spk in sorted(by_spk):
        ids = by_spk[spk]
        if len(ids) <= per_speaker:
            raise CommandError(f"speaker {spk} has {len(ids)} utterances; cannot hold {per_speaker} for validation")
        pick = rng.choice(len(ids), size=per_speaker, replace=False)
        valid += [ids[i] for i in sorted(pick)]
    chosen = set(valid)
    return archive.subset([u for u in archive if u not in chosen]), archive.subset(valid)


def cmd_train(cfg: RunConfig) -> None:
    _need(cfg, "data", "out")
    archive = read_features(_existing(cfg.data, "training data"))
    if cfg.valid:
        train_set, valid_set = archive, read_features(_existing(cfg.valid, "validation data"))
    else:
        train_set, valid_set = _split_validation(archive, cfg.valid_per_speaker, cfg.seed)
    if cfg.cmvn:
        train_set, valid_set = train_set.map_features(cmvn), valid_set.map_features(cmvn)
    spec = cfg.network_spec(len(train_set.speakers()), archive.feat_dim)
    spec.input_cmvn = cfg.cmvn
    model = build_network(spec, cfg.seed)
    model, history = train(model, train_set, valid_set, cfg.train_config())
    save_checkpoint(model, cfg.out)
    if cfg.report_dir:
        from .plotting import plot_history
        out = Path(cfg.report_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.txt").write_text(history.to_text())
        plot_history(history, out / "training.png")
    print(f"trained {cfg.system} for {len(history.lr)} epochs; best epoch {history.best_epoch} "
          f"valid_loss={history.valid_loss[history.best_epoch - 1]:.6f}; checkpoint {cfg.out}")


def cmd_extract(cfg: RunConfig) -> None:
    _need(cfg, "checkpoint", "features", "out")
    model = load_checkpoint(_existing(cfg.checkpoint, "checkpoint"))
    archive = read_features(_existing(cfg.features, "features"))
    out = FeatureArchive()
    for utt in archive:
        feats = archive[utt].features
        if model.spec.input_cmvn:
            feats = cmvn(feats)
        out.add(utt, extract_embedding(model, feats)[None, :], archive[utt].speaker)
    write_features(out, cfg.out)
    print(f"wrote {len(out)} embeddings of dim {model.spec.embedding_dim} to {cfg.out}")


def _embedding_table(path: str) -> tuple[dict[str, np.ndarray], list[str]]:
    archive = read_features(_existing(path, "embeddings"))
    table = {u: archive[u].features[0] for u in archive}
    return table, [archive[u].speaker for u in archive]


def cmd_score(cfg: RunConfig) -> None:
    _need(cfg, "embeddings", "trials", "out")
    emb, _ = _embedding_table(cfg.embeddings)
    trials = read_trials(_existing(cfg.trials, "trial list"))
    mean = proj = None
    if cfg.train_embeddings:
        train_emb, speakers = _embedding_table(cfg.train_embeddings)
        x = np.stack(list(train_emb.values()))
        mean = x.mean(axis=0)
        if cfg.backend == "lda":
            dim = cfg.lda_dim or min(x.shape[1], len(set(speakers)) - 1)
            proj = lda_project(x - mean, speakers, dim)
    elif cfg.backend == "lda":
        raise CommandError("the lda backend needs --train-embeddings")
    try:
        scores = score_trials(emb, trials, mean, proj)
    except KeyError as exc:
        raise CommandError(str(exc.args[0])) from None
    write_scores(scores, cfg.out)
    print(f"wrote {len(scores.trials)} scores to {cfg.out}")


def cmd_eval(cfg: RunConfig) -> None:
    _need(cfg, "scores", "trials")
    scores = attach_labels(read_scores(_existing(cfg.scores, "scores")),
                           read_trials(_existing(cfg.trials, "trial list")))
    report = evaluate(scores, cfg.dcf_points())
    print(report.summary_line())
    if cfg.report_dir:
        from .plotting import plot_det
        out = Path(cfg.report_dir)
        out.mkdir(parents=True, exist_ok=True)
        name = Path(cfg.scores).stem
        text = report.table(name) + "\n\n" + report.key_values() + "\n"
        (out / f"{name}.report.txt").write_text(text)
        write_det_csv(report, out / f"{name}.det.csv")
        plot_det({name: report.det}, out / f"{name}.det.png", {name: report.eer})


def cmd_fuse(cfg: RunConfig, score_files: list[str], weights: list[float] | None) -> None:
    _need(cfg, "out")
    if len(score_files) < 2:
        raise CommandError("fuse needs at least two score files")
    weights = weights or [1.0] * len(score_files)
    sets = [read_scores(_existing(p, "scores")) for p in score_files]
    fused = fuse_scores(sets, weights)
    write_scores(fused, cfg.out)
    print(f"fused {len(sets)} score sets over {len(fused.trials)} trials into {cfg.out}")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _opt(p, name: str, type=str, help=None, **kw):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=type, default=None, help=help, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatedxvec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value file; flags override it")
        return p

    p = command("synth", "generate a synthetic speaker archive")
    for name, t in [("speakers", int), ("utts", int), ("frames", str), ("dim", int), ("spread", float),
                    ("noise", float), ("correlation", float), ("seed", int), ("holdout", int),
                    ("enroll", int), ("out", str), ("eval_out", str), ("trials_out", str)]:
        _opt(p, name, t)

    p = command("train", "train a speaker-embedding network")
    _opt(p, "system", str, help=f"one of {', '.join(SYSTEMS)}")
    for name, t in [("frame_width", int), ("last_width", int), ("segment_width", int),
                    ("attention_dim", int), ("kernel_widths", str), ("dilations", str), ("dropout", float),
                    ("embedding_tap", str), ("lr", float), ("epochs", int), ("batch_size", int),
                    ("chunk_frames", int), ("chunks_per_epoch", int), ("weight_decay", float),
                    ("lr_decay", float), ("patience", int), ("min_lr", float), ("valid_per_speaker", int),
                    ("seed", int), ("data", str), ("valid", str), ("out", str), ("report_dir", str)]:
        _opt(p, name, t)
    p.add_argument("--cmvn", dest="cmvn", action="store_const", const=True, default=None,
                   help="normalise each utterance's features before training and extraction")

    p = command("extract", "extract embeddings with a trained checkpoint")
    for name in ("checkpoint", "features", "out"):
        _opt(p, name)

    p = command("score", "cosine-score a trial list")
    for name, t in [("embeddings", str), ("trials", str), ("out", str), ("train_embeddings", str),
                    ("backend", str), ("lda_dim", int)]:
        _opt(p, name, t)

    p = command("eval", "EER and minDCF of a score file")
    for name, t in [("scores", str), ("trials", str), ("p_target", str), ("c_miss", float),
                    ("c_fa", float), ("report_dir", str)]:
        _opt(p, name, t)

    p = command("fuse", "weighted mean of several score files")
    p.add_argument("score_files", nargs="+")
    p.add_argument("--weights", nargs="+", type=float)
    _opt(p, "out")

    p = command("selftest", "run the built-in verification checks")
    p.add_argument("--quick", action="store_true")
    return parser


_NON_CONFIG = {"command", "config", "verbose", "score_files", "weights", "quick"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        if args.command == "selftest":
            return 0 if selftest.run(quick=args.quick) else 1
        overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
        cfg = load_run_config(args.config, overrides)
        if args.command == "fuse":
            cmd_fuse(cfg, args.score_files, args.weights)
        else:
            {"synth": cmd_synth, "train": cmd_train, "extract": cmd_extract,
             "score": cmd_score, "eval": cmd_eval}[args.command](cfg)
    except (CommandError, ConfigError, SpecError, CheckpointError, FeatureFormatError, TrialFormatError,
            ScoreFormatError, TrialMismatchError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
