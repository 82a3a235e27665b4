"""Command-line pipeline: synth, features, train, score, eval, explain, verify.

Stages hand off through files. Exit codes: 0 success, 1 invalid usage or
input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from masd.data import (
    GRANULARITIES,
    ManifestError,
    SynthConfig,
    cached_feature_set,
    generate_synthetic,
    load_manifest,
    write_feature_cache,
)
from masd.explain import MaskParams, export_map, importance_map
from masd.features import SPECTRUM_LEN, WavFormatError, magnitude_spectrogram, read_cache, read_wav
from masd.losses import LOSS_NAMES
from masd.metrics import evaluate
from masd.pipeline import (
    fit_system_reference,
    load_system,
    masked_scorer,
    save_system,
    score_set,
    scored_entries,
    train_system,
)
from masd.score import load_reference, read_scores, save_reference, write_scores
from masd.train import TrainConfig, parse_config
from masd.verify import run_all

log = logging.getLogger("masd")


class UsageError(Exception):
    """Bad flags or unusable input paths (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _existing(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _required(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _config_text(path) -> str:
    return "" if path is None else _existing(path, "config").read_text()


def _config(cls, path, **overrides):
    try:
        return parse_config(cls, _config_text(path), **overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def cmd_synth(args) -> int:
    out = _required(args.out, "out")
    cfg = _config(SynthConfig, args.config, seed=args.seed)
    records = generate_synthetic(cfg, out)
    print(f"wrote {len(records)} clips to {out}")
    return 0


def cmd_features(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    features_dir = _required(args.features_dir, "features-dir")
    records = load_manifest(manifest)
    n = write_feature_cache(records, manifest.parent, features_dir, args.spectrum_len)
    print(f"cached features for {n} clips in {features_dir}")
    return 0


def _train_config(args) -> TrainConfig:
    return _config(
        TrainConfig,
        args.config,
        loss=args.loss,
        classes=args.classes,
        n_sub=args.subclusters,
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    features_dir = _existing(args.features_dir, "features-dir")
    model = _required(args.model, "model")
    cfg = _train_config(args)
    records = [r for r in load_manifest(manifest) if r.split == "train"]
    if not records:
        raise UsageError(f"{manifest} has no training clips")
    fs = cached_feature_set(records, features_dir, cfg.segments)
    system = train_system(fs, cfg)
    result = system.result
    extra = {
        "train_config": cfg.to_text(),
        "class_keys": result.class_keys,
        "scale": result.state.s,
    }
    save_system(model, system, extra)
    result.trace.write_csv(model.with_name(model.name + ".trace.csv"))
    if args.refs is not None:
        refs = fit_system_reference(system, fs, args.k, cfg.seed)
        save_reference(_required(args.refs, "refs"), refs)
    last = result.trace.records[-1]
    print(f"trained {cfg.loss} on {len(fs)} clips; final loss {last.loss:.6f}, intra {last.intra:.6f}")
    return 0


def cmd_score(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    features_dir = _existing(args.features_dir, "features-dir")
    system, _ = load_system(_existing(args.model, "model"))
    refs = load_reference(_existing(args.refs, "refs"))
    out = _required(args.scores, "scores")
    records = [r for r in load_manifest(manifest) if r.split == "test"]
    if not records:
        raise UsageError(f"{manifest} has no test clips")
    fs = cached_feature_set(records, features_dir, system.net.spec.segments)
    records, scores = score_set(system, refs, fs)
    write_scores(out, [(r.clip_id, r.section_key, s) for r, s in zip(records, scores)])
    print(f"scored {len(records)} clips")
    return 0


def cmd_eval(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    scores = read_scores(_existing(args.scores, "scores"))
    report_path = _required(args.report, "report")
    by_id = {r.clip_id: r for r in load_manifest(manifest)}
    unknown = [cid for cid, _, _ in scores if cid not in by_id]
    if unknown:
        raise UsageError(f"{len(unknown)} scored clips are not in the manifest (first: {unknown[0]})")
    records = [by_id[cid] for cid, _, _ in scores]
    report = evaluate(scored_entries(records, [s for _, _, s in scores]), args.p)
    report_path.write_text(report.to_json() + "\n")
    report.write_csv(report_path.with_suffix(".csv"))
    overall = "n/a" if report.overall is None else f"{report.overall:.6f}"
    print(f"overall harmonic mean {overall}")
    return 0


def cmd_explain(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    features_dir = _existing(args.features_dir, "features-dir")
    system, _ = load_system(_existing(args.model, "model"))
    refs = load_reference(_existing(args.refs, "refs"))
    out = _required(args.out, "out")
    if args.clip is None:
        raise UsageError("--clip is required")
    matches = [r for r in load_manifest(manifest) if r.clip_id == args.clip]
    if not matches:
        raise UsageError(f"clip {args.clip!r} is not in {manifest}")
    record = matches[0]
    spectrum = read_cache(features_dir / f"{record.clip_id}.spectrum.masd")[:, 0]
    grid = magnitude_spectrogram(read_wav(manifest.parent / record.path))
    scorer = masked_scorer(system, refs, record.section_key, spectrum)
    imap = importance_map(scorer, grid, MaskParams(iters=args.iters, seed=args.seed))
    formats = ("csv-grid", "pgm") if args.format == "both" else (args.format,)
    for fmt in formats:
        suffix = ".csv" if fmt == "csv-grid" else ".pgm"
        export_map(imap, out.with_name(out.name + suffix), fmt)
    print(f"importance map {imap.values.shape[0]}x{imap.values.shape[1]} from {args.iters} masks")
    return 0


def cmd_verify(args) -> int:
    results = run_all(args.trials, args.seed)
    for r in results:
        print(r.line())
    return 0 if all(r.ok for r in results) else 2


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="masd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="key=value file of generator settings")

    p = add("features", cmd_features, "cache input representations")
    p.add_argument("--manifest")
    p.add_argument("--features-dir")
    p.add_argument("--spectrum-len", type=int, default=SPECTRUM_LEN)

    p = add("train", cmd_train, "train the embedding network")
    p.add_argument("--manifest")
    p.add_argument("--features-dir")
    p.add_argument("--model")
    p.add_argument("--refs", help="also fit and save scoring references here")
    p.add_argument("--config", help="key=value file of training settings")
    p.add_argument("--loss", choices=LOSS_NAMES)
    p.add_argument("--classes", choices=GRANULARITIES)
    p.add_argument("--subclusters", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--k", type=int, default=16, help="k-means means per section")

    p = add("score", cmd_score, "score the test clips")
    for flag in ("--manifest", "--features-dir", "--model", "--refs", "--scores"):
        p.add_argument(flag)

    p = add("eval", cmd_eval, "compute AUC/pAUC report")
    p.add_argument("--manifest")
    p.add_argument("--scores")
    p.add_argument("--report")
    p.add_argument("--p", type=float, default=0.1)

    p = add("explain", cmd_explain, "RISE importance map for one clip")
    for flag in ("--manifest", "--features-dir", "--model", "--refs", "--clip"):
        p.add_argument(flag)
    p.add_argument("--out", help="output path prefix")
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--format", choices=("csv-grid", "pgm", "both"), default="both")

    p = add("verify", cmd_verify, "run the self-check oracles")
    p.add_argument("--trials", type=int, default=100)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ManifestError, WavFormatError) as exc:
        print(f"masd {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        print(f"masd {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
