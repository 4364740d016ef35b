"""Command line entry point: ``emt <subcommand> [options]``.

Every option can also be given in a JSON config file (``--config``) under
its long name with dashes replaced by underscores; explicit flags win.
Exit status is 0 on success, 2 on usage errors, and 1 on runtime errors
(including a failing gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

log = logging.getLogger("emt")

TASKS = {"clas": "classification", "classification": "classification",
         "regr": "regression", "regression": "regression"}


class UsageError(Exception):
    pass


def _task(value: str) -> str:
    try:
        return TASKS[value]
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown task {value!r}; use clas or regr") from None


def _int_list(value: str) -> list[int]:
    return [int(v) for v in value.split(",") if v]


def _str_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--config", help="JSON file with option values (flags override it)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty --out directory")
    p.add_argument("--log-level", default="INFO", help="logging level for stderr (default INFO)")


def _synthetic_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--n-trials", type=int, default=None,
                   help="trials per class (classification) or total (regression)")
    p.add_argument("--channels", type=int, default=None, help="number of EEG channels")
    p.add_argument("--fs", type=int, default=128, help="sampling rate in Hz")
    p.add_argument("--duration", type=float, default=None, help="trial length in seconds")
    p.add_argument("--snr", type=float, default=2.0,
                   help="planted-tone to background RMS ratio ('inf' removes the background)")


def _model_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=["S", "B", "D"], default=None,
                   help="model size: S, B or D (2, 4 or 8 blocks); default B (clas), S (regr)")
    p.add_argument("--rnn", choices=["rnn", "lstm", "gru"], default="gru",
                   help="recurrent cell of the regression token mixer")
    p.add_argument("--alpha", type=float, default=None, help="STA dropout scaling")
    p.add_argument("--n-anchor", type=int, default=3, help="STA kernel height (odd)")
    p.add_argument("--k-order", type=int, default=None,
                   help="Chebyshev order K (default: 3 for <=32 channels, else 4)")
    for flag, what in (("--no-rmpg", "replace the graph encoder by its linear base"),
                       ("--single-gcn", "keep only the first graph branch"),
                       ("--no-tct", "drop all transformer blocks"),
                       ("--no-sta", "drop the short-time aggregation convolution")):
        p.add_argument(flag, action="store_true", default=False, help=f"ablation: {what}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("datagen", help="generate a synthetic dataset and manifest")
    p.add_argument("--task", type=_task, required=True, help="clas or regr")
    _synthetic_options(p)
    p.add_argument("--preset", default=None, help="take the channel count from a preset")
    p.add_argument("--planted-bands", type=_str_list, default=None,
                   help="comma list of planted band names, one per class")
    p.add_argument("--planted-channels", type=_int_list, default=None,
                   help="comma list of channel indices carrying the planted tone")
    p.add_argument("--cutoff-hz", type=float, default=0.05,
                   help="low-pass cutoff of the regression trajectory")
    p.add_argument("--a-fs", type=float, default=4.0, help="annotation rate of regression labels")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    _common(p)

    p = sub.add_parser("extract-features", help="compute temporal-graph features for a manifest")
    p.add_argument("--manifest", required=True, help="manifest.jsonl written by datagen")
    p.add_argument("--preset", default=None, help="seed62, thuep32 or faced32 window constants")
    p.add_argument("--l", type=float, default=20.0, help="segment length in seconds")
    p.add_argument("--s", type=float, default=4.0, help="segment hop in seconds")
    p.add_argument("--l-sub", type=float, default=None, help="sub-segment length (default 2)")
    p.add_argument("--s-sub", type=float, default=None, help="sub-segment hop (default 0.5)")
    p.add_argument("--kind", choices=["rpsd", "psd", "de"], default="rpsd", help="feature type")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    _common(p)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--task", type=_task, default="classification", help="clas or regr")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--features", help="feature directory from extract-features")
    src.add_argument("--manifest", help="manifest; features are extracted into OUT/features")
    _synthetic_options(p)
    _model_options(p)
    p.add_argument("--preset", default=None, help="seed62, thuep32 or faced32")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 30)")
    p.add_argument("--lr", type=float, default=None, help="learning rate")
    p.add_argument("--batch-size", type=int, default=None, help="batch size")
    p.add_argument("--weight-decay", type=float, default=None, help="weight decay")
    p.add_argument("--optimizer", choices=["adam", "adamw"], default=None, help="optimizer")
    p.add_argument("--window", type=int, default=96, help="regression window in tokens")
    p.add_argument("--hop", type=int, default=32, help="regression window hop in tokens")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--split", choices=["train", "val", "test"], default="test",
                   help="split to evaluate (default test)")
    p.add_argument("--features", default=None, help="override the recorded feature directory")
    p.add_argument("--which", choices=["best", "last"], default="best",
                   help="best-validation or final weights")
    p.add_argument("--dump-hidden", action="store_true", help="write hidden token CSVs")
    p.add_argument("--dump-limit", type=int, default=16, help="samples to dump")
    _common(p, out_required=False)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--task", type=_task, default="classification", help="clas or regr")
    _model_options(p)
    p.add_argument("--suite", action="store_true",
                   help="check S/B/D classification and rnn/lstm/gru regression models")
    p.add_argument("--channels", type=int, default=8, help="graph nodes")
    p.add_argument("--seq", type=int, default=6, help="sequence length")
    p.add_argument("--seed", type=int, default=0, help="evaluation point seed")
    p.add_argument("--n-coords", type=int, default=32, help="coordinates per tensor")
    p.add_argument("--eps", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--threshold", type=float, default=1e-4, help="max relative error")
    _common(p)

    p = sub.add_parser("export-adjacency", help="write learned adjacency matrices as CSV")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--which", choices=["best", "last"], default="best",
                   help="best-validation or last-epoch weights")
    p.add_argument("--channel-names", type=_str_list, default=None,
                   help="comma list of channel names for the CSV headers")
    p.add_argument("--manifest", default=None, help="read channel names from a manifest")
    _common(p)
    return parser


# --------------------------------------------------------------------------


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    path = _config_path(argv)
    command = argv[0] if argv else None
    choices = parser._subparsers._group_actions[0].choices
    if path is None or command not in choices:
        return parser.parse_args(argv)
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        parser.error(f"cannot read config file {path}: {err}")
    if not isinstance(values, dict):
        parser.error(f"config file {path} must hold a JSON object")
    subparser = choices[command]
    dests = {a.dest: a for a in subparser._actions}
    unknown = sorted(set(values) - set(dests) - {"command", "config"})
    if unknown:
        parser.error(f"unknown option(s) in config file: {', '.join(unknown)}")
    converted = {}
    for key, value in values.items():
        action = dests.get(key)
        if action is None or key == "config":
            continue
        if action.type is not None and isinstance(value, str):
            value = action.type(value)
        converted[key] = value
        # a value from the file satisfies a required flag
        action.required = False
    subparser.set_defaults(**converted)
    return parser.parse_args(argv)


def _prepare_out(out: Path, force: bool, allow_existing: bool = False) -> None:
    if out.exists() and any(out.iterdir()) and not allow_existing:
        if not force:
            raise UsageError(f"output directory {out} is not empty; use --force to overwrite")
        for child in out.iterdir():
            shutil.rmtree(child) if child.is_dir() else child.unlink()
    out.mkdir(parents=True, exist_ok=True)


def _snapshot(args: argparse.Namespace, out: Path) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("force", "log_level")}
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")


def _synthetic_spec(args, task: str):
    from .presets import get_preset
    from .signalio import SyntheticSpec

    preset = get_preset(getattr(args, "preset", None))
    c = args.channels or preset.get("c", 32)
    kw = dict(task=task, c=c, fs=args.fs, snr=args.snr, seed=args.seed)
    if task == "classification":
        kw.update(n_trials=args.n_trials or 40, duration=args.duration or 60.0)
    else:
        kw.update(n_trials=args.n_trials or 30, duration=args.duration or 120.0)
    for name in ("planted_bands", "planted_channels", "cutoff_hz", "a_fs"):
        value = getattr(args, name, None)
        if value is not None:
            kw[name] = tuple(value) if isinstance(value, list) else value
    return SyntheticSpec(**kw)


def _window_config(args, fs: int, preset: dict):
    from .tgc import WindowConfig

    l_sub = getattr(args, "l_sub", None) or preset.get("l_sub", 2.0)
    s_sub = getattr(args, "s_sub", None) or preset.get("s_sub", 0.5)
    return WindowConfig(fs=fs, l=getattr(args, "l", 20.0), s=getattr(args, "s", 4.0),
                        l_sub=l_sub, s_sub=s_sub)


def cmd_datagen(args) -> None:
    from .signalio import gen_synthetic_classification, gen_synthetic_regression

    out = Path(args.out)
    _prepare_out(out, args.force)
    spec = _synthetic_spec(args, args.task)
    gen = gen_synthetic_classification if args.task == "classification" else gen_synthetic_regression
    manifest = gen(spec, out, workers=args.workers)
    log.info("wrote %d trials to %s", len(manifest.entries), out)
    _snapshot(args, out)


def _extract(manifest_path, args, out: Path, preset: dict) -> Path:
    from .features import extract_manifest
    from .signalio import DatasetManifest

    manifest = DatasetManifest.read(manifest_path)
    if preset.get("c") is not None and preset["c"] != manifest.c:
        log.warning("preset expects %d channels, manifest has %d", preset["c"], manifest.c)
    cfg = _window_config(args, manifest.fs, preset)
    extract_manifest(manifest, cfg, out, kind=getattr(args, "kind", "rpsd"),
                     workers=getattr(args, "workers", 1))
    log.info("features for %d trials in %s (seq=%d)", len(manifest.entries), out, cfg.seq)
    return out


def cmd_extract(args) -> None:
    from .presets import get_preset

    out = Path(args.out)
    _prepare_out(out, args.force)
    _extract(args.manifest, args, out, get_preset(args.preset))
    _snapshot(args, out)


def _train_config(args):
    from .trainer import TrainConfig

    return TrainConfig(
        task=args.task, variant=args.variant, optimizer=args.optimizer, lr=args.lr,
        weight_decay=args.weight_decay, batch_size=args.batch_size, epochs=args.epochs,
        alpha=args.alpha, k_order=args.k_order, n_anchor=args.n_anchor, rnn=args.rnn,
        seed=args.seed, window=args.window, hop=args.hop, preset=args.preset,
        no_rmpg=args.no_rmpg, single_gcn=args.single_gcn, no_tct=args.no_tct, no_sta=args.no_sta,
    )


def cmd_train(args) -> None:
    from .features import load_feature_data
    from .presets import get_preset
    from .signalio import gen_synthetic_classification, gen_synthetic_regression
    from .trainer import train

    out = Path(args.out)
    resume = Path(args.resume).resolve() if args.resume else None
    _prepare_out(out, args.force, allow_existing=resume is not None and resume.parent == out.resolve())
    cfg = _train_config(args)
    preset = get_preset(args.preset)
    if args.features:
        feat_dir = Path(args.features)
    else:
        manifest = args.manifest
        if manifest is None:
            spec = _synthetic_spec(args, cfg.task)
            gen = (gen_synthetic_classification if cfg.task == "classification"
                   else gen_synthetic_regression)
            gen(spec, out / "data")
            manifest = out / "data" / "manifest.jsonl"
        feat_dir = _extract(manifest, args, out / "features", preset)
    data = load_feature_data(feat_dir, cfg.window, cfg.hop)
    result = train(cfg, data, out, resume=resume)
    if result.test is not None:
        log.info("test %s", json.dumps({k: v for k, v in result.test.to_dict().items()
                                        if k not in ("loss_history", "flags", "extra")}))
    _snapshot(args, out)


def cmd_eval(args) -> None:
    from .features import load_feature_data
    from .trainer import evaluate

    ckpt = Path(args.ckpt)
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{args.split}"
    _prepare_out(out, args.force)
    data = None
    if args.features:
        from .checkpoint import load_checkpoint

        meta = load_checkpoint(ckpt)[1].get("data", {})
        data = load_feature_data(args.features, meta.get("window", 96), meta.get("hop", 32))
    report = evaluate(ckpt, args.split, data=data,
                      which="param" if args.which == "last" else "best",
                      dump_hidden=out / "hidden" if args.dump_hidden else None,
                      dump_limit=args.dump_limit)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    args.out = str(out)
    _snapshot(args, out)


def cmd_gradcheck(args) -> None:
    from .gradcheck import grad_check
    from .model import EmTConfig

    out = Path(args.out)
    _prepare_out(out, args.force)
    if args.suite:
        configs = [("classification", v, "gru") for v in "SBD"]
        configs += [("regression", "S", r) for r in ("rnn", "lstm", "gru")]
    else:
        configs = [(args.task, args.variant or ("B" if args.task == "classification" else "S"),
                    args.rnn)]
    reports, ok = {}, True
    for task, variant, rnn in configs:
        cfg = EmTConfig(n_nodes=args.channels, task=task, variant=variant, rnn=rnn,
                        k_order=args.k_order, n_anchor=min(args.n_anchor, args.seq),
                        alpha=args.alpha if args.alpha is not None else 0.25,
                        no_rmpg=args.no_rmpg, single_gcn=args.single_gcn, no_tct=args.no_tct,
                        no_sta=args.no_sta)
        rep = grad_check(cfg, seed=args.seed, seq=args.seq, n_coords=args.n_coords,
                         eps=args.eps, threshold=args.threshold)
        tag = f"{task}-{variant}-{rnn}" if task == "regression" else f"{task}-{variant}"
        log.info("%s: max rel err %.3g over %d tensors -> %s", tag, rep.max_rel_err,
                 len(rep.checks), "pass" if rep.passed else "FAIL")
        reports[tag] = rep.to_dict()
        ok &= rep.passed
    (out / "gradreport.json").write_text(json.dumps(reports, indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    _snapshot(args, out)
    if not ok:
        raise RuntimeError("gradient check failed")


def cmd_export(args) -> None:
    from .signalio import DatasetManifest
    from .trainer import export_adjacency

    out = Path(args.out)
    _prepare_out(out, args.force)
    names = args.channel_names
    if names is None and args.manifest:
        names = DatasetManifest.read(args.manifest).entries[0].get("channel_names")
    paths = export_adjacency(args.ckpt, out, names,
                             which="param" if args.which == "last" else "best")
    log.info("wrote %d adjacency matrices to %s", len(paths), out)
    _snapshot(args, out)


COMMANDS = {"datagen": cmd_datagen, "extract-features": cmd_extract, "train": cmd_train,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck, "export-adjacency": cmd_export}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, str(args.log_level).upper(),
                                                         logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        COMMANDS[args.command](args)
    except UsageError as err:
        log.error("%s", err)
        return 1
    except Exception as err:  # reported as a runtime failure
        log.error("%s: %s", type(err).__name__, err)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
