"""Command-line entry point, ``h4vdm <subcommand>``.

Exit codes: 0 success, 1 unexpected failure, 2 bitstream parse error,
3 model/record mismatch, 4 configuration error, 5 data error.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .bitstream import parse_stream
from .errors import (BitstreamError, ConfigError, DataError, DimensionMismatch, FormatError,
                     ModelError, ShapeMismatch, ShortGop, SmallFrame)
from .gop_store import GopStore, assemble_model_input, cross_validate, load_record
from .metrics import choose_threshold, emit_report
from .model import H4VDM, ModelConfig, preset, similarity, stack_inputs
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .pairs import (VISION_DEVICES, PairSample, build_pairs, carve_validation, default_profiles,
                    label_counts, load_split, make_split, read_pair_manifest, subsample,
                    synth_generate, write_pair_manifest, write_split)
from .train import InputSource, TrainConfig, evaluate, score_pairs, train, train_preset

log = logging.getLogger("h4vdm")

EXIT_OK, EXIT_UNEXPECTED, EXIT_PARSE, EXIT_MODEL, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3, 4, 5

# keys a --config file may set, per section
CONFIG_SECTIONS = {
    "synth": ("devices", "videos", "gops", "height", "width", "device_ids"),
    "pairs": ("split", "test_devices", "n0", "n1", "test_fraction", "val_fraction"),
    "model": tuple(f.name for f in fields(ModelConfig)),
    "train": tuple(f.name for f in fields(TrainConfig)),
}
TOP_LEVEL_KEYS = ("preset", "seed", *CONFIG_SECTIONS)

PAIRS_DEFAULTS = {"split": None, "test_devices": None, "n0": 15, "n1": 120,
                  "test_fraction": 0.4, "val_fraction": 0.125}
SYNTH_DEFAULTS = {"devices": 9, "videos": 2, "gops": 6, "height": 64, "width": 64,
                  "device_ids": "syn"}
# CLI flag name -> TrainConfig field
TRAIN_FLAGS = {"batch_size": "batch_size", "lr": "base_lr", "warmup_epochs": "warmup_epochs",
               "decay": "decay", "patience": "patience", "epochs": "max_epochs"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


# -- config resolution -------------------------------------------------------------

def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path}: top level must be an object")
    unknown = set(doc) - set(TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"config file {path}: unknown keys {sorted(unknown)}")
    for section, keys in CONFIG_SECTIONS.items():
        extra = set(doc.get(section, {})) - set(keys)
        if extra:
            raise ConfigError(f"config file {path}: unknown {section} keys {sorted(extra)}")
    return doc


def _pick(flag, file_value, default):
    """Flags beat the config file, which beats the preset default."""
    if flag is not None:
        return flag
    return default if file_value is None else file_value


def resolve_section(args, cfg: dict, section: str, defaults: dict, flag_map=None) -> dict:
    flag_map = flag_map or {k: k for k in defaults}
    out = {**defaults, **cfg.get(section, {})}
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def resolve_common(args, cfg: dict) -> tuple[str, int]:
    name = _pick(getattr(args, "preset", None), cfg.get("preset"), "tiny")
    seed = int(_pick(getattr(args, "seed", None), cfg.get("seed"), 0))
    return name, seed


def resolve_model(name: str, cfg: dict) -> ModelConfig:
    return preset(name, **cfg.get("model", {}))


def resolve_train(args, name: str, seed: int, cfg: dict) -> TrainConfig:
    doc = {**cfg.get("train", {})}
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    doc["seed"] = seed
    if args.deterministic:
        doc["prefetch"] = 0
    return train_preset(name, **doc)


def _log_config(command: str, resolved: dict) -> None:
    log.info("%s config %s", command, json.dumps(resolved, sort_keys=True, default=str))


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _csv(value: str | None):
    return None if value is None else [v for v in value.split(",") if v]


# -- subcommands ------------------------------------------------------------------

def cmd_parse(args) -> int:
    _log_config("parse", {"stream": args.stream, "open_gop": args.open_gop, "json": args.json})
    data = Path(args.stream).read_bytes()
    doc = parse_stream(data, open_gop=args.open_gop).to_json()
    text = json.dumps(doc, indent=1) + "\n"
    if args.json:
        Path(args.json).write_text(text)
        log.info("%d NAL units, %d frames, %d GOPs -> %s", len(doc["nal_units"]),
                 len(doc["frames"]), len(doc["gops"]), args.json)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _record_dirs(path: Path) -> list[Path]:
    if (path / "manifest.json").exists():
        return [path]
    found = sorted(p.parent for p in path.glob("*/*/gop_*/manifest.json"))
    if not found:
        raise FormatError(f"{path}: neither a record directory nor a store")
    return found


def cmd_validate(args) -> int:
    _log_config("validate", {k: getattr(args, k) for k in ("paths", "L", "height", "width",
                                                              "stream", "open_gop", "ingest")})
    parsed = None
    if args.stream:
        parsed = parse_stream(Path(args.stream).read_bytes(), open_gop=args.open_gop)
    target = GopStore(args.ingest) if args.ingest else None
    results, failures = [], 0
    for root in args.paths:
        for d in _record_dirs(Path(root)):
            entry = {"path": str(d)}
            try:
                rec = load_record(d, args.L, args.height, args.width)
                if parsed is not None:
                    cross_validate([rec], parsed)
                entry.update(status="ok", key=list(rec.key), frames=rec.frame_count)
                if target is not None:
                    target.write(rec)
            except DataError as exc:
                failures += 1
                entry.update(status="invalid", error=type(exc).__name__, message=str(exc))
            results.append(entry)
    summary = {"records": len(results), "valid": len(results) - failures,
               "invalid": failures, "results": results}
    sys.stdout.write(json.dumps(summary, indent=1) + "\n")
    return EXIT_DATA if failures else EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config_file(args.config)
    _, seed = resolve_common(args, cfg)
    s = resolve_section(args, cfg, "synth", SYNTH_DEFAULTS)
    if s["device_ids"] == "syn":
        ids = None
    elif s["device_ids"] == "vision":
        ids = list(VISION_DEVICES[:s["devices"]])
        if len(ids) != s["devices"]:
            raise ConfigError(f"only {len(VISION_DEVICES)} vision device ids exist")
    else:
        ids = _csv(s["device_ids"]) if isinstance(s["device_ids"], str) else list(s["device_ids"])
    if s["devices"] < 1 or s["videos"] < 1 or s["gops"] < 1:
        raise ConfigError("--devices, --videos and --gops must be >= 1")
    resolved = {"seed": seed, "out": args.out, **s}
    _log_config("synth", resolved)
    try:
        profiles = default_profiles(s["devices"], seed, s["height"], s["width"], device_ids=ids)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    store = GopStore(args.out)
    records = synth_generate(profiles, s["videos"], s["gops"], store)
    _write_json(Path(args.out) / "synth_profiles.json",
                {"seed": seed, "videos": s["videos"], "gops": s["gops"],
                 "profiles": [p.to_json() for p in profiles]})
    log.info("wrote %d records for %d devices to %s", len(records), len(profiles), args.out)
    return EXIT_OK


def cmd_pairs(args) -> int:
    cfg = load_config_file(args.config)
    name, seed = resolve_common(args, cfg)
    s = resolve_section(args, cfg, "pairs", PAIRS_DEFAULTS)
    if (s["split"] is None) == (s["test_devices"] is None):
        raise ConfigError("give exactly one of --split and --test-devices")
    mc = resolve_model(name, cfg)
    store = GopStore(args.store)
    gbd = store.gops_by_device(mc.L, mc.height, mc.width)
    if not gbd:
        raise DataError(f"{args.store}: no usable records for L={mc.L}, {mc.height}x{mc.width}")
    if s["split"] is not None:
        split = load_split(s["split"])
    else:
        test = _csv(s["test_devices"]) if isinstance(s["test_devices"], str) else s["test_devices"]
        split = make_split(store.devices(), test, name="custom")
    resolved = {"preset": name, "seed": seed, "store": args.store, "out": args.out, **s,
                "split_name": split.name, "s1": list(split.s1), "s2": list(split.s2)}
    _log_config("pairs", resolved)
    train_pairs = build_pairs(split.s1, gbd, s["n0"], s["n1"], seed)
    test_all = build_pairs(split.s2, gbd, s["n0"], s["n1"], seed + 1)
    test_pairs = subsample(test_all, s["test_fraction"], seed + 2)
    val_pairs, test_pairs = carve_validation(test_pairs, s["val_fraction"], seed + 3)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_split(split, out / "split.json")
    header = {"seed": seed, "n0": s["n0"], "n1": s["n1"], "split": split.name,
              "test_fraction": s["test_fraction"], "val_fraction": s["val_fraction"]}
    counts = {}
    for part, pairs in (("train", train_pairs), ("val", val_pairs), ("test", test_pairs)):
        write_pair_manifest(out / f"{part}.jsonl", pairs, {**header, "part": part})
        counts[part] = label_counts(pairs)
    sys.stdout.write(json.dumps({k: {"label_0": c[0], "label_1": c[1]} for k, c in counts.items()})
                     + "\n")
    return EXIT_OK


def _read_pairs(path: Path) -> list[PairSample]:
    return read_pair_manifest(path)[1]


def cmd_train(args) -> int:
    cfg = load_config_file(args.config)
    name, seed = resolve_common(args, cfg)
    mc = resolve_model(name, cfg)
    tc = resolve_train(args, name, seed, cfg)
    resolved = {"preset": name, "seed": seed, "store": args.store, "pairs": args.pairs,
                "out": args.out, "model": mc.to_dict(), "train": tc.to_dict()}
    _log_config("train", resolved)
    pairs_dir = Path(args.pairs)
    train_pairs = _read_pairs(pairs_dir / "train.jsonl")
    val_pairs = _read_pairs(pairs_dir / "val.jsonl")
    model = H4VDM(mc)
    params = model.init_params(seed)
    source = InputSource.from_store(args.store, mc.L, mc.height, mc.width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", resolved)
    meta = {"preset": name, "seed": seed}
    result = train(model, params, source, train_pairs, val_pairs, tc, out, meta,
                   log=lambda e: log.info("epoch %(epoch)d lr %(lr).3g loss %(train_loss).5f "
                                          "val_auc %(val_auc).4f (%(elapsed_s).1fs)", e))
    thr = choose_threshold(score_pairs(model, result.params, source, val_pairs),
                           [p.label for p in val_pairs])
    best_meta = {"model": model.model_card(seed, name), "train": tc.to_dict(), **meta,
                 "epoch": result.best_epoch, "val_auc": result.best_auc,
                 "threshold": thr, "threshold_source": "validation"}
    save_checkpoint(out / "best.ckpt", result.params, best_meta)
    log.info("best epoch %d, val AUC %.4f, threshold %.6f", result.best_epoch, result.best_auc, thr)
    return EXIT_OK


def load_model(path: str | Path) -> tuple[H4VDM, dict, dict]:
    params, meta = load_checkpoint(path)
    try:
        config = ModelConfig.from_dict(meta["model"]["config"])
    except (KeyError, TypeError):
        raise ModelError(f"{path}: checkpoint has no model config") from None
    model = H4VDM(config)
    model.check_params(params)
    return model, params, meta


def cmd_eval(args) -> int:
    model, params, meta = load_model(args.checkpoint)
    c = model.config
    pairs_dir = Path(args.pairs)
    test_pairs = _read_pairs(pairs_dir / "test.jsonl")
    val_path = pairs_dir / "val.jsonl"
    source_name = args.threshold_from
    _log_config("eval", {"checkpoint": args.checkpoint, "pairs": args.pairs, "store": args.store,
                         "out": args.out, "threshold_from": source_name, "model": c.to_dict()})
    source = InputSource.from_store(args.store, c.L, c.height, c.width)
    report_meta = {"preset": meta.get("preset"), "seed": meta.get("seed"),
                   "checkpoint_epoch": meta.get("epoch"), "n_test": len(test_pairs)}
    if source_name == "validation":
        report = evaluate(model, params, source, test_pairs, _read_pairs(val_path), meta=report_meta)
    elif source_name == "checkpoint":
        if "threshold" not in meta:
            raise ConfigError(f"{args.checkpoint} carries no threshold")
        report = evaluate(model, params, source, test_pairs, threshold=meta["threshold"],
                          meta=report_meta)
        report.threshold_source = "checkpoint"
    else:
        report = evaluate(model, params, source, test_pairs, meta=report_meta)
    paths = emit_report(report, args.out)
    row = report.table_row()
    sys.stdout.write(json.dumps({"auc": report.auc, "threshold": report.threshold,
                                 "table": row, "files": paths}, indent=1) + "\n")
    return EXIT_OK


def cmd_compare(args) -> int:
    model, params, meta = load_model(args.checkpoint)
    c = model.config
    _log_config("compare", {"a": args.record_a, "b": args.record_b, "checkpoint": args.checkpoint,
                            "model": c.to_dict()})
    inputs = []
    for path in (args.record_a, args.record_b):
        try:
            rec = load_record(path, c.L, c.height, c.width)
        except (ShortGop, SmallFrame, DimensionMismatch) as exc:
            raise ShapeMismatch(f"{path} does not fit the checkpoint: {exc}") from None
        inputs.append(assemble_model_input(rec, c.L, c.height, c.width))
    r = model.extract(params, stack_inputs(inputs))
    s = float(similarity(r[0], r[1]))
    out = {"similarity": s}
    if "threshold" in meta:
        out.update(threshold=meta["threshold"], same_device=bool(s >= meta["threshold"]))
    sys.stdout.write(json.dumps(out) + "\n")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("runtime")
    g.add_argument("--threads", type=int, default=None, metavar="N",
                   help="cap BLAS/OpenMP worker threads")
    g.add_argument("--deterministic", action="store_true",
                   help="single-threaded, serial reductions and no prefetching")
    g.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    configured = _Parser(add_help=False)
    configured.add_argument("--config", metavar="JSON",
                            help="config file; flags override it, it overrides the preset")
    configured.add_argument("--preset", choices=("S", "B", "L", "tiny", "micro"), default=None,
                            help="model size preset (default tiny)")
    configured.add_argument("--seed", type=int, default=None, help="random seed (default 0)")

    parser = _Parser(prog="h4vdm", description="Same-device verification for H.264 GOP pairs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("parse", parents=[common], help="parse an Annex-B H.264 stream")
    p.add_argument("stream", help="H.264 elementary stream")
    p.add_argument("--open-gop", action="store_true", help="also start GOPs at non-IDR I frames")
    p.add_argument("--json", metavar="OUT", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("validate", parents=[common], help="validate (and optionally ingest) records")
    p.add_argument("paths", nargs="+", help="record directories or store roots")
    p.add_argument("--L", type=int, default=None, help="require at least L frames")
    p.add_argument("--height", type=int, default=None, help="require at least this frame height")
    p.add_argument("--width", type=int, default=None, help="require at least this frame width")
    p.add_argument("--stream", help="cross-check frame types against this bitstream")
    p.add_argument("--open-gop", action="store_true", help="segment --stream with open GOPs")
    p.add_argument("--ingest", metavar="STORE", help="copy valid records into this store")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("synth", parents=[common, configured], help="generate a synthetic store")
    p.add_argument("--out", required=True, metavar="STORE", help="store root to write")
    p.add_argument("--devices", type=int, default=None, help="number of devices (default 9)")
    p.add_argument("--videos", type=int, default=None, help="videos per device (default 2)")
    p.add_argument("--gops", type=int, default=None, help="GOPs per video (default 6)")
    p.add_argument("--height", type=int, default=None, help="frame height (default 64)")
    p.add_argument("--width", type=int, default=None, help="frame width (default 64)")
    p.add_argument("--device-ids", default=None,
                   help="'syn' (syn00, syn01, ...), 'vision' (1..35) or a comma list")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pairs", parents=[common, configured], help="build pair manifests")
    p.add_argument("--store", required=True, help="store root")
    p.add_argument("--out", required=True, help="directory for train/val/test .jsonl")
    p.add_argument("--split", default=None, help="preset split (D1..D7) or split JSON file")
    p.add_argument("--test-devices", default=None, help="comma list of held-out devices")
    p.add_argument("--n0", type=int, default=None, help="pairs per ordered device pair (default 15)")
    p.add_argument("--n1", type=int, default=None, help="same-device pairs per device (default 120)")
    p.add_argument("--test-fraction", type=float, default=None,
                   help="share of test pairs kept (default 0.4)")
    p.add_argument("--val-fraction", type=float, default=None,
                   help="share of kept test pairs moved to validation (default 0.125)")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train", parents=[common, configured], help="train a model")
    p.add_argument("--store", required=True, help="store root")
    p.add_argument("--pairs", required=True, help="directory with train.jsonl and val.jsonl")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--batch-size", type=int, default=None, help="pairs per step")
    p.add_argument("--lr", type=float, default=None, help="base learning rate")
    p.add_argument("--warmup-epochs", type=int, default=None, help="linear warm-up epochs")
    p.add_argument("--decay", type=float, default=None, help="per-epoch learning-rate decay")
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience")
    p.add_argument("--epochs", type=int, default=None, help="maximum epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on test pairs")
    p.add_argument("--store", required=True, help="store root")
    p.add_argument("--pairs", required=True, help="directory with test.jsonl (and val.jsonl)")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="directory for report files")
    p.add_argument("--threshold-from", choices=("validation", "test", "checkpoint"),
                   default="validation", help="where the decision threshold comes from")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="score two GOP records")
    p.add_argument("record_a", help="record directory")
    p.add_argument("record_b", help="record directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.set_defaults(func=cmd_compare)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, BitstreamError):
        return EXIT_PARSE
    if isinstance(exc, ModelError):
        return EXIT_MODEL
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return EXIT_UNEXPECTED


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    level = logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(name)s: %(message)s", stream=sys.stderr, force=True)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    limit = 1 if args.deterministic else args.threads
    try:
        with (threadpool_limits(limits=limit) if limit else contextlib.nullcontext()):
            return args.func(args)
    except Exception as exc:  # mapped onto the documented exit codes
        code = exit_code(exc)
        if code == EXIT_UNEXPECTED:
            log.exception("unexpected failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
