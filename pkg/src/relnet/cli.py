"""Command-line front end.

Subcommands: train, eval, predict, zeroshot, gradcheck, synth, embed.
Exit status 0 on success, 1 on usage errors, 2 on data or contract
errors.  Values resolve as flags over config-file entries over defaults;
the effective configuration is echoed into the output directory, and all
JSON reports carry the checkpoint and config hashes.  The RELNET_OUT
environment variable overrides the default output directory.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import brnn, evaluation, inference, synthbench, trainer
from .backend import active_backend
from .dataset import derive_zero_shot_split, load_annotations, load_vocabulary, PredicateVocabulary
from .embeddings import analogy, cosine_distance, load_embeddings, lookup_class_vector
from .errors import RelnetError
from .evaluation import Task

log = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to status 2; the contract says 1
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--dims expects D,H,OUT, got {text!r}")
    try:
        d, h, out = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--dims expects integers, got {text!r}") from None
    return d, h, out


# config-file keys share the long flag names; values here convert the strings
_CONVERTERS = {
    "embeddings": str, "train": str, "test": str, "objects": str,
    "predicates": str, "checkpoint": str, "out": str,
    "seed": int, "lr": float, "batch": int, "epochs": int, "clip": float,
    "neg-ratio": float, "mode": str, "det-threshold": float,
    "dims": str, "oov": str, "epsilon": float,
    "k": lambda s: [int(v) for v in s.split(",")],
    # synthetic-world keys
    "num-groups": int, "classes-per-group": int, "num-predicates": int,
    "dim": int, "intra-spread": float, "inter-separation": float,
    "images-train": int, "images-test": int, "held-out-fraction": float,
    "jitter": float, "num-base-patterns": int, "triplets-per-image": int,
    "mirror-boxes": lambda s: s.strip().lower() in ("1", "true", "yes"),
}

_DEFAULTS = {
    "seed": 0, "lr": 0.01, "batch": 128, "epochs": 100, "clip": 5.0,
    "neg-ratio": 1.0, "mode": "predicate", "det-threshold": 0.0,
    "oov": "error", "epsilon": 1e-5, "k": [50, 100],
}


def _read_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected 'key = value'")
                key, _, raw = line.partition("=")
                key = key.strip()
                if key not in _CONVERTERS:
                    raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
                try:
                    values[key] = _CONVERTERS[key](raw.strip())
                except ValueError as exc:
                    raise UsageError(f"{path}:{lineno}: {exc}") from None
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    return values


def _resolve(args: argparse.Namespace, file_cfg: dict) -> dict:
    """flags override config-file values override defaults"""
    merged = {}
    for key in _CONVERTERS:
        attr = key.replace("-", "_")
        flag_value = getattr(args, attr, None)
        if flag_value is not None:
            merged[key] = flag_value
        elif key in file_cfg:
            merged[key] = file_cfg[key]
        elif key in _DEFAULTS:
            merged[key] = _DEFAULTS[key]
    if "out" not in merged:
        merged["out"] = os.environ.get("RELNET_OUT") or "out"
    return merged


def _require(cfg: dict, command: str, *keys: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise UsageError(f"{command} requires {', '.join('--' + k for k in missing)}")


def _input_path(cfg: dict, key: str) -> Path:
    path = Path(cfg[key])
    if not path.exists():
        raise RelnetError(f"--{key} path does not exist: {path}")
    return path


def _echo_config(cfg: dict, command: str, outdir: Path) -> str:
    lines = [f"command = {command}", f"backend = {active_backend()}"]
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    text = "\n".join(lines) + "\n"
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "effective_config.txt").write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_table(cfg: dict, dims_d: int | None):
    path = _input_path(cfg, "embeddings")
    if dims_d is None:
        with open(path, "r", encoding="utf-8") as fh:
            first = fh.readline().rstrip("\n")
        dims_d = max(len(first.split(" ")) - 1, 1)
    return load_embeddings(path, dims_d)


def _load_vocabs(cfg: dict):
    object_vocab = load_vocabulary(_input_path(cfg, "objects"))
    predicate_vocab = PredicateVocabulary(tuple(load_vocabulary(_input_path(cfg, "predicates"))))
    return object_vocab, predicate_vocab


def _positive_ks(cfg: dict) -> list[int]:
    ks = cfg["k"]
    if any(k <= 0 for k in ks):
        raise UsageError("--k values must be positive")
    return ks


def _cmd_synth(cfg: dict) -> int:
    outdir = Path(cfg["out"])
    kwargs = {
        "num_groups": cfg.get("num-groups"),
        "classes_per_group": cfg.get("classes-per-group"),
        "num_predicates": cfg.get("num-predicates"),
        "dim": cfg.get("dim"),
        "intra_group_spread": cfg.get("intra-spread"),
        "inter_group_separation": cfg.get("inter-separation"),
        "images_train": cfg.get("images-train"),
        "images_test": cfg.get("images-test"),
        "held_out_fraction": cfg.get("held-out-fraction"),
        "jitter": cfg.get("jitter"),
        "num_base_patterns": cfg.get("num-base-patterns"),
        "triplets_per_image": cfg.get("triplets-per-image"),
        "mirror_boxes": cfg.get("mirror-boxes"),
        "seed": cfg["seed"],
    }
    config = synthbench.SynthConfig(**{k: v for k, v in kwargs.items() if v is not None})
    world = synthbench.generate_world(config)
    paths = synthbench.write_world(world, outdir)
    _echo_config(cfg, "synth", outdir)
    print(f"synthetic world written to {outdir} "
          f"({len(world.train_records)} train / {len(world.test_records)} test images, "
          f"{len(world.zero_shot_types)} zero-shot types)")
    for name, path in sorted(paths.items()):
        print(f"  {name}: {path}")
    return EXIT_OK


def _cmd_train(cfg: dict) -> int:
    _require(cfg, "train", "embeddings", "train", "objects", "predicates")
    object_vocab, predicate_vocab = _load_vocabs(cfg)
    dims_spec = _parse_dims(cfg["dims"]) if "dims" in cfg else None
    table = _load_table(cfg, dims_spec[0] if dims_spec else None)
    records = load_annotations(_input_path(cfg, "train"), predicate_vocab, object_vocab)
    dims = brnn.NetworkDims(
        input_dim=dims_spec[0] if dims_spec else table.dim,
        hidden_dim=dims_spec[1] if dims_spec else 128,
        output_dim=dims_spec[2] if dims_spec else predicate_vocab.output_dim,
    )
    config = trainer.TrainingConfig(
        learning_rate=cfg["lr"], batch_size=cfg["batch"], max_epochs=cfg["epochs"],
        clip_norm=cfg["clip"], neg_ratio=cfg["neg-ratio"], seed=cfg["seed"],
    )
    params, history = trainer.train(records, table, predicate_vocab, object_vocab, config, dims)

    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    ckpt_path = outdir / "checkpoint.json"
    trainer.save_checkpoint(params, dims, predicate_vocab, ckpt_path)
    config_hash = _echo_config(cfg, "train", outdir)
    ckpt_hash = _file_sha256(ckpt_path)
    with open(outdir / "history.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,accuracy\n")
        for epoch, (l, a) in enumerate(zip(history.losses, history.accuracies), start=1):
            fh.write(f"{epoch},{l!r},{a!r}\n")
    with open(outdir / "history.json", "w", encoding="utf-8") as fh:
        json.dump({
            "initial_loss": history.initial_loss,
            "losses": history.losses,
            "accuracies": history.accuracies,
            "negative_shortfall": history.negative_shortfall,
            "checkpoint_sha256": ckpt_hash,
            "config_sha256": config_hash,
        }, fh, indent=2)
    print(f"trained {config.max_epochs} epochs: "
          f"loss {history.initial_loss:.4f} -> {history.losses[-1]:.4f}, "
          f"accuracy {history.accuracies[-1]:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def _prepare_eval(cfg: dict, command: str):
    _require(cfg, command, "embeddings", "checkpoint", "test", "objects", "predicates")
    params, dims, predicate_vocab = trainer.load_checkpoint(_input_path(cfg, "checkpoint"))
    object_vocab, file_vocab = _load_vocabs(cfg)
    if tuple(file_vocab.names) != tuple(predicate_vocab.names):
        raise RelnetError("predicate vocabulary file does not match the checkpoint")
    table = _load_table(cfg, dims.input_dim)
    records = load_annotations(_input_path(cfg, "test"), predicate_vocab, object_vocab)
    return params, dims, predicate_vocab, object_vocab, table, records


def _detector_predictions(records, params, table, object_vocab, top_k, det_threshold):
    per_image = {}
    for rec in records:
        if not rec.detections:
            raise RelnetError(
                f"image {rec.image_id!r} has no detections; phrase/relationship "
                "evaluation needs a detector output in the annotations"
            )
        per_image[rec.image_id] = inference.rank_relationships(
            rec, params, table, object_vocab, top_k=top_k, det_threshold=det_threshold)
    return per_image


def _write_reports(reports, outdir: Path, stem: str, per_type=None,
                   checkpoint_hash: str = "", config_hash: str = "") -> None:
    evaluation.write_recall_csv(reports, outdir / f"{stem}.csv")
    evaluation.write_recall_json(reports, outdir / f"{stem}.json", meta={
        "checkpoint_sha256": checkpoint_hash,
        "config_sha256": config_hash,
    })
    if per_type is not None:
        evaluation.write_per_type_csv(per_type, outdir / "per_type.csv")
    for r in reports:
        pooled = f" [{r.pooling}]" if r.pooling else ""
        print(f"{r.mode.value} Rec@{r.k}: {r.recall:.4f} ({r.num_matched}/{r.num_gt}){pooled}")


def _cmd_eval(cfg: dict) -> int:
    params, dims, predicate_vocab, object_vocab, table, records = _prepare_eval(cfg, "eval")
    ks = _positive_ks(cfg)
    mode = Task(cfg["mode"])
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    config_hash = _echo_config(cfg, "eval", outdir)
    ckpt_hash = _file_sha256(Path(cfg["checkpoint"]))

    gts = {r.image_id: list(r.gt_triplets) for r in records}
    reports = []
    per_type = None
    if mode is Task.PREDICATE:
        pooled = {r.image_id: inference.gt_pair_items(r, params, table, object_vocab)
                  for r in records}
        per_pair = {r.image_id: inference.predict_for_gt_pairs(r, params, table, object_vocab)
                    for r in records}
        for k in ks:
            reports.append(evaluation.recall_at_k(pooled, gts, k, mode, vocab=predicate_vocab))
            reports.append(evaluation.predicate_recall_per_pair(per_pair, gts, k, vocab=predicate_vocab))
        per_type = evaluation.per_type_accuracy(per_pair, gts, k=5, vocab=predicate_vocab)
    else:
        predictions = _detector_predictions(records, params, table, object_vocab,
                                            max(ks), cfg["det-threshold"])
        for k in ks:
            reports.append(evaluation.recall_at_k(predictions, gts, k, mode, vocab=predicate_vocab))
    _write_reports(reports, outdir, f"recall_{mode.value}", per_type, ckpt_hash, config_hash)
    return EXIT_OK


def _cmd_zeroshot(cfg: dict) -> int:
    _require(cfg, "zeroshot", "train")
    params, dims, predicate_vocab, object_vocab, table, test_records = _prepare_eval(cfg, "zeroshot")
    train_records = load_annotations(_input_path(cfg, "train"), predicate_vocab, object_vocab)
    zero_shot = derive_zero_shot_split(train_records, test_records)
    ks = _positive_ks(cfg)
    mode = Task(cfg["mode"])
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    config_hash = _echo_config(cfg, "zeroshot", outdir)
    ckpt_hash = _file_sha256(Path(cfg["checkpoint"]))

    reports = []
    if mode is Task.PREDICATE:
        pooled = {r.image_id: inference.gt_pair_items(r, params, table, object_vocab)
                  for r in test_records}
        per_pair = {r.image_id: inference.predict_for_gt_pairs(r, params, table, object_vocab)
                    for r in test_records}
        gts = {r.image_id: list(r.gt_triplets) for r in test_records}
        zs_types = {t.type_key() for _, t in zero_shot}
        for k in ks:
            reports.append(evaluation.zero_shot_recall(pooled, zero_shot, k, mode,
                                                       vocab=predicate_vocab))
            reports.append(evaluation.predicate_recall_per_pair(
                per_pair, gts, k, vocab=predicate_vocab,
                restrict_types=zs_types, zero_shot=True))
    else:
        predictions = _detector_predictions(test_records, params, table, object_vocab,
                                            max(ks), cfg["det-threshold"])
        for k in ks:
            reports.append(evaluation.zero_shot_recall(predictions, zero_shot, k, mode,
                                                       vocab=predicate_vocab))
    print(f"zero-shot instances: {len(zero_shot)}")
    _write_reports(reports, outdir, f"zero_shot_{mode.value}", None, ckpt_hash, config_hash)
    return EXIT_OK


def _cmd_predict(cfg: dict) -> int:
    params, dims, predicate_vocab, object_vocab, table, records = _prepare_eval(cfg, "predict")
    ks = _positive_ks(cfg)
    predictions = _detector_predictions(records, params, table, object_vocab,
                                        max(ks), cfg["det-threshold"])
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, "predict", outdir)
    out_path = outdir / "predictions.json"
    inference.save_predictions(predictions, out_path)
    total = sum(len(v) for v in predictions.values())
    print(f"wrote {total} predictions for {len(predictions)} images to {out_path}")
    return EXIT_OK


def _cmd_gradcheck(cfg: dict) -> int:
    _require(cfg, "gradcheck", "dims")
    d, h, out = _parse_dims(cfg["dims"])
    dims = brnn.NetworkDims(input_dim=d, hidden_dim=h, output_dim=out)
    error = brnn.grad_check(dims, seed=cfg["seed"], epsilon=cfg["epsilon"])
    print(f"max relative error: {error:.3e} (epsilon {cfg['epsilon']:g}, "
          f"dims {d},{h},{out}, seed {cfg['seed']}, backend {active_backend()})")
    if error < GRADCHECK_TOLERANCE:
        print(f"PASS: below {GRADCHECK_TOLERANCE:g}")
        return EXIT_OK
    print(f"FAIL: not below {GRADCHECK_TOLERANCE:g}")
    return EXIT_DATA


def _cmd_embed(cfg: dict, query: list[str]) -> int:
    _require(cfg, "embed", "embeddings")
    table = _load_table(cfg, None)
    if not query:
        raise UsageError("embed needs a query: vector CLASS | distance A B | analogy A B C")
    op, args = query[0], query[1:]
    oov = cfg["oov"]
    if op == "vector" and len(args) == 1:
        vec = lookup_class_vector(table, args[0], oov_policy=oov)
        norm = float(np.linalg.norm(vec))
        head = " ".join(f"{v:.4f}" for v in vec[:8])
        print(f"{args[0]}: dim {table.dim}, norm {norm:.4f}, first entries {head}")
    elif op == "distance" and len(args) == 2:
        u = lookup_class_vector(table, args[0], oov_policy=oov)
        v = lookup_class_vector(table, args[1], oov_policy=oov)
        print(f"cosine_distance({args[0]}, {args[1]}) = {cosine_distance(u, v):.6f}")
    elif op == "analogy" and len(args) == 3:
        k = max(_positive_ks(cfg)) if "k" in cfg else 5
        results = analogy(table, args[0], args[1], args[2], k=min(k, 10))
        print(f"{args[1]} - {args[0]} + {args[2]} is near:")
        for token, dist in results:
            print(f"  {token}  (distance {dist:.6f})")
    else:
        raise UsageError(f"unknown embed query {' '.join(query)!r}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="relnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name: str, help_text: str, *, query: bool = False) -> None:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--embeddings", help="word-vector file")
        p.add_argument("--train", help="training annotation JSON")
        p.add_argument("--test", help="test annotation JSON")
        p.add_argument("--objects", help="object class vocabulary file")
        p.add_argument("--predicates", help="predicate vocabulary file")
        p.add_argument("--checkpoint", help="model checkpoint JSON")
        p.add_argument("--out", help="output directory (default $RELNET_OUT or ./out)")
        p.add_argument("--seed", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--clip", type=float)
        p.add_argument("--neg-ratio", type=float, dest="neg_ratio")
        p.add_argument("--k", type=int, action="append")
        p.add_argument("--mode", choices=[t.value for t in Task])
        p.add_argument("--det-threshold", type=float, dest="det_threshold")
        p.add_argument("--dims", help="D,H,OUT network widths")
        p.add_argument("--oov", choices=["error", "zero"])
        if query:
            p.add_argument("query", nargs="*", help="vector CLASS | distance A B | analogy A B C")

    add("train", "fit the predicate network on annotated images")
    add("eval", "evaluate Rec@K on a test split")
    add("predict", "dump ranked relationship predictions")
    add("zeroshot", "evaluate on test triplets unseen during training")
    add("gradcheck", "compare analytic gradients against finite differences")
    add("synth", "generate a synthetic world")
    add("embed", "query the embedding space", query=True)
    return parser


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "zeroshot": _cmd_zeroshot,
    "gradcheck": _cmd_gradcheck,
    "synth": _cmd_synth,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        file_cfg = _read_config_file(args.config) if args.config else {}
        cfg = _resolve(args, file_cfg)
        if args.command == "embed":
            return _cmd_embed(cfg, args.query)
        return _COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"relnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RelnetError as exc:
        print(f"relnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, IndexError) as exc:
        print(f"relnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
