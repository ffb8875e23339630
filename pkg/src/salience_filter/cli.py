"""Command-line entry point.

Every subcommand resolves its configuration (defaults, then ``--config``
JSON, then flags), writes it to ``<out>/<command>_config.json``, and writes
nothing outside ``--out``. Exit codes: 0 success, 1 usage error, 2 runtime
error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigurationError
from .filtering import FilterRatios, analytic_cost, measured_keep_ratio, select_queries
from .pipeline import (EncoderModel, SceneConfig, TrainConfig, encode_scene, evaluate_selection_bias,
                       init_coverage, make_corpus, predicted_maps, scene_from_record, scene_targets,
                       train_salience, two_stage_initialize)
from .predictor import PredictorParams

log = logging.getLogger("salience_filter")

DEFAULTS = {
    "seed": 42,
    "image_size": 256,
    "strides": [8, 16, 32, 64],
    "channels": 16,
    "n_scenes": 64,
    "min_objects": 3,
    "max_objects": 6,
    "scale_mix": [1.0, 1.0, 1.0],
    "noise": 0.5,
    "epochs": 50,
    "lr": 2.0,
    "momentum": 0.9,
    "batch_size": 8,
    "lambda_f": 2.0,
    "supervision": "salience",
    "level_ratios": [0.3, 0.5, 0.7, 1.0],
    "layer_ratios": [1.0, 0.6],
    "heads": 4,
    "points": 4,
    "nms_threshold": 0.3,
    "k": 300,
    "embedding": "absolute",
    "redundancy": "on",
    "fusion": "off",
    "fusion_blocks": 1,
    "groups": 8,
    "corpus": None,
    "checkpoint": None,
    "scene_index": 0,
}

CHOICES = {
    "embedding": ("relative", "absolute", "none"),
    "supervision": ("salience", "discrete"),
    "redundancy": ("on", "off"),
    "fusion": ("on", "off"),
}

COMMANDS = ("gen", "train", "select", "cost", "heatmap", "bias-report", "init")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ratios_arg(text):
    try:
        levels, layers = text.split(":")
        return [float(v) for v in levels.split(",")], [float(w) for w in layers.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected v1,v2,...:w1,w2,..., got {text!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with configuration keys")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--ratios", type=_ratios_arg, help="level ratios and layer ratios, e.g. 0.3,0.5,0.7,1:1,0.6")
    common.add_argument("--nms-threshold", dest="nms_threshold", type=float)
    common.add_argument("--embedding", choices=["relative", "absolute", "none"])
    common.add_argument("--supervision", choices=["salience", "discrete"])
    common.add_argument("--redundancy", choices=["on", "off"])
    common.add_argument("--fusion", choices=["on", "off"])
    common.add_argument("--fusion-blocks", dest="fusion_blocks", type=int)
    common.add_argument("--checkpoint", help="trained predictor checkpoint (.bin)")
    common.add_argument("--corpus", help="scene corpus (.jsonl)")
    common.add_argument("--epochs", type=int)
    common.add_argument("--n-scenes", dest="n_scenes", type=int)
    common.add_argument("--k", type=int, help="two-stage queries before redundancy removal")
    common.add_argument("--scene-index", dest="scene_index", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="salience-filter", description="Salience-guided query filtering at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "gen": "write a synthetic scene corpus (corpus.jsonl)",
        "train": "train the salience predictor (checkpoint.bin, loss.csv)",
        "select": "write the filter plan for one scene (plan.json)",
        "cost": "print dense/filtered encoder cost and keep ratios as CSV",
        "heatmap": "write per-level salience heatmaps as PGM",
        "bias-report": "train both supervisions and write per-scale coverage (bias.csv)",
        "init": "write two-stage query proposals for one scene (init.json)",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(args):
    cfg = dict(DEFAULTS)
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in ("seed", "nms_threshold", "embedding", "supervision", "redundancy", "fusion",
                "fusion_blocks", "checkpoint", "corpus", "epochs", "n_scenes", "k", "scene_index"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if args.ratios is not None:
        cfg["level_ratios"], cfg["layer_ratios"] = args.ratios
    for key, allowed in CHOICES.items():
        if cfg[key] not in allowed:
            raise UsageError(f"{key} must be one of {', '.join(allowed)}, got {cfg[key]!r}")
    if len(cfg["level_ratios"]) != len(cfg["strides"]):
        raise UsageError(f"{len(cfg['level_ratios'])} level ratios for {len(cfg['strides'])} levels")
    return cfg


def scene_config(cfg):
    return SceneConfig(image_size=cfg["image_size"], strides=tuple(cfg["strides"]), channels=cfg["channels"],
                       min_objects=cfg["min_objects"], max_objects=cfg["max_objects"],
                       scale_mix=tuple(cfg["scale_mix"]), noise=cfg["noise"])


def train_config(cfg, supervision=None):
    return TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"], momentum=cfg["momentum"],
                       lambda_f=cfg["lambda_f"], supervision=supervision or cfg["supervision"],
                       seed=cfg["seed"], batch_size=cfg["batch_size"])


def ratios(cfg):
    return FilterRatios(cfg["level_ratios"], cfg["layer_ratios"])


def load_corpus(cfg):
    sc = scene_config(cfg)
    if cfg["corpus"]:
        return [scene_from_record(r, sc) for r in io.read_corpus(cfg["corpus"])]
    return make_corpus(cfg["n_scenes"], cfg["seed"], sc)


def load_predictor(cfg):
    levels = len(cfg["strides"])
    if cfg["checkpoint"]:
        arrays = io.load_checkpoint(cfg["checkpoint"])
        params = PredictorParams.init(cfg["channels"], levels)
        for name, tensor in params.named().items():
            if arrays[name].shape != tensor.shape:
                raise ConfigurationError(f"checkpoint {name} has shape {arrays[name].shape}, expected {tensor.shape}")
            tensor.data = arrays[name]
        return params
    log.warning("no checkpoint given; using an untrained predictor")
    return PredictorParams.init(cfg["channels"], levels, rng=np.random.default_rng(cfg["seed"]))


def _pick_scene(cfg):
    corpus = load_corpus(cfg)
    if not 0 <= cfg["scene_index"] < len(corpus):
        raise ConfigurationError(f"scene_index {cfg['scene_index']} outside corpus of {len(corpus)}")
    return corpus[cfg["scene_index"]]


def cmd_gen(cfg, out):
    corpus = make_corpus(cfg["n_scenes"], cfg["seed"], scene_config(cfg))
    io.write_corpus(out / "corpus.jsonl", corpus)


def cmd_train(cfg, out):
    result = train_salience(load_corpus(cfg), train_config(cfg))
    io.save_checkpoint(out / "checkpoint.bin", {k: v.data for k, v in result.params.named().items()})
    with open(out / "loss.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(result.losses):
            fh.write(f"{epoch},{loss!r}\n")
    log.info("initial loss %.6f, final loss %.6f", result.initial_loss, result.final_loss)


def cmd_select(cfg, out):
    scene = _pick_scene(cfg)
    plan = select_queries(predicted_maps(load_predictor(cfg), scene), ratios(cfg))
    (out / "plan.json").write_text(json.dumps(plan.to_json()))


def cmd_cost(cfg, out):
    sc = scene_config(cfg)
    r = ratios(cfg)
    shapes = sc.shapes
    dense, filtered = analytic_cost(shapes, r, cfg["channels"], cfg["heads"], cfg["points"], len(r.layer))
    plan = select_queries([np.zeros(s) for s in shapes], r)
    keep = measured_keep_ratio(plan, cfg["strides"])
    text = ("dense_ops,filtered_ops,counted_keep_ratio,closed_form_keep_ratio\n"
            f"{dense!r},{filtered!r},{keep.counted!r},{keep.closed_form!r}\n")
    (out / "cost.csv").write_text(text)
    sys.stdout.write(text)


def cmd_heatmap(cfg, out):
    scene = _pick_scene(cfg)
    pred = predicted_maps(load_predictor(cfg), scene)
    target = scene_targets(scene, cfg["supervision"])
    for lvl, (p, t) in enumerate(zip(pred, target)):
        # maps are (x, y) indexed; images are (row=y, column=x)
        io.write_pgm(out / f"pred_level{lvl}.pgm", p.T)
        io.write_pgm(out / f"target_level{lvl}.pgm", t.T)


def cmd_bias_report(cfg, out):
    corpus = load_corpus(cfg)
    r = ratios(cfg)
    rows = []
    small = {}
    for sup in ("salience", "discrete"):
        result = train_salience(corpus, train_config(cfg, sup))
        report = evaluate_selection_bias(result.params, corpus, r)
        for cls, vals in report.items():
            rows.append((f"coverage_{sup}", cls, vals["coverage"]))
            rows.append((f"selected_per_object_{sup}", cls, vals["selected_per_object"]))
        small[sup] = report.get("small", {}).get("coverage", float("nan"))
        for flag in (True, False):
            init = init_coverage(result.params, corpus, cfg["k"], cfg["nms_threshold"], flag)
            tag = "on" if flag else "off"
            rows.append((f"init_coverage_{sup}_redundancy_{tag}", "all", init["coverage"]))
            rows.append((f"init_proposals_per_object_{sup}_redundancy_{tag}", "all",
                         init["proposals_per_covered_object"]))
    rows.append(("small_coverage_gap", "small", small["salience"] - small["discrete"]))
    io.write_metrics(out / "bias.csv", rows)


def cmd_init(cfg, out):
    scene = _pick_scene(cfg)
    model = EncoderModel.init(cfg["channels"], len(cfg["strides"]), len(cfg["layer_ratios"]), cfg["heads"],
                              max(max(s) for s in scene.shapes), cfg["fusion_blocks"], cfg["groups"],
                              cfg["seed"], predictor=load_predictor(cfg))
    enc = encode_scene(scene, model, ratios(cfg), cfg["embedding"], cfg["fusion"] == "on")
    picked = two_stage_initialize(enc.queries, enc.salience, cfg["k"], cfg["nms_threshold"],
                                  scene.strides, cfg["redundancy"] == "on")
    payload = [{"level": p.level, "i": p.i, "j": p.j, "score": s} for p, s in picked]
    (out / "init.json").write_text(json.dumps(payload))


HANDLERS = {
    "gen": cmd_gen, "train": cmd_train, "select": cmd_select, "cost": cmd_cost,
    "heatmap": cmd_heatmap, "bias-report": cmd_bias_report, "init": cmd_init,
}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "salience-filter: error: a command is required")
        cfg = resolve_config(args)
    except UsageError as exc:
        msg = str(exc)
        if not msg.startswith("usage:"):
            msg = f"{parser.format_usage()}salience-filter: error: {msg}"
        print(msg, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
        HANDLERS[args.command](cfg, out)
    except Exception as exc:
        log.error("%s failed: %s", args.command, exc)
        return 2
    return 0


def main():
    sys.exit(run())
