"""Command-line entry point: synth, train, eval, ablate, gradcheck, viz.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import data, gradcheck, metrics, plotting, training
from .config import Config
from .errors import BlockFormatError, ConfigError, NumericalError
from .wnet import DTAFormer

log = logging.getLogger("dtaformer")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# ablation variants: name -> config overrides applied on top of the baseline
VARIANTS = {
    "lts=fps": {"model.lts": "fps"},
    "lts=random": {"model.lts": "random"},
    "dta=none": {"model.dta": "none"},
    "dta=knn_mlp": {"model.dta": "knn_mlp"},
    "dta=vca": {"model.dta": "vca"},
    "gfe=off": {"model.gfe": False},
    "gfe.point=off": {"model.gfe.point": False},
    "gfe.channel=off": {"model.gfe.channel": False},
    "itr=trilinear": {"model.itr": "trilinear"},
    "itr=nearest": {"model.itr": "nearest"},
    "arch=unet": {"model.arch": "unet"},
}

MODEL_KEYS_PREFIX = ("model.", "data.channels", "data.class_names")


class UsageError(Exception):
    pass


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_config(args):
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = Config.load(args.config, _overrides(getattr(args, "set", None)))
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _header(cfg):
    lines = [f"# seed = {cfg['seed']}"]
    lines += [f"# {line}" for line in cfg.echo().splitlines()]
    return "\n".join(lines) + "\n"


def _note(cfg):
    return f"seed={cfg['seed']}\n{cfg.echo()}"


def _write_csv(path, cfg, fieldnames, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_header(cfg))
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv(path):
    """Rows of a CSV artifact, skipping ``#`` header lines."""
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _split_dir(cfg, split):
    return Path(cfg["data.root"]) / split


def _load_split(cfg, split):
    d = _split_dir(cfg, split)
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    blocks = data.load_blocks(d, cfg.dataset_spec())
    if not blocks:
        raise UsageError(f"no .blk files in {d}")
    return training.blocks_to_tensors(blocks, cfg["data.normalize"])


def _eval_split(cfg):
    name = cfg["data.eval_split"]
    return name if _split_dir(cfg, name).is_dir() else cfg["data.train_split"]


def build_model(cfg):
    torch.manual_seed(cfg["seed"])
    return DTAFormer(cfg.model_config())


def train_model(cfg, out=None, log_rows=None):
    """Train per ``cfg``; returns (model, optimizer, log rows)."""
    tc = cfg.train_config()
    points, labels = _load_split(cfg, cfg["data.train_split"])
    eval_points, eval_labels = _load_split(cfg, _eval_split(cfg))
    model = build_model(cfg)
    opt = training.make_optimizer(model, tc)
    rows = [] if log_rows is None else log_rows
    k = cfg.dataset_spec().num_classes
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    def on_epoch(epoch, lr, loss):
        cm = training.evaluate(model, eval_points, eval_labels, k, cfg["eval.batch_size"])
        rows.append({"epoch": epoch + 1, "lr": lr, "train_loss": loss,
                     "eval_oa": metrics.overall_accuracy(cm), "eval_miou": metrics.miou(cm),
                     "eval_avg_f1": metrics.average_f1(cm)})
        log.info("epoch %d lr %.5f loss %.5f oa %.2f", epoch + 1, lr, loss, rows[-1]["eval_oa"])
        if out is not None and tc.checkpoint_every > 0 and (epoch + 1) % tc.checkpoint_every == 0:
            training.save_checkpoint(out / "checkpoints" / f"epoch_{epoch + 1:04d}.pt", model, opt,
                                     epoch + 1, cfg["seed"], cfg.echo())

    training.fit(model, opt, points, labels, tc, cfg["seed"], on_epoch=on_epoch)
    return model, opt, rows


LOG_FIELDS = ["epoch", "lr", "train_loss", "eval_oa", "eval_miou", "eval_avg_f1"]


def cmd_train(args):
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    try:
        model, opt, rows = train_model(cfg, out, rows)
    except NumericalError as exc:
        (out / "nan_diagnostic.json").write_text(json.dumps(exc.diagnostic, indent=2))
        print(f"error: {exc}; diagnostic written to {out / 'nan_diagnostic.json'}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if rows:
            _write_csv(out / "log.csv", cfg, LOG_FIELDS, rows)
    training.save_checkpoint(out / "checkpoint.pt", model, opt, cfg["train.epochs"], cfg["seed"],
                             cfg.echo())
    (out / "config.cfg").write_text(cfg.echo(), encoding="utf-8")
    if not args.no_figures:
        (out / "figures").mkdir(exist_ok=True)
        plotting.plot_training_curve(rows, out / "figures" / "training_curve.png", _note(cfg))
    last = rows[-1]
    print(f"trained {cfg['train.epochs']} epochs: loss {last['train_loss']:.5f} "
          f"OA {last['eval_oa']:.2f} mIoU {last['eval_miou']:.2f} avgF1 {last['eval_avg_f1']:.2f}")
    return EXIT_OK


def _restore(checkpoint, config_path=None):
    ck = training.load_checkpoint(checkpoint)
    cfg = Config.from_echo(ck["config_echo"])
    if config_path is not None:
        other = Config.load(config_path)
        diff = [k for k in sorted(cfg) if k.startswith(MODEL_KEYS_PREFIX) and cfg[k] != other[k]]
        if diff:
            raise UsageError(f"checkpoint/config mismatch on: {', '.join(diff)}")
        cfg.update({k: v for k, v in other.items() if not k.startswith(MODEL_KEYS_PREFIX)})
        cfg["seed"] = ck["seed"]
    else:
        cfg = Config.load(None, {k: v for k, v in cfg.items()})
    model = DTAFormer(cfg.model_config())
    try:
        model.load_state_dict(ck["params"])
    except RuntimeError as exc:
        raise UsageError(f"checkpoint does not match model config: {exc}") from None
    model.eval()
    return cfg, model, ck


def cmd_eval(args):
    cfg, model, ck = _restore(args.checkpoint, args.config)
    split = args.split or _eval_split(cfg)
    points, labels = _load_split(cfg, split)
    spec = cfg.dataset_spec()
    cm = training.evaluate(model, points, labels, spec.num_classes, cfg["eval.batch_size"])
    latency = None
    if args.latency_repeats > 0:
        latency = metrics.measure_latency(model, points[:1], args.latency_repeats)
    report = metrics.build_report(cm, spec.class_names, latency, cfg.echo(), ck["seed"])
    report["split"] = split
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_report(report, out / "report.json")
    if not args.no_figures:
        plotting.plot_confusion(cm.counts, spec.class_names, out / "confusion.png", _note(cfg))
    print(f"{split}: OA {report['oa']:.2f} mIoU {report['miou']:.2f} avgF1 {report['avg_f1']:.2f}")
    return EXIT_OK


ABLATION_FIELDS = ["variant", "oa", "miou", "avg_f1", "latency_ms"]


def parse_variants(text):
    if text in (None, "", "all"):
        return list(VARIANTS)
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in names if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {', '.join(bad)}; valid: {', '.join(VARIANTS)}")
    return names


def run_ablation(cfg, variants, latency_repeats=5):
    rows = []
    k = cfg.dataset_spec().num_classes
    for name in ["baseline"] + variants:
        vcfg = Config(cfg)
        vcfg.update(VARIANTS.get(name, {}))
        model, _, _ = train_model(vcfg)
        points, labels = _load_split(vcfg, _eval_split(vcfg))
        cm = training.evaluate(model, points, labels, k, vcfg["eval.batch_size"])
        lat = metrics.measure_latency(model, points[:1], latency_repeats) if latency_repeats > 0 else ""
        rows.append({"variant": name, "oa": metrics.overall_accuracy(cm), "miou": metrics.miou(cm),
                     "avg_f1": metrics.average_f1(cm), "latency_ms": lat})
        log.info("ablation %s: %s", name, rows[-1])
    return rows


def cmd_ablate(args):
    cfg = _load_config(args)
    variants = parse_variants(args.variants)
    if args.epochs is not None:
        cfg["train.epochs"] = args.epochs
    rows = run_ablation(cfg, variants, args.latency_repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ablation.csv", cfg, ABLATION_FIELDS, rows)
    if not args.no_figures:
        plotting.plot_ablation(rows, out / "ablation.png", _note(cfg))
    for r in rows:
        print(f"{r['variant']:<16} OA {r['oa']:6.2f} mIoU {r['miou']:6.2f} avgF1 {r['avg_f1']:6.2f}")
    return EXIT_OK


def cmd_gradcheck(args):
    results = gradcheck.run_suite(args.seed or 0)
    ok = all(r.passed for r in results)
    for r in results:
        print(f"{r.block:<24} grad_rel_err {r.grad_error:.3e} (tol {r.grad_tol:g})  "
              f"forward_err {r.forward_error:.3e} (tol {r.forward_tol:g})  "
              f"{'PASS' if r.passed else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = {"seed": args.seed or 0, "passed": ok, "blocks": [
            {"block": r.block, "max_rel_grad_error": r.grad_error, "grad_tol": r.grad_tol,
             "forward_error": r.forward_error, "forward_tol": r.forward_tol, "passed": bool(r.passed)}
            for r in results]}
        (out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_viz(args):
    cfg, model, ck = _restore(args.checkpoint, args.config)
    if args.block:
        block = data.read_block(args.block, cfg.dataset_spec())
    else:
        d = _split_dir(cfg, args.split or _eval_split(cfg))
        if not d.is_dir():
            raise UsageError(f"data directory not found: {d}")
        blocks = data.load_blocks(d, cfg.dataset_spec())
        if not 0 <= args.index < len(blocks):
            raise UsageError(f"block index {args.index} out of range [0, {len(blocks)})")
        block = blocks[args.index]
    points, labels = training.blocks_to_tensors([block], cfg["data.normalize"])
    with torch.no_grad():
        output = model(points)
    for s, tr in enumerate(output.traces):
        h = tr.selection.count
        if not 0 <= args.query_index < h:
            raise UsageError(f"query index {args.query_index} out of range [0, {h}) for stage {s + 1}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    xyz_all = points[0, :, :3].numpy()
    note = _note(cfg)
    stage_xyz = xyz_all
    for s, tr in enumerate(output.traces, 1):
        n = tr.scores.pi.shape[-1]
        if n != len(stage_xyz):  # U-net: later stages see the previous selection
            prev = output.traces[s - 2].selection
            stage_xyz = prev.coords[0].numpy()
        keep = tr.scores.pi[0].numpy()
        sel = np.zeros(n, dtype=int)
        sel[tr.selection.indices[0].numpy()] = 1
        _write_csv(out / f"keep_stage{s}.csv", cfg, ["index", "x", "y", "z", "keep_prob", "selected"],
                   [{"index": i, "x": float(p[0]), "y": float(p[1]), "z": float(p[2]),
                     "keep_prob": float(keep[i]), "selected": int(sel[i])}
                    for i, p in enumerate(stage_xyz)])
        if not args.no_figures:
            plotting.plot_keep_scores(stage_xyz, keep, sel, out / f"keep_stage{s}.png",
                                      f"stage {s}", note)
        if tr.dta_map is not None:
            row = tr.dta_map.wm[0, args.query_index].numpy()
            q = tr.selection.coords[0, args.query_index].numpy()
            _write_csv(out / f"wca_stage{s}.csv", cfg, ["index", "x", "y", "z", "weight"],
                       [{"index": i, "x": float(p[0]), "y": float(p[1]), "z": float(p[2]),
                         "weight": float(row[i])} for i, p in enumerate(stage_xyz)])
            if not args.no_figures:
                plotting.plot_wca_row(stage_xyz, row, q, out / f"wca_stage{s}.png",
                                      f"stage {s}, query token {args.query_index}", note)
    pred = output.prediction[0].numpy()
    lab = labels[0].numpy()
    _write_csv(out / "prediction.csv", cfg, ["index", "x", "y", "z", "pred", "label"],
               [{"index": i, "x": float(p[0]), "y": float(p[1]), "z": float(p[2]),
                 "pred": int(pred[i]), "label": int(lab[i])} for i, p in enumerate(xyz_all)])
    if not args.no_figures:
        plotting.plot_prediction(xyz_all, pred, lab, out / "prediction.png", note=note)
    print(f"wrote dumps for block {block.block_id} to {out}")
    return EXIT_OK


def cmd_synth(args):
    out = Path(args.out)
    rng_seed = args.seed or 0
    train = data.synth_generate(args.train_blocks, args.points, args.classes, rng_seed,
                                args.channels, args.noise)
    evals = data.synth_generate(args.eval_blocks, args.points, args.classes, rng_seed + 1,
                                args.channels, args.noise) if args.eval_blocks else []
    for split, blocks in (("train", train), ("eval", evals)):
        for b in blocks:
            data.save_block(b, out / split / f"{b.block_id}.blk", args.classes)
    spec = data.synth_spec(args.points, args.channels, args.classes)
    cfg_text = "\n".join([
        f"data.root = {out}",
        f"data.points_per_block = {args.points}",
        f"data.channels = {','.join(spec.channels)}",
        f"data.class_names = {','.join(spec.class_names)}",
        "model.stage1.width = 32",
        "model.stage2.width = 64",
        "train.epochs = 12",
        "train.checkpoint_every = 4",
        f"seed = {rng_seed}",
    ]) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "synth.cfg").write_text(cfg_text, encoding="utf-8")
    print(f"wrote {len(train)} train / {len(evals)} eval blocks to {out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="dtaformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=str, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, required=True)
        sp.add_argument("--no-figures", action="store_true")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint and write report.json")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default=None)
    sp.add_argument("--latency-repeats", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare ablation variants")
    common(sp)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--variants", default="all", help=f"comma list of: {', '.join(VARIANTS)}")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--latency-repeats", type=int, default=5)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference and oracle checks")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", type=str, default=None)
    sp.add_argument("--config", type=str, default=None)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("viz", help="per-point dumps of keep scores, WCA rows, predictions")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--block", default=None, help="path to a .blk file")
    sp.add_argument("--split", default=None)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--query-index", type=int, default=0)
    sp.set_defaults(func=cmd_viz)

    sp = sub.add_parser("synth", help="generate a synthetic labelled corpus")
    common(sp, config=False)
    sp.add_argument("--train-blocks", type=int, default=32)
    sp.add_argument("--eval-blocks", type=int, default=8)
    sp.add_argument("--points", type=int, default=512)
    sp.add_argument("--classes", type=int, default=6)
    sp.add_argument("--channels", type=int, default=6)
    sp.add_argument("--noise", type=float, default=data.DEFAULT_NOISE)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"config error: {exc}{key}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, BlockFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
