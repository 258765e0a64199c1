"""``appt`` command line: gen-data, train, eval, check, inspect-checkpoint.

Exit codes: 0 success, 1 contract/property failure, 2 usage or config
error, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import checkpoint as ck
from . import properties
from .backbone import Backbone, combined_digest
from .config import RunConfig
from .embed import PointEmbedConfig, embed_param_count
from .errors import APPTError, ConfigError, FormatError
from .fileio import atomic_write
from .model import APPTModel, ModelConfig, param_partition, trainable_param_count
from .pointcloud import SHAPE_KINDS, DatasetManifest, format_xyz, gen_synthetic, load_cloud
from .train import EpisodeSpec, GroupedDataset, TrainConfig, evaluate, fit, metrics_csv, run_few_shot

TRAIN_MANIFEST = "train.tsv"
TEST_MANIFEST = "test.tsv"


def _out(text=""):
    print(text, flush=True)


# gen-data -------------------------------------------------------------------

def cmd_gen_data(args):
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if not classes:
        raise ConfigError("no classes given")
    for c in classes:
        if c not in SHAPE_KINDS:
            raise ConfigError(f"unknown class {c!r}; valid kinds: {', '.join(SHAPE_KINDS)}")
    if args.per_class < 2:
        raise ConfigError("--per-class must be at least 2 for a train/test split")
    rng = np.random.default_rng(args.seed)
    train, test = [], []
    for label, kind in enumerate(classes):
        seeds = rng.integers(2 ** 31, size=args.per_class)
        n_test = max(1, round(args.per_class * 0.2))
        test_idx = set(rng.permutation(args.per_class)[:n_test].tolist())
        for i, s in enumerate(seeds):
            cloud = gen_synthetic(kind, args.points, noise_sigma=args.noise, seed=int(s))
            rel = os.path.join(kind, f"{kind}_{i:04d}.xyz")
            atomic_write(os.path.join(args.out, rel), format_xyz(cloud))
            (test if i in test_idx else train).append((rel, label))
    atomic_write(os.path.join(args.out, TRAIN_MANIFEST), DatasetManifest(train, classes, "train").dumps())
    atomic_write(os.path.join(args.out, TEST_MANIFEST), DatasetManifest(test, classes, "test").dumps())
    _out(f"wrote {len(train) + len(test)} clouds to {args.out}: {len(train)} train / {len(test)} test")
    return 0


# data loading ---------------------------------------------------------------

def load_split(data_dir, name, cfg, seed_offset=0):
    path = os.path.join(data_dir, name)
    if not os.path.exists(path):
        raise ConfigError(f"dataset manifest {path} not found")
    manifest = DatasetManifest.load(path)
    clouds = []
    for full, label in manifest.resolve(data_dir):
        cloud = load_cloud(full)
        cloud.label = label
        clouds.append(cloud)
    if not clouds:
        raise ConfigError(f"{path} lists no clouds")
    ds = GroupedDataset.from_clouds(clouds, manifest.classes, cfg["pointcloud.n_groups"], cfg["pointcloud.k"],
                                    seed=cfg["pointcloud.seed"] + seed_offset,
                                    normalize=cfg["pointcloud.normalize"], keep_clouds=cfg["train.augment"])
    return ds


def make_backbone(spec, model_cfg):
    if spec.startswith("random:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad backbone spec {spec!r}; use random:SEED or a checkpoint path") from None
        return Backbone.init_random(model_cfg.backbone, seed=seed)
    if not os.path.exists(spec):
        raise FormatError(f"backbone checkpoint {spec} not found")
    return ck.load_backbone(spec, model_cfg.backbone)


# train ----------------------------------------------------------------------

def _manifest_text(items):
    return "".join(f"{k} = {v}\n" for k, v in items)


def cmd_train(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg.apply_overrides(args.set or [])
    if args.no_prompt:
        cfg.set("model.prompt", False)
    if args.no_posin:
        cfg.set("model.posin", False)
    train_ds = load_split(args.data, TRAIN_MANIFEST, cfg)
    test_path = os.path.join(args.data, TEST_MANIFEST)
    test_ds = load_split(args.data, TEST_MANIFEST, cfg, seed_offset=1) if os.path.exists(test_path) else None
    model_cfg = cfg.model_config(len(train_ds.classes))
    train_cfg = cfg.train_config()
    backbone = make_backbone(args.backbone, model_cfg)
    model = APPTModel(model_cfg, backbone, seed=train_cfg.seed)
    part = param_partition(model)
    digest_before = combined_digest(part.frozen)

    t0 = time.perf_counter()
    history = fit(model, train_ds, train_cfg,
                  on_epoch=lambda m: _out(f"epoch {m['epoch']} step {m['step']} lr {m['lr']:.3e} "
                                          f"loss {m['loss']:.4f} acc {m['accuracy']:.4f}"))
    elapsed = time.perf_counter() - t0
    digest_after = combined_digest(part.frozen)
    held_out = evaluate(model, test_ds).accuracy if test_ds is not None else float("nan")

    os.makedirs(args.out, exist_ok=True)
    ck.save_checkpoint(model.trainable(), os.path.join(args.out, "trainable.ckpt"),
                       {"kind": "trainable", "backbone": args.backbone,
                        **{f"backbone.{k}": v for k, v in model_cfg.backbone.to_dict().items()},
                        "embed.widths": ",".join(map(str, model_cfg.embed.widths)),
                        "n_classes": model_cfg.n_classes})
    atomic_write(os.path.join(args.out, "config.txt"), cfg.dumps())
    atomic_write(os.path.join(args.out, "metrics.csv"), metrics_csv(history))
    final = history[-1] if history else {"accuracy": float("nan"), "epoch": -1}
    atomic_write(os.path.join(args.out, "run_manifest.txt"), _manifest_text([
        ("backbone", args.backbone),
        ("data", os.path.abspath(args.data)),
        ("classes", ",".join(train_ds.classes)),
        ("seed", train_cfg.seed),
        ("pointcloud.seed", cfg["pointcloud.seed"]),
        ("ablation.no_prompt", str(not model_cfg.use_prompt).lower()),
        ("ablation.no_posin", str(not model_cfg.use_posin).lower()),
        ("params.trainable", part.trainable_count),
        ("params.frozen", part.frozen_count),
        ("params.ratio", f"{part.ratio:.6f}"),
        ("frozen_sha256.before", digest_before),
        ("frozen_sha256.after", digest_after),
        ("epochs_run", final["epoch"] + 1),
        ("final_train_accuracy", repr(final["accuracy"])),
        ("held_out_accuracy", repr(held_out)),
        ("wall_seconds", f"{elapsed:.1f}"),
    ]) + "# resolved config\n" + "".join("config." + line for line in cfg.dumps().splitlines(True)))
    _out(f"train accuracy {final['accuracy']:.4f}  held-out accuracy {held_out:.4f}  "
         f"trainable {part.trainable_count:,} / frozen {part.frozen_count:,} ({part.ratio:.2%})")
    return 0


# eval -----------------------------------------------------------------------

def _read_kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out


def load_trained(model_dir):
    for name in ("config.txt", "run_manifest.txt", "trainable.ckpt"):
        if not os.path.exists(os.path.join(model_dir, name)):
            raise FormatError(f"model directory {model_dir} lacks {name}")
    cfg = RunConfig.load(os.path.join(model_dir, "config.txt"))
    run = _read_kv(os.path.join(model_dir, "run_manifest.txt"))
    classes = run["classes"].split(",")
    model_cfg = cfg.model_config(len(classes))
    backbone = make_backbone(run["backbone"], model_cfg)
    model = APPTModel(model_cfg, backbone, seed=cfg["train.seed"])
    ck.load_trainable(os.path.join(model_dir, "trainable.ckpt"), model)
    return model, cfg, classes


def cmd_eval(args):
    model, cfg, classes = load_trained(args.model)
    lines = []
    if args.few_shot:
        try:
            n_way, k_shot = (int(v) for v in args.few_shot.split(","))
        except ValueError:
            raise ConfigError(f"--few-shot expects N,K, got {args.few_shot!r}") from None
        parts = [load_split(args.data, name, cfg, seed_offset=i)
                 for i, name in enumerate((TRAIN_MANIFEST, TEST_MANIFEST))
                 if os.path.exists(os.path.join(args.data, name))]
        pool = GroupedDataset(np.concatenate([p.groups for p in parts]),
                              np.concatenate([p.labels for p in parts]), parts[0].classes)
        spec = EpisodeSpec(n_way, k_shot)
        ep_cfg = TrainConfig(**{**cfg.train_config().to_dict(), "epochs": cfg["fewshot.epochs"]})
        mean, std, accs = run_few_shot(model, pool, spec, ep_cfg, seed=cfg["fewshot.seed"])
        lines.append(f"few-shot {n_way}-way {k_shot}-shot over {spec.repeats} episodes "
                     f"({n_way * spec.queries_per_class} queries each)")
        lines += [f"episode {i} accuracy {a:.4f}" for i, a in enumerate(accs)]
        lines.append(f"accuracy {100 * mean:.2f} +/- {100 * std:.2f}")
        result_name = "few_shot_results.txt"
    else:
        ds = load_split(args.data, TEST_MANIFEST, cfg, seed_offset=1)
        if ds.classes != classes:
            raise ConfigError(f"data classes {ds.classes} do not match model classes {classes}")
        res = evaluate(model, ds)
        lines.append(f"accuracy {res.accuracy:.4f} on {len(ds)} clouds")
        lines += [f"class {c} accuracy {a:.4f}" for c, a in zip(classes, res.per_class)]
        lines.append("confusion (rows: true, columns: predicted)")
        lines += [" ".join(f"{v:4d}" for v in row) for row in res.confusion]
        result_name = "eval_results.txt"
    text = "\n".join(lines) + "\n"
    atomic_write(os.path.join(args.model, result_name), text)
    _out(text.rstrip())
    return 0


# check ----------------------------------------------------------------------

def cmd_check(args):
    t0 = time.perf_counter()
    results, _ = properties.run_suite(args.level, args.seed, corrupt_frozen=args.inject_fault == "frozen")
    for r in results:
        _out(r.line())
    failed = [r.name for r in results if not r.passed]
    _out(f"{len(results) - len(failed)}/{len(results)} properties passed "
         f"({args.level} level, {time.perf_counter() - t0:.1f}s)")
    return 1 if failed else 0


# inspect-checkpoint ---------------------------------------------------------

def cmd_inspect(args):
    if not os.path.exists(args.path):
        raise FormatError(f"{args.path} not found")
    ckpt = ck.read_manifest(args.path)
    meta = ckpt.metadata
    _out(f"{'name':<40} {'shape':<16} {'bytes':>12}")
    total = 0
    for e in ckpt.entries:
        n = int(np.prod(e.shape, dtype=np.int64))
        total += n
        _out(f"{e.name:<40} {'x'.join(map(str, e.shape)) or 'scalar':<16} {e.length:>12,}")
    kind = meta.get("kind", "backbone")
    try:
        bb_cfg = ck.config_from_metadata(meta)
    except APPTError:
        bb_cfg = None
    widths = tuple(int(w) for w in meta["embed.widths"].split(",")) if "embed.widths" in meta else None
    if kind == "trainable":
        trainable = total
        frozen = bb_cfg.param_count() if bb_cfg else 0
    else:
        frozen = total
        if bb_cfg is None:
            raise FormatError("backbone checkpoint metadata lacks the backbone config")
        emb = PointEmbedConfig(d_out=bb_cfg.d, widths=widths) if widths else PointEmbedConfig(d_out=bb_cfg.d)
        n_classes = int(meta.get("n_classes", 15))
        trainable = embed_param_count(emb) + 2 + n_classes * bb_cfg.d
    ratio = trainable / (trainable + frozen) if trainable + frozen else 0.0
    _out(f"tensors {len(ckpt.entries)}  parameters in file {total:,}  kind {kind}")
    _out(f"total {trainable + frozen:,}  frozen {frozen:,}  trainable {trainable:,}")
    _out(f"trainable ratio {ratio:.2%} (reference: fine-tuning 3.8% of parameters, 3.4M trainable at ViT-B)")
    return 0


# entry point ----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="appt", description="Adaptive point-prompt tuning on frozen transformers")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic shape dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--classes", default=",".join(SHAPE_KINDS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--points", type=int, default=RunConfig()["data.points"])
    g.add_argument("--noise", type=float, default=RunConfig()["data.noise"])
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fine-tune embed/prompt/head on a frozen backbone")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--backbone", default="random:0", help="random:SEED or a checkpoint manifest path")
    t.add_argument("--out", required=True)
    t.add_argument("--no-prompt", action="store_true")
    t.add_argument("--no-posin", action="store_true")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model directory")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--few-shot", metavar="N,K")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("check", help="run the property suite")
    c.add_argument("--level", choices=("fast", "full"), default="fast")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--inject-fault", choices=("frozen",), help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_check)

    i = sub.add_parser("inspect-checkpoint", help="print a checkpoint's tensor table and parameter counts")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except APPTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
