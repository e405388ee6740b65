# app.py (command-line entry point)
import argparse
import logging
import os
import sys
from dataclasses import asdict, replace
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from dotenv import load_dotenv
from PIL import Image
from torch.utils.data import DataLoader, Subset

import config
from config import ConfigError, RunConfig, apply_overrides, load_config, write_config
from evaluation import evaluate, generate, miou
from networks.discriminator import UNetDiscriminator, parameter_report
from networks.generator import Generator, sample_noise
from networks.segmenter import load_segmenter, save_segmenter, train_segmenter
from scene_data import (
    ProceduralScenes, SceneDataError, SceneFolder, class_color, default_meta, default_spec,
    image_to_uint8, one_hot, save_dataset,
)
from trainer import build_state, fit, load_checkpoint, save_checkpoint
import variants

load_dotenv()
log = logging.getLogger(__name__)

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage problems are user errors (exit 1), not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


# ===== images =====
def colorize(label: np.ndarray) -> np.ndarray:
    """(H,W) class indices -> (H,W,3) uint8 palette image."""
    lut = np.stack([image_to_uint8(class_color(c)[:, None, None])[0, 0] for c in range(int(label.max()) + 1)])
    return lut[label]


def save_image_grid(images: torch.Tensor, path: str, labels: Optional[torch.Tensor] = None) -> None:
    """Row of images in [-1,1]; with `labels`, a palette row is stacked above."""
    tiles = [image_to_uint8(im.numpy()) for im in images.detach().cpu()]
    grid = np.concatenate(tiles, axis=1)
    if labels is not None:
        grid = np.concatenate([np.concatenate([colorize(l.numpy()) for l in labels.cpu()], axis=1), grid], axis=0)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(grid).save(path)


def save_image(image: torch.Tensor, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(image_to_uint8(image.detach().cpu().numpy())).save(path)


# ===== config plumbing =====
def _kv(pairs: Optional[Sequence[str]]) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def run_config(args) -> RunConfig:
    """defaults < --config file < --set key=value < explicit flags."""
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = apply_overrides(cfg, _kv(getattr(args, "set", None)))
    flags = {k: getattr(args, k, None) for k in ("data", "out", "steps", "seed", "segmenter")}
    cfg = apply_overrides(cfg, {k: v for k, v in flags.items() if v is not None})
    cfg.validate()
    return cfg


def _dataset(cfg: RunConfig) -> SceneFolder:
    if not os.path.isdir(cfg.data):
        raise ConfigError(f"dataset directory not found: {cfg.data}")
    ds = SceneFolder(cfg.data)
    if ds.meta.num_classes != cfg.num_classes or ds.meta.height != cfg.resolution:
        raise ConfigError(
            f"dataset {cfg.data} has {ds.meta.num_classes} classes at {ds.meta.height}px; "
            f"config says num_classes={cfg.num_classes}, resolution={cfg.resolution}"
        )
    return ds


def _stack(ds, count: int):
    idx = list(range(min(count, len(ds))))
    labels, images = zip(*(ds[i] for i in idx))
    return torch.stack(labels), torch.stack(images)


# ===== commands =====
def cmd_generate_data(args) -> int:
    meta = default_meta(args.resolution, args.num_classes)
    spec = default_spec(meta, args.seed)
    loader = DataLoader(ProceduralScenes(spec, args.count), batch_size=None, num_workers=args.workers)
    scenes = ((label.numpy().astype(np.uint8), image.numpy()) for label, image in loader)
    n = save_dataset(args.out, meta, scenes)
    print(f"wrote {n} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = run_config(args)
    ds = _dataset(cfg)
    write_config(cfg, os.path.join(cfg.out, "run.cfg"))
    tcfg = cfg.train_config()
    state = load_checkpoint(args.resume, tcfg) if args.resume else build_state(tcfg)
    grid_labels, _ = _stack(ds, cfg.grid_size)
    segmenter = None
    if cfg.eval_every:
        segmenter = load_segmenter(cfg.segmenter, cfg.num_classes)
        eval_labels, eval_images = _stack(ds, cfg.eval_count)

    def on_step(st, report):
        if cfg.grid_every and st.step % cfg.grid_every == 0:
            fake = generate(st.G_ema.eval(), grid_labels, seed=0, z_mode=cfg.z_mode)
            save_image_grid(fake, os.path.join(cfg.out, "grids", f"step_{st.step:06d}.png"), grid_labels)
        if cfg.ckpt_every and st.step % cfg.ckpt_every == 0:
            save_checkpoint(st, os.path.join(cfg.out, "checkpoint.dpgk"))
        if segmenter is not None and st.step % cfg.eval_every == 0:
            rep = evaluate(st.G_ema, eval_labels, eval_images, segmenter, ds.meta, seeds=(0,), scales=(1.0,),
                           z_mode=cfg.z_mode)
            rep.write(os.path.join(cfg.out, "eval", f"step_{st.step:06d}"))

    start = state.step
    remaining = max(0, cfg.steps - start)
    log.info("training %d steps (from step %d) on %d scenes", remaining, start, len(ds))
    fit(state, ds, remaining, log_every=cfg.log_every, on_step=on_step, progress=args.progress)
    save_checkpoint(state, os.path.join(cfg.out, "checkpoint.dpgk"))
    # history only holds the steps run in this process
    steps = pd.RangeIndex(start, start + len(state.history), name="step")
    pd.DataFrame([r.as_dict() for r in state.history], index=steps).to_csv(os.path.join(cfg.out, "losses.csv"))
    print(f"trained to step {state.step}; outputs in {cfg.out}")
    return EXIT_OK


def cmd_synthesize(args) -> int:
    state = load_checkpoint(args.checkpoint)
    G = (state.G if args.no_ema else state.G_ema).eval()
    with Image.open(args.label) as im:
        label = torch.from_numpy(np.asarray(im, dtype=np.uint8).astype(np.int64))
    r = G.resolution
    if label.dim() != 2 or tuple(label.shape) != (r, r):
        raise SceneDataError(f"{args.label}: expected a single-channel {r}x{r} label PNG, got {tuple(label.shape)}")
    z = sample_noise(args.seed, state.cfg.z_mode, 1, G.z_dim, r)
    with torch.no_grad():
        image = G(one_hot(label[None], G.num_classes), z)[0]
    save_image(image, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    cfg = apply_overrides(RunConfig(**asdict(state.cfg)), {k: v for k, v in vars(args).items()
                                                         if k in ("data", "out", "segmenter") and v is not None})
    if args.count:
        cfg = replace(cfg, eval_count=args.count)
    ds = _dataset(cfg)
    write_config(cfg, os.path.join(cfg.out, "run.cfg"))
    labels, images = _stack(ds, cfg.eval_count)
    segmenter = load_segmenter(cfg.segmenter, cfg.num_classes)
    report = evaluate(state.G_ema, labels, images, segmenter, ds.meta, seeds=tuple(range(args.seeds)),
                      z_mode=cfg.z_mode)
    report.write(cfg.out)
    sys.stdout.write(report.to_lines())
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = run_config(args)
    ds = _dataset(base)
    write_config(base, os.path.join(base.out, "run.cfg"))
    segmenter = load_segmenter(base.segmenter, base.num_classes)
    labels, images = _stack(ds, base.eval_count)
    rows = []
    for variant in variants.plan(args.variant or []):
        for seed in range(args.seeds):
            tcfg = variant.apply(replace(base.train_config(), seed=seed))
            log.info("ablation %s seed %d", variant.key, seed)
            state = build_state(tcfg)
            fit(state, ds, tcfg.steps, log_every=base.log_every, progress=args.progress)
            rep = evaluate(state.G_ema, labels, images, segmenter, ds.meta, seeds=(0,), scales=(1.0,),
                           z_mode=tcfg.z_mode)
            rows.append({"variant": variant.key, "seed": seed, "toy_fid": rep.toy_fid, "miou": rep.miou,
                         "obj_fid_small": rep.obj_fid.get("small", float("nan"))})
    df = pd.DataFrame(rows)
    med = df.groupby("variant", sort=False)[["toy_fid", "miou", "obj_fid_small"]].median().reset_index()
    med["seed"] = "median"
    table = pd.concat([df, med[df.columns]], ignore_index=True)
    table.to_csv(os.path.join(base.out, "ablation.csv"), index=False)
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_report_params(args) -> int:
    cfg = run_config(args)
    with torch.device("meta"):
        for kind in config.GEN_VARIANTS:
            c = replace(cfg.train_config(), gen=kind, dis=kind)
            print(f"G[{kind}]={parameter_report(Generator(c))}")
            print(f"D[{kind}]={parameter_report(UNetDiscriminator(c))}")
    return EXIT_OK


def cmd_fit_segmenter(args) -> int:
    ds = SceneFolder(args.data)
    n_hold = max(1, len(ds) // 10)
    train_ds = Subset(ds, range(len(ds) - n_hold))
    model = train_segmenter(train_ds, ds.meta.num_classes, epochs=args.epochs, seed=args.seed,
                            progress=args.progress)
    labels, images = zip(*(ds[i] for i in range(len(ds) - n_hold, len(ds))))
    held, _ = miou(model.predict(torch.stack(images)), torch.stack(labels), ds.meta.num_classes)
    log.info("segmenter held-out mIoU %.3f on %d scenes", held, n_hold)
    save_segmenter(model, args.out)
    print(f"wrote {args.out} (held-out mIoU {held:.3f})")
    return EXIT_OK


# ===== parser =====
def _train_flags(p) -> None:
    p.add_argument("--config", help="key=value run config (e.g. a previous run.cfg)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--segmenter")
    p.add_argument("--progress", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpgan", description="desk-scale dual-pyramid semantic image synthesis")
    parser.add_argument("--log-level", default=config.LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render procedural scenes to a directory")
    p.add_argument("--out", default=config.DATA_ROOT)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--size", "--resolution", dest="resolution", type=int, default=64)
    p.add_argument("--classes", "--num-classes", dest="num_classes", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=0)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a generator/discriminator pair")
    _train_flags(p)
    p.add_argument("--resume", help="DPGK checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="label PNG in, image PNG out")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--label", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-ema", action="store_true")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("eval", help="compute metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--out", default="runs/eval")
    p.add_argument("--segmenter")
    p.add_argument("--count", type=int)
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="matched-step training of variants against dp-dp")
    _train_flags(p)
    p.add_argument("--variant", action="append", choices=variants.keys())
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report-params", help="parameter counts for dp and oa networks")
    _train_flags(p)
    p.set_defaults(func=cmd_report_params)

    p = sub.add_parser("fit-segmenter", help="train the frozen evaluation segmenter")
    p.add_argument("--data", default=config.DATA_ROOT)
    p.add_argument("--out", default=config.SEGMENTER_PATH)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_fit_segmenter)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        log.exception("%s failed", args.command)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
