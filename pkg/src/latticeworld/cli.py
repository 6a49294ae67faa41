"""``latticeworld`` command line: data generation, training, sampling, enhancement, evaluation.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort. Errors
are reported as one line on stderr: ``latticeworld: error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from .enhancer import EnhanceConfig, EnhancerModel, enhance_world
from .errors import DataError, NumericalAbort
from .flowmodel import ToyDecoders
from .fusion import SamplerConfig, SigmaSchedule, sample_world, sample_world_plain, seed_streams
from .initopt import OptConfig, ground_and_exclusion_target, optimize_initial_latent
from .io import (
    CKPT_DECODERS,
    CKPT_FLOW,
    CKPT_FUSION,
    load_archive,
    load_checkpoint,
    load_segment_map,
    read_label_raster,
    save_archive,
    save_checkpoint,
    write_csv,
    write_ppm,
)
from .lattice import DenseLatentGrid, GridDims, OccupancyField, SparseLatent, extrude_segment_map
from .metrics import isolated_label_reference, normalization_probe, region_fidelity, seam_discontinuity
from .pipeline import (
    DecoderRecipe,
    EnhancerRecipe,
    FlowRecipe,
    train_decoders,
    train_enhancer,
    train_flow_models,
)
from .render import color_volume, side_view, top_view
from .scenes import VoxelScene, gen_synthetic_scenes, initial_decoders, resolve_prompt

log = logging.getLogger("latticeworld")

SCENE_MANIFEST = "scenes.txt"


# --- shared plumbing ----------------------------------------------------------


def _out(cfg) -> Path:
    p = Path(cfg["out_dir"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load(path, kind):
    return load_checkpoint(path, kind)


def _decoders(cfg) -> ToyDecoders:
    return _load(cfg["decoders"], CKPT_DECODERS) if cfg["decoders"] else initial_decoders()


def _sampler(cfg) -> SamplerConfig:
    return SamplerConfig(
        steps=cfg["steps"],
        window_size=cfg["window_size"],
        stride=cfg["stride"] or None,
        kernel_sigma=cfg["kernel_sigma"] or None,
        seed=cfg["seed"],
        sigma_schedule=SigmaSchedule(cfg["sigma_max"]) if cfg["sigma_max"] >= 0 else None,
        threads=cfg["threads"],
        chunk=cfg["chunk"],
    )


def _curve_rows(losses):
    return [(i, float(v)) for i, v in enumerate(losses)]


def load_scenes(data_dir) -> list[VoxelScene]:
    data_dir = Path(data_dir)
    manifest = data_dir / SCENE_MANIFEST
    try:
        lines = manifest.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read scene manifest {manifest}: {e.strerror}") from None
    scenes = []
    for n, line in enumerate(lines, 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise DataError(f"{manifest}:{n}: expected 'index family file'")
        scenes.append(VoxelScene.from_sparse(load_archive(data_dir / parts[2]), parts[1]))
    if not scenes:
        raise DataError(f"no scenes listed in {manifest}")
    return scenes


# --- subcommands ----------------------------------------------------------------


def cmd_gen_data(cfg):
    out = _out(cfg)
    families = [f.strip() for f in cfg["families"].split(",") if f.strip()]
    scenes = gen_synthetic_scenes(families, cfg["count"], cfg["seed"], cfg["scene_size"])
    lines = ["# index family file"]
    for i, sc in enumerate(scenes):
        name = f"scene_{i:04d}.lwvx"
        save_archive(out / name, sc.to_sparse())
        lines.append(f"{i} {sc.family} {name}")
    (out / SCENE_MANIFEST).write_text("\n".join(lines) + "\n")
    log.info("wrote %d scenes", len(scenes))


def cmd_train(cfg):
    out = _out(cfg)
    scenes = load_scenes(cfg["data"])
    stages = [s.strip().upper() for s in cfg["stages"].split(",") if s.strip()]
    if not stages or set(stages) - {"S", "L"}:
        raise C.UsageError(f"stages must be a subset of S,L, got {cfg['stages']!r}")
    recipe = FlowRecipe(cfg["lattice"], cfg["crop"], cfg["per_scene"], cfg["train_steps"], cfg["lr"],
                        cfg["batch"], cfg["sub_crop"], cfg["hidden"], cfg["patch_radius"], cfg["embed_dim"])
    res = train_flow_models(scenes, recipe, cfg["seed"], stages)
    for stage, (model, _, losses) in res.items():
        if not np.isfinite(losses).all():
            raise NumericalAbort(f"stage {stage} training loss became non-finite")
        save_checkpoint(out / f"model_{stage.lower()}.ckpt", model)
        write_csv(out / f"loss_{stage.lower()}.csv", ["step", "loss"], _curve_rows(losses))


def cmd_finetune_decoder(cfg):
    out = _out(cfg)
    scenes = load_scenes(cfg["data"])
    recipe = DecoderRecipe(cfg["lattice"], cfg["crop"], cfg["per_scene"], cfg["train_steps"], cfg["lr"])
    dec, losses = train_decoders(scenes, recipe, cfg["seed"], _decoders(cfg))
    if not np.isfinite(losses).all():
        raise NumericalAbort("decoder loss became non-finite")
    save_checkpoint(out / "decoders.ckpt", dec)
    write_csv(out / "decoder_loss.csv", ["step", "loss"], _curve_rows(losses))


def cmd_finetune_enhancer(cfg):
    out = _out(cfg)
    scenes = load_scenes(cfg["data"])
    base = _load(cfg["model_l"], CKPT_FLOW)
    recipe = EnhancerRecipe(cfg["lattice"], cfg["per_scene"], cfg["min_content"], cfg["train_steps"],
                            cfg["lr"], cfg["batch"])
    model, losses, pairs, skipped = train_enhancer(scenes, base, recipe, cfg["seed"])
    if not np.isfinite(losses).all():
        raise NumericalAbort("enhancer loss became non-finite")
    save_checkpoint(out / "fusion.ckpt", model.fusion)
    write_csv(out / "enhancer_loss.csv", ["step", "loss"], _curve_rows(losses))
    pdir = out / "pairs"
    pdir.mkdir(exist_ok=True)
    lines = ["# pair scene label crop oz oy ox"]
    for i, p in enumerate(pairs):
        save_archive(pdir / f"pair_{i:04d}_parent.lwvx", p.parent)
        for j, ch in enumerate(p.children):
            save_archive(pdir / f"pair_{i:04d}_child{j}.lwvx", ch)
        lines.append(f"{i} {p.scene} {p.label} {p.crop} {p.origin[0]} {p.origin[1]} {p.origin[2]}")
    (pdir / "pairs.txt").write_text("\n".join(lines) + "\n")
    if skipped:
        log.warning("%d requested pairs were skipped (no crop met min_content)", skipped)


def _renders(out, occ: OccupancyField, latent, decoders, size):
    colors = color_volume(occ.active, latent, decoders)
    write_ppm(out / "top.ppm", top_view(occ.active, colors, size))
    write_ppm(out / "side.ppm", side_view(occ.active, colors))


def cmd_sample(cfg):
    out = _out(cfg)
    seg = load_segment_map(cfg["map"], cfg["prompts"])
    dims = GridDims(*C.parse_dims(cfg["dims"]))
    models = (_load(cfg["model_s"], CKPT_FLOW), _load(cfg["model_l"], CKPT_FLOW))
    dec = _decoders(cfg)
    scfg = _sampler(cfg)
    if cfg["sampler"] == "fused":
        occ, latent = sample_world(models, dec, seg, dims, scfg)
    elif cfg["sampler"] == "plain":
        if seg.K != 1:
            raise DataError(f"the plain sampler takes a single-label map, got labels {seg.label_ids}")
        occ, latent = sample_world_plain(models, dec, resolve_prompt(seg.prompts[seg.label_ids[0]]), dims, scfg)
    else:
        raise C.UsageError(f"sampler must be 'fused' or 'plain', got {cfg['sampler']!r}")
    save_archive(out / "world_occ.lwvx", occ)
    save_archive(out / "world_latent.lwvx", latent)
    _renders(out, occ, latent, dec, (seg.height, seg.width))


def cmd_optimize_init(cfg):
    out = _out(cfg)
    model = _load(cfg["model_s"], CKPT_FLOW)
    dims = GridDims(*C.parse_dims(cfg["dims"]))
    cond = resolve_prompt(cfg["prompt"])
    excluded = np.zeros(dims.spatial, bool)
    excluded[cfg["exclude_from"]:] = True
    cons = ground_and_exclusion_target(dims, cfg["ground_height"], excluded)
    ocfg = OptConfig(lr=cfg["opt_lr"], max_steps=cfg["max_steps"], parameterization=cfg["parameterization"],
                     dice_threshold=cfg["dice_threshold"], optimizer=cfg["optimizer"])
    noise = seed_streams(cfg["seed"])[0].standard_normal(dims.spatial + (model.channels,))
    try:
        res = optimize_initial_latent(model, noise, cons, ocfg, cond, _sampler(cfg), _decoders(cfg))
    except NumericalAbort as e:
        if e.result is not None:
            write_csv(out / "init_trace.csv", ["step", "loss", "iou", "dice"], e.result.rows())
        raise
    write_csv(out / "init_trace.csv", ["step", "loss", "iou", "dice"], res.rows())
    save_archive(out / "init_latent.lwvx", res.latent)
    if res.spiked:
        raise NumericalAbort("init-opt loss spiked by more than "
                             f"{ocfg.spike_factor:g}x between consecutive steps (trace written)")


def _label_fn(cfg):
    if cfg["map"] and cfg["prompts"]:
        seg = load_segment_map(cfg["map"], cfg["prompts"])
        conds = {lab: resolve_prompt(seg.prompts[lab]) for lab in seg.label_ids}

        def fn(frac):
            iy = min(int(frac[1] * seg.height), seg.height - 1)
            ix = min(int(frac[2] * seg.width), seg.width - 1)
            return conds[int(seg.labels[iy, ix])]

        return fn
    return resolve_prompt(cfg["prompt"])


def cmd_enhance(cfg):
    out = _out(cfg)
    world = load_archive(cfg["world"])
    if not isinstance(world, SparseLatent):
        raise DataError("enhance needs a sparse appearance latent archive")
    model = EnhancerModel(_load(cfg["model_l"], CKPT_FLOW), _load(cfg["fusion"], CKPT_FUSION))
    if model.fusion.c != model.base.channels or world.dims.c != model.base.channels:
        raise DataError("world, base model and mixing layer disagree on the channel count")
    res = enhance_world(model, world, cfg["levels"], EnhanceConfig(cfg["steps"], cfg["seed"]),
                        _label_fn(cfg), cfg["tile"])
    save_archive(out / "enhanced.lwvx", res)


def cmd_eval(cfg):
    out = _out(cfg)
    world = load_archive(cfg["world"])
    if isinstance(world, OccupancyField):
        world = DenseLatentGrid(world.values[..., None])
    scfg = _sampler(cfg)
    dims = GridDims(*(world.data.shape[:3] if isinstance(world, DenseLatentGrid) else world.dims.spatial))
    plan = scfg.plan(dims)
    seam = seam_discontinuity(world, plan, cfg["seed"])
    write_csv(out / "seam.csv", ["metric", "value"], seam.csv_rows())
    probes = [("window", normalization_probe(plan, kernel_sigma=scfg.sigma_w))]
    seg = load_segment_map(cfg["map"], cfg["prompts"]) if cfg["map"] and cfg["prompts"] else None
    if seg is not None:
        masks = extrude_segment_map(seg, dims)
        probes.append(("segment", normalization_probe(masks=masks)))
        probes.append(("combined", normalization_probe(plan, masks, scfg.sigma_w)))
    write_csv(out / "probe.csv", ["probe", "max_abs_deviation"], probes)
    for line in seam.lines():
        print(f"seam {line}")
    for name, v in probes:
        print(f"probe {name} {v!r}")
    if seg is not None and cfg["occ"]:
        occ = load_archive(cfg["occ"])
        if not isinstance(occ, OccupancyField):
            raise DataError("occ must be an occupancy archive")
        if not cfg["model_s"]:
            raise C.UsageError("region statistics need model_s for the isolated-label reference")
        model_s = _load(cfg["model_s"], CKPT_FLOW)
        ref = isolated_label_reference(model_s, _decoders(cfg), seg, dims, scfg, statistic=cfg["statistic"])
        latent = world if isinstance(world, SparseLatent) else None
        rep = region_fidelity((occ, latent), masks, ref, cfg["statistic"], seg.label_ids)
        write_csv(out / "region.csv", ["label", "value", "reference", "deviation", "empty"], rep.csv_rows())
        for row in rep.csv_rows():
            print("region " + " ".join(repr(v) if isinstance(v, float) else str(v) for v in row))


def cmd_render(cfg):
    out = _out(cfg)
    occ = load_archive(cfg["occ"])
    if not isinstance(occ, OccupancyField):
        raise DataError("render needs an occupancy archive")
    latent = load_archive(cfg["latent"]) if cfg["latent"] else None
    size = None
    if cfg["size"]:
        h, w = (int(v) for v in cfg["size"].split(","))
        size = (h, w)
    elif cfg["map"]:
        size = read_label_raster(cfg["map"]).shape
    _renders(out, occ, latent, _decoders(cfg) if latent is not None else None, size)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune-decoder": cmd_finetune_decoder,
    "finetune-enhancer": cmd_finetune_enhancer,
    "sample": cmd_sample,
    "optimize-init": cmd_optimize_init,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "render": cmd_render,
}


# --- entry point -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise C.UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latticeworld", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value file")
        for key, default in C.schema(name).items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           help=f"(default: {default!r})")
    return parser


def _setup_logging():
    level = os.environ.get("LATTICEWORLD_LOG", "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        raise C.UsageError(f"LATTICEWORLD_LOG must be a log level name, got {level!r}")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


def run(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise C.UsageError(f"a subcommand is required: {', '.join(COMMANDS)}")
    file_values = C.read_config_file(args.config, args.command) if args.config else {}
    overrides = {k: getattr(args, k) for k in C.schema(args.command)}
    cfg = C.resolve(args.command, file_values, overrides)
    for line in C.format_config(cfg):
        log.info("config %s", line)
    with threadpool_limits(limits=1, user_api="blas"):
        COMMANDS[args.command](cfg)
    return 0


def main(argv=None) -> int:
    kinds = ((C.UsageError, 2, "usage"), (DataError, 3, "data"), (NumericalAbort, 4, "numerical"))
    try:
        return run(argv)
    except tuple(k for k, _, _ in kinds) as e:
        for cls, code, kind in kinds:
            if isinstance(e, cls):
                msg = " ".join(str(e).split())
                print(f"latticeworld: error: {kind}: {msg}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
