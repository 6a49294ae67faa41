"""Default training recipes shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .enhancer import EnhancerModel, build_pairs, finetune_enhancer
from .errors import DataError
from .flowmodel import ToyDecoders, ToyFlowModel, evaluate_flow_loss, finetune_decoder, train_flow_matching
from .scenes import APP_CHANNELS, FAMILIES, STRUCT_CHANNELS, decoder_crops, flow_datasets, initial_decoders

log = logging.getLogger(__name__)


@dataclass
class FlowRecipe:
    lattice: int = 16
    crop: int = 32
    per_scene: int = 6
    steps: int = 2000
    lr: float = 0.05
    batch: int = 4
    sub_crop: int = 8
    hidden: int = 32
    patch_radius: int = 4
    embed_dim: int = 8


@dataclass
class EnhancerRecipe:
    lattice: int = 16
    per_scene: int = 4
    min_content: int = 8
    steps: int = 600
    lr: float = 0.1
    batch: int = 2


@dataclass
class DecoderRecipe:
    lattice: int = 16
    crop: int = 32
    per_scene: int = 4
    steps: int = 500
    lr: float = 0.2


def _streams(seed: int, k: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


def train_flow_models(scenes, recipe: FlowRecipe, seed: int = 0, stages=("S", "L")):
    """Structure (``S``) and appearance (``L``) models trained from fresh initializations.

    Returns ``{stage: (model, initial_model, losses)}``; both stages see the same crops.
    """
    if not scenes:
        raise DataError("no scenes to train on")
    r_data, r_s, r_l, r_init = _streams(seed, 4)
    s_set, l_set = flow_datasets(scenes, recipe.lattice, recipe.crop, recipe.per_scene, r_data)
    init_seeds = r_init.integers(0, 2 ** 31, 2)
    out = {}
    for stage, data, c, rng, iseed in (("S", s_set, STRUCT_CHANNELS, r_s, init_seeds[0]),
                                      ("L", l_set, APP_CHANNELS, r_l, init_seeds[1])):
        if stage not in stages:
            continue
        m0 = ToyFlowModel.create(c, len(FAMILIES), recipe.hidden, recipe.patch_radius, recipe.embed_dim, int(iseed))
        m, losses = train_flow_matching(m0, data, recipe.steps, recipe.lr, rng, crop=recipe.sub_crop,
                                        batch=recipe.batch)
        log.info("stage %s trained: %d steps, last-100 mean loss %.4f", stage, recipe.steps,
                 float(np.nanmean(losses[-100:])) if len(losses) else float("nan"))
        out[stage] = (m, m0, losses)
    return out


def validation_sets(scenes, recipe: FlowRecipe, seed: int = 0):
    return flow_datasets(scenes, recipe.lattice, recipe.crop, 2, np.random.default_rng(seed))


def flow_validation(model, samples) -> float:
    return evaluate_flow_loss(model, samples)


def train_decoders(scenes, recipe: DecoderRecipe, seed: int = 0, start: ToyDecoders | None = None):
    r_data, r_opt = _streams(seed, 2)
    crops = decoder_crops(scenes, recipe.lattice, recipe.crop, recipe.per_scene, r_data)
    return finetune_decoder(start or initial_decoders(), crops, recipe.steps, recipe.lr, r_opt)


def train_enhancer(scenes, base: ToyFlowModel, recipe: EnhancerRecipe, seed: int = 0):
    """Returns ``(EnhancerModel, losses, pairs, skipped)``."""
    r_pairs, r_opt = _streams(seed, 2)
    pairs, skipped = build_pairs(scenes, recipe.lattice, per_scene=recipe.per_scene,
                                 min_content=recipe.min_content, rng=r_pairs)
    if not pairs:
        raise DataError("no enhancer pairs could be built from the scenes")
    model, losses = finetune_enhancer(EnhancerModel.create(base), pairs, recipe.steps, recipe.lr, r_opt,
                                      batch=recipe.batch)
    return model, losses, pairs, skipped
