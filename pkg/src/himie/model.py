"""Full-model assembly: encoders, level construction, fusion, heads, losses.

Routing per document:
  encode present modalities -> bucket into levels -> construct substitutes for
  the missing modality (learned construction or blank fill) -> bidirectional
  fusion -> task heads.

A document whose mask withholds a modality never touches that modality's
encoder, so those parameters get exactly zero gradient for the step.
Zero-frame documents behave like missing video with nothing to ground.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamTree, Tensor, matmul
from .config import LossConfig, ModelConfig
from .data import Document, Entity, Region, Relation
from .dffm import fuse_g_to_x, fuse_x_to_g, init_dffm, pooled_base_frames
from .encoders import (LevelFeatures, bucket_levels, encode_frames,
                       encode_text, init_frame_encoder, init_text_encoder)
from .heads import (LossParts, TagSet, chain_reprs, compute_losses, crf_decode,
                    decode_chains, entity_reprs, grounding_predict, init_heads,
                    pair_logit_matrix, relation_logit_matrix, spans_from_tags,
                    total_loss)
from .mmcm import (blank_image, blank_text, construct_image_from_text,
                   construct_text_from_image, init_mmcm)


def init_params(cfg: ModelConfig, seed: int) -> ParamTree:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 41)))
    params = ParamTree()
    init_text_encoder(params.scoped("encoder.text"), cfg, rng)
    init_frame_encoder(params.scoped("encoder.frames"), cfg, rng)
    init_dffm(params.scoped("dffm"), cfg, rng)
    init_mmcm(params.scoped("mmcm"), cfg, rng)
    init_heads(params.scoped("heads"), cfg, rng)
    return params


def compute_features(doc: Document, params: ParamTree, cfg: ModelConfig, *,
                     vae_mode: str | None = None, rng=None,
                     kl_acc: list | None = None) -> tuple[Tensor, Tensor | None]:
    """Fused (text [n_x, d_h], frames [n_g, d_h] or None) for one document."""
    use_dffm, use_mmcm = cfg.dffm_enabled, cfg.mmcm_enabled
    vae_mode = cfg.vae_mode if vae_mode is None else vae_mode
    has_text = doc.modality_mask != "no_text"
    has_video = doc.modality_mask != "no_video" and doc.n_frames > 0
    n_g = doc.n_frames
    mm = params.scoped("mmcm")

    text_lv: LevelFeatures | None = None
    img_lv: LevelFeatures | None = None
    if has_text:
        text_lv = bucket_levels(encode_text(doc.tokens, params.scoped("encoder.text"), cfg))
    if has_video:
        img_lv = bucket_levels(encode_frames(doc.frames, params.scoped("encoder.frames"), cfg))

    if text_lv is None:
        if use_mmcm and img_lv is not None:
            text_lv = construct_text_from_image(img_lv.base, mm, cfg, doc.n_tokens)
        else:
            text_lv = blank_text(doc.n_tokens, cfg)
    if img_lv is None and n_g > 0:
        if use_mmcm and has_text:
            img_lv = construct_image_from_text(text_lv.base, mm, cfg, n_g, cfg.n_p)
        else:
            img_lv = blank_image(n_g, cfg.n_p, cfg)

    dffm = params.scoped("dffm")
    if not use_dffm:
        h_text = text_lv.base
        h_frames = pooled_base_frames(img_lv, cfg) if img_lv is not None else None
    elif img_lv is None:
        # nothing on the image side at all: only the base mixing path remains
        h_text = matmul(text_lv.base, dffm["mix.g2x.base"])
        h_frames = None
    else:
        h_text = fuse_g_to_x(text_lv, img_lv, dffm, cfg, vae_mode, rng, kl_acc)
        h_frames = fuse_x_to_g(img_lv, text_lv, dffm, cfg, vae_mode, rng, kl_acc)
    return h_text, h_frames


@dataclass
class ForwardResult:
    h_text: Tensor
    h_frames: Tensor | None
    parts: LossParts
    loss: Tensor


def forward(doc: Document, params: ParamTree, cfg: ModelConfig,
            loss_cfg: LossConfig | None = None, *, rng=None) -> ForwardResult:
    loss_cfg = loss_cfg or LossConfig()
    kl_acc: list | None = [] if cfg.kl_weight > 0 else None
    h_text, h_frames = compute_features(doc, params, cfg, rng=rng, kl_acc=kl_acc)
    tagset = TagSet.for_types(cfg.entity_types)
    parts = compute_losses(doc, h_text, h_frames, params.scoped("heads"), cfg, tagset)
    loss = total_loss(parts, loss_cfg)
    if kl_acc:
        kl = kl_acc[0]
        for term in kl_acc[1:]:
            kl = kl + term
        loss = loss + kl * (cfg.kl_weight / len(kl_acc))
    return ForwardResult(h_text, h_frames, parts, loss)


@dataclass
class Prediction:
    tags: list[int]
    entities: list[Entity]              # decoded spans, the entity-task output
    pair_entities: list[Entity]         # mention universe for coref/relations
    coref_pairs: list[tuple[int, int]]
    chains: list[list[int]]             # partition of pair_entities
    rel_chains: list[list[int]]         # chain universe for relation triples
    relations: list[Relation]
    regions: list[Region]


def predict(doc: Document, params: ParamTree, cfg: ModelConfig, *,
            pair_mode: str = "gold") -> Prediction:
    """Inference pass; `pair_mode` picks the pair universe for coref/relations.

    gold: pairs come from gold entities and gold chains. predicted: pairs come
    from the decoded entity spans and the decoded coreference partition.
    Inference always runs the deterministic latent path.
    """
    if pair_mode not in ("gold", "predicted"):
        raise ValueError(f"unknown pair_mode {pair_mode!r}")
    heads = params.scoped("heads")
    tagset = TagSet.for_types(cfg.entity_types)
    h_text, h_frames = compute_features(doc, params, cfg, vae_mode="mean")

    tags = crf_decode(h_text, heads.scoped("crf"), tagset)
    decoded_entities = spans_from_tags(tags, tagset)

    pair_entities = list(doc.entities) if pair_mode == "gold" else decoded_entities
    pairs = [(i, j) for i in range(len(pair_entities)) for j in range(i + 1, len(pair_entities))]
    positive: list[tuple[int, int]] = []
    if pairs:
        reprs = entity_reprs(h_text, pair_entities)
        logits = pair_logit_matrix(reprs, pairs, heads.scoped("coref")).data
        positive = [p for p, row in zip(pairs, logits) if int(np.argmax(row)) == 1]
    chains = decode_chains(len(pair_entities), positive)

    rel_chains = [list(c) for c in doc.chains] if pair_mode == "gold" else chains
    relations: list[Relation] = []
    cpairs = [(i, j) for i in range(len(rel_chains)) for j in range(len(rel_chains)) if i != j]
    if cpairs:
        reprs = entity_reprs(h_text, pair_entities)
        ch = chain_reprs(reprs, rel_chains)
        logits = relation_logit_matrix(ch, cpairs, heads.scoped("rel")).data
        for (i, j), row in zip(cpairs, logits):
            k = int(np.argmax(row))
            if k != 0:
                relations.append(Relation(i, j, cfg.relation_types[k - 1]))

    regions: list[Region] = []
    if h_frames is not None:
        for r in grounding_predict(h_frames, heads.scoped("gro"), cfg.grounding_types):
            if r is not None:
                regions.append(r)
    return Prediction(tags, decoded_entities, pair_entities, positive, chains,
                      rel_chains, relations, regions)
