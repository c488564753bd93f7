"""Task heads over the fused features and the training loss assembly.

Entity head: linear emissions into a linear-chain CRF (transition matrix plus
start/end scores, log-space forward algorithm, Viterbi decode with lowest-
index tie-break, BIO repair on the decoded tags).

Coreference: a binary classifier on the Hadamard product of the two mentions'
mean-pooled span representations; chains are the union-find closure of the
positive pairs. Relations: a (n_rel + 1)-way classifier (index 0 = NULL) on
the Hadamard product of chain representations over all ordered chain pairs.
Grounding, per frame: type logits over NONE + groundable types and a sigmoid
(cx, cy, w, h) box.

Every loss component is a mean over its own count; zero-count components
contribute exactly 0 to the weighted total.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, index_rows, logsumexp, matmul,
                       reshape, sigmoid, stack, tabs, tmean, tsum)
from .config import LossConfig, ModelConfig
from .data import Document, Entity, Region, Relation


# -- BIO tag set ----------------------------------------------------------


@dataclass(frozen=True)
class TagSet:
    tags: tuple[str, ...]

    @classmethod
    def for_types(cls, entity_types) -> "TagSet":
        tags = ["O"]
        for t in entity_types:
            tags.extend((f"B-{t}", f"I-{t}"))
        return cls(tuple(tags))

    def __len__(self) -> int:
        return len(self.tags)

    def index(self, tag: str) -> int:
        return self.tags.index(tag)

    def begin(self, etype: str) -> int:
        return self.index(f"B-{etype}")

    def inside(self, etype: str) -> int:
        return self.index(f"I-{etype}")

    def type_of(self, idx: int) -> str | None:
        tag = self.tags[idx]
        return None if tag == "O" else tag[2:]

    def is_begin(self, idx: int) -> bool:
        return self.tags[idx].startswith("B-")

    def is_inside(self, idx: int) -> bool:
        return self.tags[idx].startswith("I-")


def gold_tag_ids(doc: Document, tagset: TagSet) -> np.ndarray:
    ids = np.zeros(doc.n_tokens, dtype=np.intp)
    for e in doc.entities:
        ids[e.start] = tagset.begin(e.type)
        for t in range(e.start + 1, e.end):
            ids[t] = tagset.inside(e.type)
    return ids


def check_bio(ids, tagset: TagSet) -> None:
    prev_type = None
    for i, t in enumerate(ids):
        t = int(t)
        if tagset.is_inside(t):
            if prev_type != tagset.type_of(t):
                raise ValueError(f"invalid BIO sequence: {tagset.tags[t]} at {i} "
                                 f"does not continue a {tagset.type_of(t)} span")
        prev_type = tagset.type_of(t)


def repair_bio(ids, tagset: TagSet) -> list[int]:
    """Orphan I-t becomes B-t; everything else passes through."""
    out = []
    prev_type = None
    for t in ids:
        t = int(t)
        if tagset.is_inside(t) and prev_type != tagset.type_of(t):
            t = tagset.begin(tagset.type_of(t))
        out.append(t)
        prev_type = tagset.type_of(t)
    return out


def spans_from_tags(ids, tagset: TagSet) -> list[Entity]:
    ents = []
    start, etype = None, None
    for i, t in enumerate(list(ids) + [0]):
        t = int(t)
        cont = etype is not None and tagset.is_inside(t) and tagset.type_of(t) == etype
        if cont:
            continue
        if etype is not None:
            ents.append(Entity(start, i, etype))
            start, etype = None, None
        if t != 0 and tagset.is_begin(t):
            start, etype = i, tagset.type_of(t)
    return ents


# -- parameter initialization ----------------------------------------------


def init_heads(scope, cfg: ModelConfig, rng) -> None:
    tagset = TagSet.for_types(cfg.entity_types)
    l_ent = len(tagset)
    d = cfg.d_h
    s = 1.0 / np.sqrt(d)
    crf = scope.scoped("crf")
    crf.add("emission", rng.normal(size=(d, l_ent)) * s)
    crf.add("trans", np.zeros((l_ent, l_ent)))
    crf.add("start", np.zeros(l_ent))
    crf.add("end", np.zeros(l_ent))
    co = scope.scoped("coref")
    co.add("w", rng.normal(size=(d, 2)) * s)
    co.add("b", np.zeros(2))
    rel = scope.scoped("rel")
    rel.add("w", rng.normal(size=(d, len(cfg.relation_types) + 1)) * s)
    rel.add("b", np.zeros(len(cfg.relation_types) + 1))
    gro = scope.scoped("gro")
    gro.add("type.w", rng.normal(size=(d, len(cfg.grounding_types) + 1)) * s)
    gro.add("type.b", np.zeros(len(cfg.grounding_types) + 1))
    gro.add("box.w", rng.normal(size=(d, 4)) * s)
    gro.add("box.b", np.zeros(4))


# -- CRF --------------------------------------------------------------------


def crf_scores(h_text: Tensor, scope) -> Tensor:
    return matmul(h_text, scope["emission"])


def crf_nll(h_text: Tensor, gold_ids, scope, tagset: TagSet) -> Tensor:
    """Sequence negative log-likelihood: log Z - score(gold)."""
    gold_ids = np.asarray(gold_ids, dtype=np.intp)
    check_bio(gold_ids, tagset)
    emis = crf_scores(h_text, scope)
    L = emis.data.shape[0]
    trans, start, end = scope["trans"], scope["start"], scope["end"]

    score = tsum(emis[np.arange(L), gold_ids]) + start[int(gold_ids[0])] + end[int(gold_ids[-1])]
    if L > 1:
        score = score + tsum(trans[gold_ids[:-1], gold_ids[1:]])

    alpha = add(emis[0], start)
    for t in range(1, L):
        prev = reshape(alpha, (len(tagset.tags), 1))
        alpha = add(logsumexp(add(prev, trans), axis=0), emis[t])
    log_z = logsumexp(add(alpha, end), axis=0)
    return log_z - score


def crf_log_z_bruteforce(emis: np.ndarray, trans: np.ndarray, start: np.ndarray,
                         end: np.ndarray) -> float:
    """Enumeration reference for small instances (used by tests and tools)."""
    L, K = emis.shape
    scores = []
    idx = np.zeros(L, dtype=int)
    while True:
        s = start[idx[0]] + end[idx[-1]] + emis[np.arange(L), idx].sum()
        s += trans[idx[:-1], idx[1:]].sum() if L > 1 else 0.0
        scores.append(s)
        k = L - 1
        while k >= 0:
            idx[k] += 1
            if idx[k] < K:
                break
            idx[k] = 0
            k -= 1
        if k < 0:
            break
    m = max(scores)
    return m + np.log(np.sum(np.exp(np.array(scores) - m)))


def crf_decode(h_text, scope, tagset: TagSet) -> list[int]:
    """Viterbi with lowest-index tie-break, then BIO repair."""
    h = h_text.data if isinstance(h_text, Tensor) else np.asarray(h_text)
    emis = h @ scope["emission"].data
    trans = scope["trans"].data
    start = scope["start"].data
    end = scope["end"].data
    L, K = emis.shape
    delta = start + emis[0]
    back = np.zeros((L, K), dtype=np.intp)
    for t in range(1, L):
        cand = delta[:, None] + trans  # [from, to]
        back[t] = np.argmax(cand, axis=0)  # first max = lowest from-index
        delta = cand[back[t], np.arange(K)] + emis[t]
    last = int(np.argmax(delta + end))
    path = [last]
    for t in range(L - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    path.reverse()
    return repair_bio(path, tagset)


# -- pair heads ---------------------------------------------------------------


def span_repr(h_text: Tensor, entity: Entity) -> Tensor:
    return tmean(h_text[entity.start:entity.end], axis=0)


def entity_reprs(h_text: Tensor, entities) -> Tensor:
    if not entities:
        return Tensor(np.zeros((0, h_text.data.shape[1])))
    return stack([span_repr(h_text, e) for e in entities], axis=0)


def chain_reprs(ent_reprs: Tensor, chains) -> Tensor:
    return stack([tmean(index_rows(ent_reprs, np.asarray(c, dtype=np.intp)), axis=0)
                  for c in chains], axis=0)


def coref_logits(h_text: Tensor, a: Entity, b: Entity, scope) -> Tensor:
    """Pair logits [2]; index 1 = same chain."""
    feat = span_repr(h_text, a) * span_repr(h_text, b)
    return add(matmul(reshape(feat, (1, -1)), scope["w"]), scope["b"])[0]


def pair_logit_matrix(ent_reprs: Tensor, pairs, scope) -> Tensor:
    ai = np.array([p[0] for p in pairs], dtype=np.intp)
    bi = np.array([p[1] for p in pairs], dtype=np.intp)
    feats = index_rows(ent_reprs, ai) * index_rows(ent_reprs, bi)
    return add(matmul(feats, scope["w"]), scope["b"])


def decode_chains(n_entities: int, positive_pairs) -> list[list[int]]:
    """Union-find closure; chains ordered by smallest member, members sorted."""
    parent = list(range(n_entities))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in positive_pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(n_entities):
        groups.setdefault(find(i), []).append(i)
    return [sorted(groups[r]) for r in sorted(groups)]


def relation_logit_matrix(ch_reprs: Tensor, pairs, scope) -> Tensor:
    ai = np.array([p[0] for p in pairs], dtype=np.intp)
    bi = np.array([p[1] for p in pairs], dtype=np.intp)
    feats = index_rows(ch_reprs, ai) * index_rows(ch_reprs, bi)
    return add(matmul(feats, scope["w"]), scope["b"])


def relation_logits(h_text: Tensor, doc: Document, sub: int, obj: int, scope) -> Tensor:
    reprs = entity_reprs(h_text, doc.entities)
    ch = chain_reprs(reprs, [doc.chains[sub], doc.chains[obj]])
    return relation_logit_matrix(ch, [(0, 1)], scope)[0]


def grounding_logits(h_frames: Tensor, scope) -> tuple[Tensor, Tensor]:
    """(type logits [n_g, n_types+1], box sigmoid [n_g, 4])."""
    t = add(matmul(h_frames, scope["type.w"]), scope["type.b"])
    b = sigmoid(add(matmul(h_frames, scope["box.w"]), scope["box.b"]))
    return t, b


def grounding_predict(h_frames: Tensor, scope, grounding_types) -> list[Region | None]:
    t_logits, boxes = grounding_logits(h_frames, scope)
    out = []
    for i in range(t_logits.data.shape[0]):
        k = int(np.argmax(t_logits.data[i]))  # ties -> lowest index = NONE
        if k == 0:
            out.append(None)
        else:
            cx, cy, w, h = boxes.data[i]
            out.append(Region(i, grounding_types[k - 1], float(cx), float(cy),
                              float(w), float(h)))
    return out


# -- losses -------------------------------------------------------------------


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=np.intp)
    n = logits.data.shape[0]
    nll = logsumexp(logits, axis=-1) - logits[np.arange(n), targets]
    return tmean(nll)


@dataclass
class LossParts:
    """Per-component (value, count); value is None when count is 0."""
    ent: tuple[Tensor | None, int]
    cha: tuple[Tensor | None, int]
    rel: tuple[Tensor | None, int]
    gro_t: tuple[Tensor | None, int]
    gro_b: tuple[Tensor | None, int]

    def named(self):
        return {"ent": self.ent, "cha": self.cha, "rel": self.rel,
                "gro_t": self.gro_t, "gro_b": self.gro_b}


def compute_losses(doc: Document, h_text: Tensor, h_frames: Tensor | None,
                   scope, cfg: ModelConfig, tagset: TagSet) -> LossParts:
    # entity: CRF sequence NLL, a mean over the token count
    gold = gold_tag_ids(doc, tagset)
    ent = (crf_nll(h_text, gold, scope.scoped("crf"), tagset) * (1.0 / doc.n_tokens),
           doc.n_tokens)

    # coreference over all unordered gold entity pairs
    n_e = len(doc.entities)
    pairs = [(i, j) for i in range(n_e) for j in range(i + 1, n_e)]
    if pairs:
        reprs = entity_reprs(h_text, doc.entities)
        chain_of = doc.chain_of()
        labels = [1 if chain_of[a] == chain_of[b] else 0 for a, b in pairs]
        logits = pair_logit_matrix(reprs, pairs, scope.scoped("coref"))
        cha = (cross_entropy_mean(logits, labels), len(pairs))
    else:
        reprs = entity_reprs(h_text, doc.entities)
        cha = (None, 0)

    # relations over all ordered gold chain pairs (NULL = 0)
    n_c = len(doc.chains)
    cpairs = [(i, j) for i in range(n_c) for j in range(n_c) if i != j]
    if cpairs:
        rel_of: dict[tuple[int, int], list[int]] = {}
        rtype_index = {t: k + 1 for k, t in enumerate(cfg.relation_types)}
        for r in doc.relations:
            rel_of.setdefault((r.sub, r.obj), []).append(rtype_index[r.type])
        ch = chain_reprs(reprs, doc.chains)
        sample_pairs, targets = [], []
        for p in cpairs:
            golds = rel_of.get(p, [0])
            for t in golds:
                sample_pairs.append(p)
                targets.append(t)
        logits = relation_logit_matrix(ch, sample_pairs, scope.scoped("rel"))
        rel = (cross_entropy_mean(logits, targets), len(sample_pairs))
    else:
        rel = (None, 0)

    # grounding: type CE on every frame (NONE when unannotated), box MAE on
    # annotated frames only
    if h_frames is not None and doc.n_frames > 0:
        t_logits, boxes = grounding_logits(h_frames, scope.scoped("gro"))
        gtype_index = {t: k + 1 for k, t in enumerate(cfg.grounding_types)}
        targets = np.zeros(doc.n_frames, dtype=np.intp)
        gold_boxes = {}
        for rg in doc.regions:
            targets[rg.frame] = gtype_index[rg.type]
            gold_boxes[rg.frame] = rg.box()
        gro_t = (cross_entropy_mean(t_logits, targets), doc.n_frames)
        if gold_boxes:
            frames = sorted(gold_boxes)
            pred = index_rows(boxes, np.array(frames, dtype=np.intp))
            gold_arr = Tensor(np.array([gold_boxes[f] for f in frames]))
            gro_b = (tmean(tabs(pred - gold_arr)), len(frames))
        else:
            gro_b = (None, 0)
    else:
        gro_t = (None, 0)
        gro_b = (None, 0)

    return LossParts(ent, cha, rel, gro_t, gro_b)


def total_loss(parts: LossParts, alphas: LossConfig) -> Tensor:
    weights = {"ent": alphas.alpha_ent, "cha": alphas.alpha_cha,
               "rel": alphas.alpha_rel, "gro_t": alphas.alpha_gro_t,
               "gro_b": alphas.alpha_gro_b}
    total = Tensor(0.0)
    for name, (value, count) in parts.named().items():
        if count > 0 and value is not None:
            total = total + value * weights[name]
    return total
