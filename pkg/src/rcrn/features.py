"""Candidate representations for phrase nodes and visual proposals.

Token-level vectors come from a pluggable encoder: either a trainable
embedding table with a shared mixing layer, or precomputed arrays loaded
from an ``.npz`` file.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pack_sequence, pad_packed_sequence

from .errors import DegenerateBox, DimensionMismatch, EmptyPhrase
from .graphs import LanguageSceneGraph, VisualScene, location_vector, relative_spatial
from .sample import Sample


@dataclass(frozen=True, eq=False)
class TokenEncoding:
    words: torch.Tensor  # [N_w, d]
    objects: torch.Tensor  # [N_o, d]


class EmbeddingTokenEncoder(nn.Module):
    def __init__(self, vocab: Sequence[str], dim: int, obj_dim: int):
        super().__init__()
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.dim = dim
        self.embed = nn.Embedding(len(self.vocab), dim)
        self.obj_proj = nn.Linear(obj_dim, dim)
        self.mix = nn.Linear(dim, dim)

    def token_ids(self, tokens: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.index.get(t, 0) for t in tokens], dtype=torch.long)

    def forward(self, sample: Sample) -> TokenEncoding:
        return self.encode_batch([sample])[0]

    def encode_batch(self, samples: Sequence[Sample]) -> list[TokenEncoding]:
        """One embedding and projection call for all samples."""
        dtype = self.mix.weight.dtype
        ids = self.token_ids([t for s in samples for t in s.tokens])
        feats = torch.as_tensor(np.concatenate([s.scene.feats() for s in samples]), dtype=dtype)
        words = torch.tanh(self.mix(self.embed(ids)))
        objects = torch.tanh(self.mix(self.obj_proj(feats)))
        w_split = words.split([len(s.tokens) for s in samples])
        o_split = objects.split([s.scene.num_proposals for s in samples])
        return [TokenEncoding(w, o) for w, o in zip(w_split, o_split)]


class FileTokenEncoder(nn.Module):
    """Token and object vectors precomputed elsewhere, keyed ``<sample id>/words``
    and ``<sample id>/objects`` in an ``.npz`` archive."""

    def __init__(self, path: str | Path, dim: int):
        super().__init__()
        self.dim = dim
        self.path = Path(path)
        with np.load(self.path) as data:
            self.arrays = {k: np.asarray(data[k], dtype=np.float32 if data[k].dtype != np.float64 else np.float64)
                           for k in data.files}
        for key, arr in self.arrays.items():
            if arr.ndim != 2 or (arr.shape[0] and arr.shape[1] != dim):
                raise DimensionMismatch(f"{key}: shape {arr.shape}, expected (*, {dim})")

    def encode_batch(self, samples: Sequence[Sample]) -> list[TokenEncoding]:
        return [self(s) for s in samples]

    def forward(self, sample: Sample) -> TokenEncoding:
        words = self.arrays[f"{sample.id}/words"]
        objects = self.arrays[f"{sample.id}/objects"]
        if words.shape[0] != len(sample.tokens) or objects.shape[0] != sample.scene.num_proposals:
            raise DimensionMismatch(f"{sample.id}: precomputed arrays do not cover the sample")
        return TokenEncoding(torch.from_numpy(words), torch.from_numpy(objects))


def save_token_features(path: str | Path, encodings: dict[str, TokenEncoding]) -> None:
    arrays = {}
    for sid, enc in encodings.items():
        arrays[f"{sid}/words"] = enc.words.detach().cpu().numpy()
        arrays[f"{sid}/objects"] = enc.objects.detach().cpu().numpy()
    np.savez(path, **arrays)


def encode_tokens(sample: Sample, encoder: nn.Module) -> TokenEncoding:
    enc = encoder(sample)
    if enc.words.shape[0] and enc.words.shape[-1] != encoder.dim:
        raise DimensionMismatch(f"word vectors have dim {enc.words.shape[-1]}, expected {encoder.dim}")
    return enc


def phrase_attention(words: torch.Tensor, hidden: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """Word vectors pooled with softmax weights scored from the hidden states."""
    if words.shape[0] == 0:
        raise EmptyPhrase("cannot attend over an empty phrase")
    if words.shape[0] != hidden.shape[0]:
        raise DimensionMismatch(f"{words.shape[0]} words vs {hidden.shape[0]} hidden states")
    weights = torch.softmax(head(hidden).squeeze(-1), dim=0)
    return weights @ words


def masked_attention(words: torch.Tensor, hidden: torch.Tensor, mask: torch.Tensor, head: nn.Module) -> torch.Tensor:
    """``phrase_attention`` over a padded batch ``[P, L, *]`` with a boolean
    validity mask ``[P, L]``."""
    scores = head(hidden).squeeze(-1).masked_fill(~mask, float("-inf"))
    weights = torch.softmax(scores, dim=1)
    return torch.bmm(weights.unsqueeze(1), words).squeeze(1)


def attention_weights(hidden: torch.Tensor, head: nn.Module) -> torch.Tensor:
    return torch.softmax(head(hidden).squeeze(-1), dim=0)


class PhraseEncoder(nn.Module):
    """Bi-LSTM over phrase words with app / pos / spo attention heads."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        if hidden % 2:
            raise ValueError("hidden size must be even (two directions)")
        self.hidden = hidden
        self.lstm = nn.LSTM(dim, hidden // 2, batch_first=True, bidirectional=True)
        self.app = nn.Linear(hidden, 1)
        self.pos = nn.Linear(hidden, 1)
        self.spo = nn.Linear(hidden, 1)
        self.pos_proj = nn.Linear(dim, 5)

    def run(self, phrases: Sequence[torch.Tensor]) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Per-phrase hidden states and the concatenated final states ``[n, hidden]``."""
        for p in phrases:
            if p.shape[0] == 0:
                raise EmptyPhrase("phrase has no words")
        packed = pack_sequence(list(phrases), enforce_sorted=False)
        out, (h_n, _) = self.lstm(packed)
        padded, lengths = pad_packed_sequence(out, batch_first=True)
        states = [padded[i, : lengths[i]] for i in range(len(phrases))]
        last = torch.cat([h_n[0], h_n[1]], dim=-1)
        return states, last

    def run_padded(self, words: torch.Tensor, lengths: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded hidden states ``[P, L, hidden]`` and final states ``[P, hidden]``."""
        if min(lengths) == 0:
            raise EmptyPhrase("phrase has no words")
        packed = pack_padded_sequence(words, torch.as_tensor(list(lengths)), batch_first=True, enforce_sorted=False)
        out, (h_n, _) = self.lstm(packed)
        padded, _ = pad_packed_sequence(out, batch_first=True, total_length=words.shape[1])
        return padded, torch.cat([h_n[0], h_n[1]], dim=-1)


class VisualRelation(nn.Module):
    """``r^o_kl = [W_l^T s_kl, W_e^T [o_k, o_l]]``, ``dim`` wide in total."""

    def __init__(self, dim: int):
        super().__init__()
        self.w_l = nn.Linear(5, dim // 2, bias=False)
        self.w_e = nn.Linear(2 * dim, dim - dim // 2, bias=False)

    def forward(self, o_k: torch.Tensor, o_l: torch.Tensor, s_kl: torch.Tensor) -> torch.Tensor:
        return torch.cat([self.w_l(s_kl), self.w_e(torch.cat([o_k, o_l], dim=-1))], dim=-1)


def pairwise_spatial(boxes: np.ndarray) -> np.ndarray:
    """``relative_spatial`` for all ordered box pairs, ``[N, N, 5]``."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if np.any(boxes[:, 2] <= 0) or np.any(boxes[:, 3] <= 0):
        raise DegenerateBox("proposal with zero extent")
    x, y, w, h = (boxes[:, k] for k in range(4))
    xc, yc = x + w / 2, y + h / 2
    wi, hi = w[:, None], h[:, None]
    return np.stack([
        (x[None, :] - xc[:, None]) / wi,
        (y[None, :] - yc[:, None]) / hi,
        (x[None, :] + w[None, :] - xc[:, None]) / wi,
        (y[None, :] + h[None, :] - yc[:, None]) / hi,
        (w * h)[None, :] / (wi * hi),
    ], axis=-1)


def visual_relation_feature(o_i: torch.Tensor, o_j: torch.Tensor, box_i, box_j, module: VisualRelation) -> torch.Tensor:
    s = torch.as_tensor(relative_spatial(box_i, box_j), dtype=o_i.dtype)
    return module(o_i, o_j, s)


@dataclass(eq=False)
class CandidateFeatures:
    entity_ids: tuple[int, ...]
    ent_app: torch.Tensor  # [N_e, d]
    ent_loc: torch.Tensor  # [N_e, 5]
    ent_h: torch.Tensor  # [N_e, h]
    relation_ids: tuple[int, ...]
    rel_lang: torch.Tensor  # [N_r, d]
    objects: torch.Tensor  # [N_o, d]
    obj_loc: torch.Tensor  # [N_o, 5]
    boxes: np.ndarray  # [N_o, 4]
    proposal_ids: tuple[int, ...]
    _spatial: torch.Tensor | None = field(default=None, repr=False)
    _alignments: torch.Tensor | None = field(default=None, repr=False)

    def entity_row(self, eid: int) -> int:
        return self.entity_ids.index(eid)

    def relation_row(self, rid: int) -> int:
        return self.relation_ids.index(rid)

    def spatial(self, rows: Sequence[int], cols: Sequence[int]) -> torch.Tensor:
        """Relative spatial features ``[len(rows), len(cols), 5]`` by proposal position."""
        if self._spatial is None:
            self._spatial = torch.as_tensor(pairwise_spatial(self.boxes), dtype=self.objects.dtype)
        return self._spatial[list(rows)][:, list(cols)]

    def visual_relations(self, rows: Sequence[int], cols: Sequence[int], module: VisualRelation) -> torch.Tensor:
        """``r^o`` for every (row, col) proposal pair, computed on demand."""
        rk = torch.as_tensor(list(rows), dtype=torch.long)
        cl = torch.as_tensor(list(cols), dtype=torch.long)
        o_k = self.objects.index_select(0, rk)[:, None, :].expand(len(rows), len(cols), -1)
        o_l = self.objects.index_select(0, cl)[None, :, :].expand(len(rows), len(cols), -1)
        return module(o_k, o_l, self.spatial(rows, cols))

    def relation_alignments(self, vis_rel: VisualRelation, sim_rel) -> torch.Tensor:
        """``[N_r, N_o, N_o]`` similarity of every relation phrase to every
        ordered proposal pair; computed once per feature set and sliced by
        the propagation passes."""
        if self._alignments is None:
            allp = range(len(self.proposal_ids))
            t_vis = sim_rel.trf(self.visual_relations(allp, allp, vis_rel))
            t_lang = sim_rel.trf(self.rel_lang)
            self._alignments = torch.relu((t_lang[:, None, None, :] * t_vis[None]).sum(-1))
        return self._alignments


def attach_relation_alignments(features: Sequence[CandidateFeatures], vis_rel: VisualRelation, sim_rel) -> None:
    """Fill the alignment cache of several feature sets with one padded
    computation over all samples."""
    if not features:
        return
    width = max(len(f.proposal_ids) for f in features)
    dtype = features[0].objects.dtype
    objs, spatial, owner = [], [], []
    for n, f in enumerate(features):
        n_o = len(f.proposal_ids)
        objs.append(torch.nn.functional.pad(f.objects, (0, 0, 0, width - n_o)))
        sp = np.zeros((width, width, 5))
        sp[:n_o, :n_o] = pairwise_spatial(f.boxes)
        spatial.append(sp)
        owner.extend([n] * len(f.relation_ids))
    o = torch.stack(objs)
    o_k = o[:, :, None, :].expand(-1, width, width, -1)
    o_l = o[:, None, :, :].expand(-1, width, width, -1)
    t_vis = sim_rel.trf(vis_rel(o_k, o_l, torch.as_tensor(np.stack(spatial), dtype=dtype)))
    if owner:
        t_lang = sim_rel.trf(torch.cat([f.rel_lang for f in features]))
        full = torch.relu((t_lang[:, None, None, :] * t_vis[torch.as_tensor(owner)]).sum(-1))
    r0 = 0
    for f in features:
        n_o, n_r = len(f.proposal_ids), len(f.relation_ids)
        f._alignments = full[r0:r0 + n_r, :n_o, :n_o] if n_r else t_vis.new_zeros((0, n_o, n_o))
        r0 += n_r


def _span_indices(span: tuple[int, int] | None, label: str, offset: int) -> list[int]:
    if span is None:
        raise EmptyPhrase(f"{label} has no token span")
    if span[1] <= span[0]:
        raise EmptyPhrase(f"{label} has no words")
    return list(range(offset + span[0], offset + span[1]))


def build_candidate_features_batch(items: Sequence[tuple[LanguageSceneGraph, VisualScene, TokenEncoding]],
                                   encoder: PhraseEncoder) -> list[CandidateFeatures]:
    """Candidate features for several samples: all phrases of all samples go
    through one padded LSTM call and one call per attention head."""
    ent_idx, rel_idx = [], []
    offset = 0
    for graph, _, enc in items:
        n_w = enc.words.shape[0]
        for e in graph.entities:
            if e.span is not None and e.span[1] > n_w:
                raise DimensionMismatch(f"entity {e.id} span exceeds {n_w} tokens")
            ent_idx.append(_span_indices(e.span, f"entity {e.id}", offset))
        for r in graph.relations:
            rel_idx.append(
                _span_indices(graph.entity(r.sub).span, f"entity {r.sub}", offset)
                + _span_indices(r.span, f"relation {r.id}", offset)
                + _span_indices(graph.entity(r.obj).span, f"entity {r.obj}", offset))
        offset += n_w
    all_words = torch.cat([enc.words for _, _, enc in items])
    phrases = ent_idx + rel_idx
    n_ent = len(ent_idx)
    lengths = [len(p) for p in phrases]
    width = max(lengths)
    gather = torch.as_tensor([p + [0] * (width - len(p)) for p in phrases], dtype=torch.long)
    mask = torch.arange(width)[None, :] < torch.as_tensor(lengths)[:, None]
    words = all_words[gather] * mask.unsqueeze(-1).to(all_words.dtype)
    states, last = encoder.run_padded(words, lengths)

    ent_app = masked_attention(words[:n_ent], states[:n_ent], mask[:n_ent], encoder.app)
    ent_loc = encoder.pos_proj(masked_attention(words[:n_ent], states[:n_ent], mask[:n_ent], encoder.pos))
    ent_h = last[:n_ent]
    rel_lang = masked_attention(words[n_ent:], states[n_ent:], mask[n_ent:], encoder.spo) if rel_idx else None

    out = []
    e0 = r0 = 0
    for graph, scene, enc in items:
        ne, nr = graph.num_entities, graph.num_relations
        d = enc.objects.shape[-1]
        boxes = scene.boxes()
        out.append(CandidateFeatures(
            entity_ids=tuple(e.id for e in graph.entities),
            ent_app=ent_app[e0:e0 + ne],
            ent_loc=ent_loc[e0:e0 + ne],
            ent_h=ent_h[e0:e0 + ne],
            relation_ids=tuple(r.id for r in graph.relations),
            rel_lang=rel_lang[r0:r0 + nr] if nr else enc.objects.new_zeros((0, d)),
            objects=enc.objects,
            obj_loc=torch.as_tensor(np.stack([location_vector(b) for b in boxes]), dtype=enc.objects.dtype),
            boxes=boxes,
            proposal_ids=tuple(pr.id for pr in scene.proposals),
        ))
        e0, r0 = e0 + ne, r0 + nr
    return out


def build_candidate_features(graph: LanguageSceneGraph, scene: VisualScene, encoding: TokenEncoding,
                             encoder: PhraseEncoder) -> CandidateFeatures:
    return build_candidate_features_batch([(graph, scene, encoding)], encoder)[0]
