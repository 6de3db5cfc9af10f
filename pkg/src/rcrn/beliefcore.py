"""Primitive reasoning modules operating on correspondence beliefs.

Each function here is one step of the explainable program: ``Sim``,
``GateSum``, ``Select``, ``Aggregate``, ``GateProd`` and ``Classify``.
Beliefs are 1-D tensors paired with the proposal ids they are indexed by.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionMismatch, IndexSetMismatch

EPS = 1e-8

SIGNED_TO_UNIT = "signed_to_unit"
UNIT = "unit"


@dataclass(frozen=True, eq=False)
class Belief:
    values: torch.Tensor
    ids: tuple[int, ...]

    def __post_init__(self):
        if self.values.dim() != 1 or self.values.shape[0] != len(self.ids):
            raise IndexSetMismatch(f"{tuple(self.values.shape)} values for {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise IndexSetMismatch("index map is not injective")

    def __len__(self) -> int:
        return len(self.ids)

    def restrict(self, ids: Sequence[int]) -> "Belief":
        pos = {pid: k for k, pid in enumerate(self.ids)}
        idx = torch.tensor([pos[i] for i in ids], dtype=torch.long)
        return Belief(self.values.index_select(0, idx), tuple(ids))


@dataclass(frozen=True, eq=False)
class RelationAlignment:
    """``matrix[k, l]``: similarity of a relation phrase to proposal pair (row k, col l)."""

    matrix: torch.Tensor
    row_ids: tuple[int, ...]
    col_ids: tuple[int, ...]

    def __post_init__(self):
        if tuple(self.matrix.shape) != (len(self.row_ids), len(self.col_ids)):
            raise IndexSetMismatch(
                f"matrix {tuple(self.matrix.shape)} vs index sets {len(self.row_ids)}x{len(self.col_ids)}")

    def transpose(self) -> "RelationAlignment":
        return RelationAlignment(self.matrix.t(), self.col_ids, self.row_ids)


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class FeatureTransform(nn.Module):
    """L2-normalised MLP output; the zero vector maps to the zero vector."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.net = mlp(in_dim, hidden, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(x), dim=-1, eps=EPS)


class EntitySimilarity(nn.Module):
    """Vector similarity between two features of the same space, in [-1, 1]."""

    def __init__(self, in_dim: int, trf_hidden: int, trf_dim: int, sim_dim: int):
        super().__init__()
        self.trf = FeatureTransform(in_dim, trf_hidden, trf_dim)
        self.w_sim = nn.Linear(trf_dim, sim_dim, bias=False)
        self.w_eval = nn.Linear(sim_dim, 1, bias=False)

    def forward(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return self.compare(self.trf(x), self.trf(y))

    def compare(self, tx: torch.Tensor, ty: torch.Tensor) -> torch.Tensor:
        # elementwise squared difference, then a normalised projection
        u = self.w_sim((tx - ty).pow(2))
        u = u / (u.norm(dim=-1, keepdim=True) + EPS)
        return torch.tanh(self.w_eval(F.relu(u))).squeeze(-1)

    def pairwise(self, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
        """``[n, d] x [m, d] -> [n, m]``."""
        tx, ty = self.trf(xs), self.trf(ys)
        return self.compare(tx[:, None, :], ty[None, :, :])


class RelationSimilarity(nn.Module):
    """Rectified cosine similarity after a shared feature transform, in [0, 1]."""

    def __init__(self, in_dim: int, trf_hidden: int, trf_dim: int):
        super().__init__()
        self.trf = FeatureTransform(in_dim, trf_hidden, trf_dim)

    def forward(self, r_lang: torch.Tensor, r_vis: torch.Tensor) -> torch.Tensor:
        return F.relu((self.trf(r_lang) * self.trf(r_vis)).sum(-1))


def sim_ent(x: torch.Tensor, y: torch.Tensor, module: EntitySimilarity) -> torch.Tensor:
    if x.shape[-1] != y.shape[-1] or x.shape[-1] != module.trf.in_dim:
        raise DimensionMismatch(f"{x.shape[-1]} vs {y.shape[-1]} (expects {module.trf.in_dim})")
    return module(x, y)


def sim_rel(r_lang: torch.Tensor, r_vis: torch.Tensor, module: RelationSimilarity) -> torch.Tensor:
    if r_lang.shape[-1] != r_vis.shape[-1] or r_lang.shape[-1] != module.trf.in_dim:
        raise DimensionMismatch(f"{r_lang.shape[-1]} vs {r_vis.shape[-1]} (expects {module.trf.in_dim})")
    return module(r_lang, r_vis)


def f_trf(x: torch.Tensor, module: FeatureTransform) -> torch.Tensor:
    return module(x)


def f_norm(values: torch.Tensor, mode: str = UNIT) -> torch.Tensor:
    """Shrink by the max magnitude when it exceeds 1; ``signed_to_unit``
    then maps [-1, 1] onto [0, 1]."""
    if values.numel():
        scale = values.abs().max().clamp(min=1.0)
        values = values / scale
    if mode == SIGNED_TO_UNIT:
        return (values + 1.0) / 2.0
    if mode != UNIT:
        raise ValueError(f"unknown normalisation mode {mode!r}")
    return values


def sorted_summary(values: torch.Tensor, k: int) -> torch.Tensor:
    """Descending sort fitted to length ``k`` by zero-padding or truncation."""
    v = torch.sort(values, descending=True).values[:k]
    if v.shape[0] < k:
        v = torch.cat([v, v.new_zeros(k - v.shape[0])])
    return v


def gate_input(h: torch.Tensor, b_app: torch.Tensor, b_pos: torch.Tensor, k: int) -> torch.Tensor:
    """Gate features ``[h, b_app, b_pos]``; beliefs enter as sorted top-k
    summaries so the gate size does not depend on the proposal count.
    Gradients into the gate inputs are cut."""
    return torch.cat([h, sorted_summary(b_app, k), sorted_summary(b_pos, k)]).detach()


def gate_sum(parts: Sequence[tuple[torch.Tensor, Belief]], gates: Sequence[nn.Module],
             betas: Sequence[torch.Tensor] | None = None) -> Belief:
    """``F_norm(sum_t sigmoid(W_t^T v_t) * b_t)`` on the signed-to-unit path.

    ``betas`` bypasses the gate networks (program replay)."""
    ids = parts[0][1].ids
    for _, b in parts:
        if b.ids != ids:
            raise IndexSetMismatch("GateSum inputs have different index sets")
    if betas is None:
        betas = gate_betas(parts, gates)
    total = sum(beta * b.values for beta, (_, b) in zip(betas, parts))
    return Belief(f_norm(total, SIGNED_TO_UNIT), ids)


def gate_betas(parts: Sequence[tuple[torch.Tensor, Belief]], gates: Sequence[nn.Module]) -> list[torch.Tensor]:
    return [torch.sigmoid(g(v.detach())).squeeze(-1) for (v, _), g in zip(parts, gates)]


def select_topk(b: Belief, k: int) -> Belief:
    """Keep the ``k`` largest entries (ties to the lower proposal id);
    survivors stay in their original order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(b) <= k:
        return b
    vals = b.values.detach().tolist()
    ranked = sorted(range(len(vals)), key=lambda p: (-vals[p], b.ids[p]))
    keep = sorted(ranked[:k])
    idx = torch.tensor(keep, dtype=torch.long)
    return Belief(b.values.index_select(0, idx), tuple(b.ids[p] for p in keep))


def aggregate(children: Sequence[tuple[RelationAlignment, Belief]]) -> Belief:
    """Soft AND of relation-routed child messages, ``prod_j A_j b_j``,
    accumulated as a sum of floored logs."""
    if not children:
        raise ValueError("aggregate needs at least one child")
    row_ids = children[0][0].row_ids
    log_total = None
    for a, b in children:
        if a.col_ids != b.ids:
            raise IndexSetMismatch(f"alignment columns {a.col_ids} vs child ids {b.ids}")
        if a.row_ids != row_ids:
            raise IndexSetMismatch("children disagree on the parent index set")
        # contiguous elementwise reduction keeps the summation order reproducible
        msg = torch.log((a.matrix.contiguous() * b.values).sum(-1).clamp(min=EPS))
        log_total = msg if log_total is None else log_total + msg
    return Belief(torch.exp(log_total), row_ids)


def gate_prod(b_loc: Belief, b_agg: Belief, gate_in: torch.Tensor | None, w_rel: nn.Module | None,
              beta: torch.Tensor | None = None) -> Belief:
    """``F_norm(b_loc * b_agg ** beta)`` with ``beta = sigmoid(W_rel^T gate_in)``;
    the power is taken in log space."""
    if b_loc.ids != b_agg.ids:
        raise IndexSetMismatch(f"local ids {b_loc.ids} vs aggregated ids {b_agg.ids}")
    if beta is None:
        beta = torch.sigmoid(w_rel(gate_in.detach())).squeeze(-1)
    powered = torch.exp(beta * torch.log(b_agg.values.clamp(min=EPS)))
    return Belief(f_norm(b_loc.values * powered, UNIT), b_loc.ids)


class Classifier(nn.Module):
    """Match confidence from the sorted, fixed-length belief profile."""

    def __init__(self, k: int, hidden: int = 32, zero_init: bool = False):
        super().__init__()
        self.k = k
        self.net = mlp(k, hidden, 1)
        if zero_init:
            nn.init.zeros_(self.net[2].weight)
            nn.init.zeros_(self.net[2].bias)

    def logit(self, values: torch.Tensor) -> torch.Tensor:
        return self.net(sorted_summary(values, self.k)).squeeze(-1)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logit(values))

    def forward_many(self, values: Sequence[torch.Tensor]) -> torch.Tensor:
        """Confidences for several beliefs with a single network call."""
        summaries = torch.stack([sorted_summary(v, self.k) for v in values])
        return torch.sigmoid(self.net(summaries).squeeze(-1))


def classify(b: Belief, classifier: Classifier) -> torch.Tensor:
    return classifier(b.values)
