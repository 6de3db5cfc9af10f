"""Bi-directional belief propagation over the language scene graph.

A single sweep per direction: bottom-up (leaves to root, context = children)
and top-down (root to leaves, context = parent). The grounding pass keeps
full-resolution beliefs and only prunes incoming messages; the matching pass
restricts every node to its own top-K proposals and scores each node with
the match classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import torch

from .beliefcore import (
    UNIT,
    Belief,
    RelationAlignment,
    aggregate,
    f_norm,
    gate_prod,
    gate_sum,
    select_topk,
)
from .features import CandidateFeatures
from .graphs import LanguageSceneGraph

BP, TD = "bp", "td"
GROUNDING, MATCHING = "grounding", "matching"


@dataclass(frozen=True)
class PropagationConfig:
    task: str
    k: int = 5
    directions: tuple[str, ...] = (BP,)
    message_passing: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.task == GROUNDING and self.directions != (BP,):
            raise ValueError("grounding propagates bottom-up only")
        if self.task == MATCHING and self.directions != (BP, TD):
            raise ValueError("matching propagates in both directions")

    @classmethod
    def grounding(cls, k: int = 5, message_passing: bool = True) -> "PropagationConfig":
        return cls(GROUNDING, k, (BP,), message_passing)

    @classmethod
    def matching(cls, k: int = 5, message_passing: bool = True) -> "PropagationConfig":
        return cls(MATCHING, k, (BP, TD), message_passing)


@dataclass(eq=False)
class LocalBeliefs:
    b_app: dict[int, Belief]
    b_pos: dict[int, Belief]
    gate_in: dict[int, torch.Tensor]
    b_loc: dict[int, Belief]


@dataclass(eq=False)
class PropagationResult:
    config: PropagationConfig
    local: dict[int, Belief]
    beliefs: dict[str, dict[int, Belief]]
    confidences: dict[str, dict[int, torch.Tensor]] = field(default_factory=dict)
    alignments: dict[str, dict[int, RelationAlignment]] = field(default_factory=dict)

    def root_belief(self, graph: LanguageSceneGraph) -> Belief:
        return self.beliefs[BP][graph.root]


class ProgramTrace:
    """Ordered record of module invocations, replayable from its literals."""

    def __init__(self):
        self.steps: list[dict[str, Any]] = []

    def add(self, module: str, target: str, inputs: dict[str, Any], output: Any, **meta) -> int:
        self.steps.append({"step": len(self.steps), "module": module, "target": target,
                           "inputs": inputs, "output": output, **meta})
        return len(self.steps) - 1

    def to_json(self) -> list[dict[str, Any]]:
        return self.steps

    @classmethod
    def from_json(cls, steps: list[dict[str, Any]]) -> "ProgramTrace":
        t = cls()
        t.steps = list(steps)
        return t


def _belief_json(b: Belief) -> dict[str, Any]:
    return {"ids": list(b.ids), "values": b.values.detach().tolist()}


def local_beliefs(features: CandidateFeatures, model, gate_memo: dict | None = None,
                  trace: ProgramTrace | None = None, refs: dict | None = None) -> LocalBeliefs:
    """Appearance and location similarities fused by ``GateSum`` per entity.

    ``gate_memo`` pins gate inputs across calls (finite-difference checks);
    ``refs`` collects trace step indices for downstream references.
    """
    return local_beliefs_batch([features], model, [gate_memo], [trace], [refs])[0]


def _padded_similarity(module, xs: torch.Tensor, ys: torch.Tensor, pe: torch.Tensor, po: torch.Tensor,
                       flat: torch.Tensor, shape: tuple[int, int]) -> torch.Tensor:
    tx, ty = module.trf(xs), module.trf(ys)
    vals = module.compare(tx.index_select(0, pe), ty.index_select(0, po))
    return vals.new_zeros(shape[0] * shape[1]).scatter(0, flat, vals).view(shape)


def local_beliefs_batch(features: Sequence[CandidateFeatures], model, gate_memos: Sequence[dict | None] | None = None,
                        traces: Sequence[ProgramTrace | None] | None = None,
                        refs: Sequence[dict | None] | None = None) -> list[LocalBeliefs]:
    """``local_beliefs`` for several samples at once: entity/proposal pairs
    of every sample are scored together and laid out as padded rows."""
    n = len(features)
    gate_memos = gate_memos or [None] * n
    traces = traces or [None] * n
    refs = refs or [None] * n
    k = model.config.k
    width = max(len(f.proposal_ids) for f in features)
    pe, po, flat, valid = [], [], [], []
    e0 = o0 = 0
    for f in features:
        n_o = len(f.proposal_ids)
        for r in range(len(f.entity_ids)):
            for j in range(n_o):
                pe.append(e0 + r)
                po.append(o0 + j)
                flat.append((e0 + r) * width + j)
            valid.append(n_o)
        e0 += len(f.entity_ids)
        o0 += n_o
    shape = (e0, width)
    pe_t, po_t, flat_t = (torch.as_tensor(v, dtype=torch.long) for v in (pe, po, flat))
    mask = torch.arange(width)[None, :] < torch.as_tensor(valid)[:, None]
    app = _padded_similarity(model.sim_app, torch.cat([f.ent_app for f in features]),
                             torch.cat([f.objects for f in features]), pe_t, po_t, flat_t, shape)
    pos = _padded_similarity(model.sim_pos, torch.cat([f.ent_loc for f in features]),
                             torch.cat([f.obj_loc for f in features]), pe_t, po_t, flat_t, shape)

    def summary(v: torch.Tensor) -> torch.Tensor:
        v = torch.sort(v.detach().masked_fill(~mask, float("-inf")), dim=1, descending=True).values[:, :k]
        if v.shape[1] < k:
            v = torch.cat([v, v.new_full((v.shape[0], k - v.shape[1]), float("-inf"))], dim=1)
        return v.masked_fill(torch.isinf(v), 0.0)

    g_all = torch.cat([torch.cat([f.ent_h for f in features]).detach(), summary(app), summary(pos)], dim=1)
    rows = list(g_all.unbind(0))
    row = 0
    for f, memo in zip(features, gate_memos):
        for eid in f.entity_ids:
            if memo is not None:
                rows[row] = memo.setdefault(("gate", eid), rows[row])
            row += 1
    g_all = torch.stack(rows)
    beta_app = torch.sigmoid(model.gate_app(g_all)).squeeze(-1)
    beta_pos = torch.sigmoid(model.gate_pos(g_all)).squeeze(-1)
    total = beta_app[:, None] * app + beta_pos[:, None] * pos
    scale = total.abs().masked_fill(~mask, 0.0).max(dim=1, keepdim=True).values.clamp(min=1.0)
    fused = (total / scale + 1.0) / 2.0

    outs = []
    row = 0
    for f, trace, ref in zip(features, traces, refs):
        ids = f.proposal_ids
        n_o = len(ids)
        out = LocalBeliefs({}, {}, {}, {})
        for eid in f.entity_ids:
            b_app, b_pos = Belief(app[row, :n_o], ids), Belief(pos[row, :n_o], ids)
            b_loc = Belief(fused[row, :n_o], ids)
            out.b_app[eid], out.b_pos[eid], out.gate_in[eid], out.b_loc[eid] = b_app, b_pos, rows[row], b_loc
            if trace is not None:
                s_app = trace.add("Sim", f"node:{eid}", {"space": "app"}, _belief_json(b_app))
                s_pos = trace.add("Sim", f"node:{eid}", {"space": "pos"}, _belief_json(b_pos))
                ref[("loc", eid)] = trace.add(
                    "GateSum", f"node:{eid}",
                    {"beliefs": [s_app, s_pos], "betas": [float(beta_app[row]), float(beta_pos[row])]},
                    _belief_json(b_loc))
            row += 1
        outs.append(out)
    return outs


def propagation_order(graph: LanguageSceneGraph, direction: str) -> list[int]:
    order = graph.bfs_order()
    if direction == BP:
        return order[::-1]
    if direction == TD:
        return order
    raise ValueError(f"unknown direction {direction!r}")


def context(graph: LanguageSceneGraph, eid: int, direction: str) -> list:
    if direction == BP:
        return graph.children(eid)
    rel = graph.parent_relation(eid)
    return [] if rel is None else [rel]


def relation_alignment(features: CandidateFeatures, model, rid: int, row_ids: Sequence[int],
                       col_ids: Sequence[int]) -> RelationAlignment:
    """Alignment of relation ``rid`` (subject rows, object columns) to proposal pairs."""
    pos = {pid: p for p, pid in enumerate(features.proposal_ids)}
    full = features.relation_alignments(model.vis_rel, model.sim_rel)[features.relation_row(rid)]
    rk = torch.as_tensor([pos[i] for i in row_ids], dtype=torch.long)
    cl = torch.as_tensor([pos[j] for j in col_ids], dtype=torch.long)
    mat = full.index_select(0, rk).index_select(1, cl)
    return RelationAlignment(mat, tuple(row_ids), tuple(col_ids))


def propagate(graph: LanguageSceneGraph, features: CandidateFeatures, model, config: PropagationConfig,
              local: LocalBeliefs | None = None, gate_memo: dict | None = None,
              trace: ProgramTrace | None = None, refs: dict | None = None) -> PropagationResult:
    if local is None:
        if trace is not None and refs is None:
            refs = {}
        local = local_beliefs(features, model, gate_memo, trace, refs)
    k = config.k
    matching = config.task == MATCHING

    # own index set of every node: full range for grounding, top-K for matching
    base: dict[int, Belief] = {}
    for e in graph.entities:
        b = local.b_loc[e.id]
        if matching:
            b = select_topk(b, k)
            if trace is not None:
                refs[(config.task, "own", e.id)] = trace.add(
                    "Select", f"node:{e.id}", {"belief": refs[("loc", e.id)], "k": k}, _belief_json(b),
                    task=config.task)
        elif trace is not None:
            refs[(config.task, "own", e.id)] = refs[("loc", e.id)]
        base[e.id] = b

    result = PropagationResult(config, dict(local.b_loc), {})
    for direction in config.directions:
        w_rel = model.w_rel[f"{config.task}_{direction}"]
        gates = torch.stack([local.gate_in[e] for e in features.entity_ids]).detach()
        node_beta = dict(zip(features.entity_ids, torch.sigmoid(w_rel(gates)).squeeze(-1).unbind(0)))
        final: dict[int, Belief] = {}
        aligned: dict[int, RelationAlignment] = {}
        for eid in propagation_order(graph, direction):
            ctx = context(graph, eid, direction) if config.message_passing else []
            own = base[eid]
            if not ctx:
                b = Belief(f_norm(own.values, UNIT), own.ids)
                final[eid] = b
                if trace is not None:
                    refs[(config.task, direction, eid)] = trace.add(
                        "GateProd", f"node:{eid}",
                        {"local": refs[(config.task, "own", eid)], "aggregated": None, "beta": 0.0},
                        _belief_json(b), task=config.task, direction=direction)
                continue
            msgs, msg_refs = [], []
            for rel in ctx:
                nb = rel.obj if direction == BP else rel.sub
                sel = select_topk(final[nb], k)
                if direction == BP:
                    a = relation_alignment(features, model, rel.id, own.ids, sel.ids)
                else:
                    a = relation_alignment(features, model, rel.id, sel.ids, own.ids).transpose()
                aligned[rel.id] = a
                msgs.append((a, sel))
                if trace is not None:
                    s_sel = trace.add("Select", f"node:{nb}", {"belief": refs[(config.task, direction, nb)], "k": k},
                                      _belief_json(sel), task=config.task, direction=direction)
                    msg_refs.append({"alignment": {"row_ids": list(a.row_ids), "col_ids": list(a.col_ids),
                                                   "matrix": a.matrix.detach().tolist()},
                                     "belief": s_sel, "relation": rel.id})
            agg = aggregate(msgs)
            beta = node_beta[eid]
            b = gate_prod(own, agg, None, None, beta=beta)
            final[eid] = b
            if trace is not None:
                s_agg = trace.add("Aggregate", f"node:{eid}", {"messages": msg_refs}, _belief_json(agg),
                                  task=config.task, direction=direction)
                refs[(config.task, direction, eid)] = trace.add(
                    "GateProd", f"node:{eid}",
                    {"local": refs[(config.task, "own", eid)], "aggregated": s_agg, "beta": float(beta)},
                    _belief_json(b), task=config.task, direction=direction)
        result.beliefs[direction] = final
        result.alignments[direction] = aligned
        if matching:
            nodes = list(final)
            conf = dict(zip(nodes, model.classifier.forward_many([final[e].values for e in nodes]).unbind(0)))
            for eid in nodes:
                if trace is not None:
                    refs[("conf", direction, eid)] = trace.add(
                        "Classify", f"node:{eid}", {"belief": refs[(config.task, direction, eid)]},
                        float(conf[eid]), task=config.task, direction=direction)
            result.confidences[direction] = conf
    return result


def replay(trace: ProgramTrace, classifier, dtype=torch.float64) -> list[Any]:
    """Re-execute every step from the trace's literal leaves (Sim outputs,
    gate values, alignment matrices) and return the recomputed outputs."""
    outs: list[Any] = []

    def belief(ref) -> Belief:
        o = outs[ref]
        return Belief(torch.tensor(o["values"], dtype=dtype), tuple(o["ids"]))

    def as_json(b: Belief):
        return {"ids": list(b.ids), "values": b.values.tolist()}

    for st in trace.steps:
        m, inp = st["module"], st["inputs"]
        if m == "Sim":
            out = st["output"]
        elif m == "GateSum":
            parts = [(None, belief(r)) for r in inp["beliefs"]]
            betas = [torch.tensor(b, dtype=dtype) for b in inp["betas"]]
            out = as_json(gate_sum(parts, [], betas=betas))
        elif m == "Select":
            out = as_json(select_topk(belief(inp["belief"]), inp["k"]))
        elif m == "Aggregate":
            msgs = []
            for msg in inp["messages"]:
                al = msg["alignment"]
                a = RelationAlignment(torch.tensor(al["matrix"], dtype=dtype).reshape(len(al["row_ids"]), len(al["col_ids"])),
                                      tuple(al["row_ids"]), tuple(al["col_ids"]))
                msgs.append((a, belief(msg["belief"])))
            out = as_json(aggregate(msgs))
        elif m == "GateProd":
            own = belief(inp["local"])
            if inp["aggregated"] is None:
                out = as_json(Belief(f_norm(own.values, UNIT), own.ids))
            else:
                out = as_json(gate_prod(own, belief(inp["aggregated"]), None, None,
                                        beta=torch.tensor(inp["beta"], dtype=dtype)))
        elif m == "Classify":
            with torch.no_grad():
                out = float(classifier(belief(inp["belief"]).values.to(next(classifier.parameters()).dtype)))
        elif m == "And":
            out = min(outs[r] for r in inp["scores"])
        elif m == "Compare":
            out = outs[inp["a"]] - outs[inp["b"]]
        elif m == "Sum":
            out = sum(outs[r] for r in inp["terms"])
        elif m == "Locate":
            vals = [outs[r] for r in inp["scores"]] if "scores" in inp else belief(inp["belief"]).values.tolist()
            keys = inp["keys"]
            sign = -1.0 if inp.get("negate", False) else 1.0
            best = min(range(len(vals)), key=lambda p: (sign * vals[p], keys[p]))
            out = keys[best]
        else:
            raise ValueError(f"unknown module {m!r} in trace")
        outs.append(out)
    return outs
