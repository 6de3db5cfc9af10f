"""Task heads: image-text matching, referent grounding with box refinement,
and mismatched-relation localisation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import NoRelations
from .features import CandidateFeatures
from .graphs import Box, LanguageSceneGraph
from .propagate import BP, GROUNDING, MATCHING, TD, ProgramTrace, PropagationResult
from .sample import Sample

MATCH_THRESHOLD = 0.5
JOINT, ORACLE = "joint", "oracle"


@dataclass
class Prediction:
    match_prob: float
    match: bool
    mode: str = JOINT
    grounded_id: int | None = None
    box: Box | None = None
    mismatched_relation_id: int | None = None

    def to_dict(self) -> dict:
        return {
            "match_prob": self.match_prob,
            "match": self.match,
            "grounded_id": self.grounded_id,
            "box": None if self.box is None else [float(v) for v in self.box],
            "mismatched_relation_id": self.mismatched_relation_id,
            "mode": self.mode,
        }


def itm_score(result: PropagationResult) -> torch.Tensor:
    """Min-pooled node confidences over both directions (``And``)."""
    scores = [p for d in (BP, TD) for p in result.confidences[d].values()]
    return torch.stack(scores).min()


def ground_referent(result: PropagationResult, graph: LanguageSceneGraph) -> int:
    """``Locate(-b_root)``: proposal id with the largest root belief, ties to the lowest id."""
    b = result.root_belief(graph)
    vals = b.values.detach().tolist()
    best = min(range(len(vals)), key=lambda p: (-vals[p], b.ids[p]))
    return b.ids[best]


def edge_scores(result: PropagationResult, graph: LanguageSceneGraph) -> dict[int, float]:
    """Signed confidence drop across every relation (subject = parent)."""
    pb, pt = result.confidences[BP], result.confidences[TD]
    return {
        r.id: (float(pb[r.sub]) - float(pb[r.obj])) + (float(pt[r.obj]) - float(pt[r.sub]))
        for r in graph.relations
    }


def mismatched_relation(result: PropagationResult, graph: LanguageSceneGraph) -> int:
    if graph.num_relations == 0:
        raise NoRelations("expression has no relation phrase")
    scores = edge_scores(result, graph)
    return min(scores, key=lambda rid: (scores[rid], rid))


def global_language_feature(features: CandidateFeatures, graph: LanguageSceneGraph) -> torch.Tensor:
    if features.rel_lang.shape[0]:
        return features.rel_lang.mean(0)
    return features.ent_app[features.entity_row(graph.root)]


def clamp_box(box: Sequence[float]) -> Box:
    x = min(max(float(box[0]), 0.0), 1.0)
    y = min(max(float(box[1]), 0.0), 1.0)
    w = min(max(float(box[2]), 0.0), 1.0 - x)
    h = min(max(float(box[3]), 0.0), 1.0 - y)
    return (x, y, w, h)


def box_offsets(features: CandidateFeatures, graph: LanguageSceneGraph, proposal_id: int, model) -> torch.Tensor:
    p = features.proposal_ids.index(proposal_id)
    x = torch.cat([features.objects[p], features.obj_loc[p], global_language_feature(features, graph)])
    return model.regress(x)


def refine_box(proposal_id: int, features: CandidateFeatures, graph: LanguageSceneGraph, model) -> tuple[Box, torch.Tensor]:
    delta = box_offsets(features, graph, proposal_id, model)
    box = features.boxes[features.proposal_ids.index(proposal_id)]
    refined = clamp_box([b + d for b, d in zip(box, delta.detach().tolist())])
    return refined, delta


def _trace_readout(trace: ProgramTrace, refs: dict, graph: LanguageSceneGraph, want_grounding: bool,
                   want_mrr: bool, match_step: int | None = None) -> None:
    if want_mrr and graph.num_relations:
        steps, keys = [], []
        for r in sorted(graph.relations, key=lambda r: r.id):
            c_bp = trace.add("Compare", f"edge:{r.id}", {"a": refs[("conf", BP, r.sub)], "b": refs[("conf", BP, r.obj)]},
                             None, direction=BP)
            c_td = trace.add("Compare", f"edge:{r.id}", {"a": refs[("conf", TD, r.obj)], "b": refs[("conf", TD, r.sub)]},
                             None, direction=TD)
            steps.append(trace.add("Sum", f"edge:{r.id}", {"terms": [c_bp, c_td]}, None))
            keys.append(r.id)
        trace.add("Locate", "relations", {"scores": steps, "keys": keys}, None, output_kind="relation")
    if want_grounding:
        root_step = refs[(GROUNDING, BP, graph.root)]
        trace.add("Locate", f"node:{graph.root}", {"belief": root_step, "keys": trace.steps[root_step]["output"]["ids"],
                                                    "negate": True}, None, output_kind="proposal")


def fill_trace_outputs(trace: ProgramTrace, classifier, dtype) -> None:
    """Readout steps are recorded without outputs; compute them by replay."""
    from .propagate import replay

    outs = replay(trace, classifier, dtype)
    for st, o in zip(trace.steps, outs):
        if st["output"] is None:
            st["output"] = o


def predict_batch(samples: Sequence[Sample], model, mode: str = JOINT, message_passing: bool = True,
                  traces: Sequence[ProgramTrace] | None = None, outputs: list | None = None) -> list[Prediction]:
    """Predictions for several samples. In joint mode grounding runs only for
    predicted matches and MRR only for predicted mismatches; oracle mode
    emits both regardless of the match decision."""
    if mode not in (JOINT, ORACLE):
        raise ValueError(f"unknown mode {mode!r}")
    with torch.no_grad():
        outs = model.run(samples, (MATCHING, GROUNDING), message_passing=message_passing, traces=traces)
    preds = []
    for n, out in enumerate(outs):
        g = out.sample.graph
        p = float(itm_score(out.matching))
        matched = p >= MATCH_THRESHOLD
        pred = Prediction(p, matched, mode)
        do_grd = mode == ORACLE or matched
        do_mrr = (mode == ORACLE or not matched) and g.num_relations > 0
        if do_grd:
            pid = ground_referent(out.grounding, g)
            with torch.no_grad():
                box, _ = refine_box(pid, out.features, g, model)
            pred.grounded_id, pred.box = pid, box
        if do_mrr:
            pred.mismatched_relation_id = mismatched_relation(out.matching, g)
        if traces is not None:
            tr = traces[n]
            scores = [out.trace_refs[("conf", d, e.id)] for d in (BP, TD) for e in g.entities]
            tr.add("And", "graph", {"scores": scores}, None)
            _trace_readout(tr, out.trace_refs, g, do_grd, do_mrr)
            fill_trace_outputs(tr, model.classifier, model.dtype)
        preds.append(pred)
    if outputs is not None:
        outputs.extend(outs)
    return preds


def predict(sample: Sample, model, mode: str = JOINT, message_passing: bool = True,
            trace: ProgramTrace | None = None) -> Prediction:
    return predict_batch([sample], model, mode, message_passing, None if trace is None else [trace])[0]


def prediction_from_trace(trace: ProgramTrace, outputs: list, mode: str = JOINT) -> dict:
    """Rebuild the discrete prediction fields from a (replayed) trace."""
    pred: dict = {"match_prob": None, "grounded_id": None, "mismatched_relation_id": None}
    for st, o in zip(trace.steps, outputs):
        if st["module"] == "And":
            pred["match_prob"] = o
        elif st["module"] == "Locate" and st.get("output_kind") == "proposal":
            pred["grounded_id"] = o
        elif st["module"] == "Locate" and st.get("output_kind") == "relation":
            pred["mismatched_relation_id"] = o
    return pred
