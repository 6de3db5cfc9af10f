"""Metrics over per-sample records, plus intermediate diagnosis.

Evaluation first turns a model and a dataset into per-sample records; every
metric is then a pure count-based function of those records, so cached
records reproduce a report exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import InsufficientSamples
from .graphs import AnnotatedSceneGraph, CorrespondenceLabel, MatchStatus, iou, match_subgraph
from .learning import grounding_label
from .propagate import BP
from .readout import JOINT, MATCH_THRESHOLD, ORACLE, predict_batch
from .sample import Sample

REPORT_VERSION = 1
GROUNDING_IOU = 0.5
FULL = "full"
RECALL_KS = (1, 3, 5)


@dataclass(frozen=True)
class PredictionRecord:
    """Everything the metrics need about one sample: its labels and the
    unconditional (oracle-mode) outputs of every head."""

    id: str
    split: str
    label: int
    match_prob: float
    grounded_iou: float | None = None
    mismatched_relation: int | None = None
    target_relation: int | None = None

    @property
    def predicted_match(self) -> bool:
        return self.match_prob >= MATCH_THRESHOLD

    def to_dict(self) -> dict:
        return asdict(self)


def collect_records(model, samples: Sequence[Sample], batch_size: int = 64,
                    message_passing: bool = True) -> list[PredictionRecord]:
    records = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        preds = predict_batch(batch, model, ORACLE, message_passing)
        for s, p in zip(batch, preds):
            ov = None
            if s.match and s.referent_box is not None and p.box is not None:
                ov = iou(p.box, s.referent_box)
            records.append(PredictionRecord(
                s.id, s.split, int(s.match), p.match_prob, ov,
                p.mismatched_relation_id, s.mismatched_relation if not s.match else None))
    return records


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else float(Fraction(num, den))


def split_metrics(records: Sequence[PredictionRecord]) -> dict:
    """Counts and accuracies for one group of records.

    Joint grounding needs a predicted match and IoU >= 0.5; joint MRR needs a
    predicted mismatch and the right relation. Oracle mode drops the match
    conjunct. Per-class match accuracies are reported as extras."""
    matched = [r for r in records if r.label == 1]
    mismatched = [r for r in records if r.label == 0]
    correct = sum(r.predicted_match == bool(r.label) for r in records)
    grd_hit = [r.grounded_iou is not None and r.grounded_iou >= GROUNDING_IOU for r in matched]
    mrr_hit = [r.mismatched_relation is not None and r.mismatched_relation == r.target_relation for r in mismatched]
    return {
        "samples": len(records),
        "matched": len(matched),
        "mismatched": len(mismatched),
        "match_acc": _ratio(correct, len(records)),
        "match_acc_matched": _ratio(sum(r.predicted_match for r in matched), len(matched)),
        "match_acc_mismatched": _ratio(sum(not r.predicted_match for r in mismatched), len(mismatched)),
        "grounding_acc": {
            JOINT: _ratio(sum(h and r.predicted_match for h, r in zip(grd_hit, matched)), len(matched)),
            ORACLE: _ratio(sum(grd_hit), len(matched)),
        },
        "mrr_acc": {
            JOINT: _ratio(sum(h and not r.predicted_match for h, r in zip(mrr_hit, mismatched)), len(mismatched)),
            ORACLE: _ratio(sum(mrr_hit), len(mismatched)),
        },
    }


@dataclass
class MetricsReport:
    mode: str
    splits: dict[str, dict]
    diagnosis: dict | None = None
    meta: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    def headline(self, split: str = FULL) -> dict:
        b = self.splits[split]
        return {"match_acc": b["match_acc"], "grounding_acc": b["grounding_acc"][self.mode],
                "mrr_acc": b["mrr_acc"][self.mode]}

    def to_dict(self) -> dict:
        return {"version": self.version, "mode": self.mode, "splits": self.splits,
                "diagnosis": self.diagnosis, "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["mode"], d["splits"], d.get("diagnosis"), d.get("meta", {}), d.get("version", REPORT_VERSION))

    def to_text(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{100 * v:6.2f}"

        cols = ["split", "n", "match", "grd(joint)", "grd(oracle)", "mrr(joint)", "mrr(oracle)"]
        rows = []
        for name, b in self.splits.items():
            rows.append([name, str(b["samples"]), fmt(b["match_acc"]), fmt(b["grounding_acc"][JOINT]),
                         fmt(b["grounding_acc"][ORACLE]), fmt(b["mrr_acc"][JOINT]), fmt(b["mrr_acc"][ORACLE])])
        widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(cols)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
        lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
        if self.diagnosis:
            lines.append("")
            lines.append(diagnosis_text(self.diagnosis))
        return "\n".join(lines)

    def to_csv(self) -> str:
        out = ["split,samples,match_acc,grounding_joint,grounding_oracle,mrr_joint,mrr_oracle"]
        for name, b in self.splits.items():
            vals = [b["match_acc"], b["grounding_acc"][JOINT], b["grounding_acc"][ORACLE],
                    b["mrr_acc"][JOINT], b["mrr_acc"][ORACLE]]
            out.append(",".join([name, str(b["samples"])] + ["" if v is None else repr(v) for v in vals]))
        return "\n".join(out) + "\n"


def report_from_records(records: Sequence[PredictionRecord], mode: str = JOINT, meta: dict | None = None) -> MetricsReport:
    if mode not in (JOINT, ORACLE):
        raise ValueError(f"unknown mode {mode!r}")
    if not records:
        raise InsufficientSamples("no samples to evaluate")
    splits = {FULL: split_metrics(records)}
    for name in sorted({r.split for r in records}):
        splits[name] = split_metrics([r for r in records if r.split == name])
    return MetricsReport(mode, splits, meta=dict(meta or {}))


def evaluate(model, samples: Sequence[Sample], mode: str = JOINT, message_passing: bool = True,
             batch_size: int = 64) -> MetricsReport:
    if not samples:
        raise InsufficientSamples("no samples to evaluate")
    records = collect_records(model, samples, batch_size, message_passing)
    return report_from_records(records, mode, {"message_passing": message_passing})


# ---------------------------------------------------------------------------
# intermediate diagnosis


def recall_at_k(values: Sequence[float], ids: Sequence[int], target: int, k: int) -> bool:
    """Whether ``target`` is among the ``k`` largest entries (ties to the lower id)."""
    ranked = sorted(range(len(values)), key=lambda p: (-values[p], ids[p]))
    return target in {ids[p] for p in ranked[:k]}


def synthetic_correspondence(sample: Sample) -> CorrespondenceLabel | MatchStatus:
    """Entity -> gt node correspondence recovered by subgraph matching
    against the scene graph stored with a synthetic sample."""
    from .synthgen.generate import world_of

    gt: AnnotatedSceneGraph = world_of(sample).annotated_graph()
    return match_subgraph(sample.graph, gt, sample.referent_box)


def proposal_correspondence(sample: Sample, label: CorrespondenceLabel, gt: AnnotatedSceneGraph) -> dict[int, int]:
    """Map each entity to the proposal overlapping its gt box the most."""
    return {eid: grounding_label(sample.scene, gt.node(nid).box)[0] for eid, nid in label.entity_map.items()}


def _mean(xs: list[float]) -> float | None:
    return None if not xs else float(np.mean(xs))


def diagnose(model, samples: Sequence[Sample], batch_size: int = 64,
             correspondence: Callable[[Sample], CorrespondenceLabel | MatchStatus] | None = None,
             gt_graph: Callable[[Sample], AnnotatedSceneGraph] | None = None) -> dict:
    """Entity and referent recall@k before and after propagation plus
    relation-alignment statistics at ground-truth pairs."""
    from .synthgen.generate import world_of

    correspondence = correspondence or synthetic_correspondence
    gt_graph = gt_graph or (lambda s: world_of(s).annotated_graph())
    hits = {key: {k: 0 for k in RECALL_KS} for key in ("entity_local", "entity_mp", "referent")}
    n_ent = n_ref = 0
    skipped = {s.value: 0 for s in MatchStatus}
    rel_gt, rel_mean, rel_max = [], [], []
    matched = [s for s in samples if s.match and s.referent_box is not None]
    for start in range(0, len(matched), batch_size):
        batch = matched[start:start + batch_size]
        with torch.no_grad():
            outs = model.run(batch, ("grounding",))
        for s, out in zip(batch, outs):
            label = correspondence(s)
            if isinstance(label, MatchStatus):
                skipped[label.value] += 1
                continue
            props = proposal_correspondence(s, label, gt_graph(s))
            for eid, pid in props.items():
                loc = out.local.b_loc[eid]
                mp = out.grounding.beliefs[BP][eid]
                for k in RECALL_KS:
                    hits["entity_local"][k] += recall_at_k(loc.values.tolist(), loc.ids, pid, k)
                    hits["entity_mp"][k] += recall_at_k(mp.values.tolist(), mp.ids, pid, k)
                n_ent += 1
            root = out.grounding.root_belief(s.graph)
            for k in RECALL_KS:
                hits["referent"][k] += recall_at_k(root.values.tolist(), root.ids, props[s.graph.root], k)
            n_ref += 1
            f = out.features
            if f.relation_ids:
                full = f.relation_alignments(model.vis_rel, model.sim_rel)
                pos = {pid: p for p, pid in enumerate(f.proposal_ids)}
                for r in s.graph.relations:
                    m = full[f.relation_row(r.id)]
                    rel_gt.append(float(m[pos[props[r.sub]], pos[props[r.obj]]]))
                    rel_mean.append(float(m.mean()))
                    rel_max.append(float(m.max()))
    return {
        "entities": n_ent,
        "referents": n_ref,
        "skipped": skipped,
        "entity_recall_local": {str(k): _ratio(v, n_ent) for k, v in hits["entity_local"].items()},
        "entity_recall_mp": {str(k): _ratio(v, n_ent) for k, v in hits["entity_mp"].items()},
        "referent_recall": {str(k): _ratio(v, n_ref) for k, v in hits["referent"].items()},
        "relation_score": {"gt": _mean(rel_gt), "mean": _mean(rel_mean), "max": _mean(rel_max)},
    }


def diagnosis_text(d: dict) -> str:
    def fmt(v):
        return "-" if v is None else f"{100 * v:6.2f}"

    lines = ["recall@k          " + "  ".join(f"k={k:<4}" for k in RECALL_KS)]
    for name, key in (("entity w/o MP", "entity_recall_local"), ("entity with MP", "entity_recall_mp"),
                      ("referent", "referent_recall")):
        lines.append(f"{name:<17} " + "  ".join(fmt(d[key][str(k)]) for k in RECALL_KS))
    rs = d["relation_score"]
    lines.append("relation score    gt " + ("-" if rs["gt"] is None else f"{rs['gt']:.4f}")
                 + "  mean " + ("-" if rs["mean"] is None else f"{rs['mean']:.4f}")
                 + "  max " + ("-" if rs["max"] is None else f"{rs['max']:.4f}"))
    lines.append(f"skipped           {d['skipped']}")
    return "\n".join(lines)


def group_by_split(samples: Iterable[Sample]) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {}
    for s in samples:
        out.setdefault(s.split, []).append(s)
    return out
