"""The full network. Shared encoders and local correspondences feed
task-specific propagation gates, whose beliefs drive the readout heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .errors import DimensionMismatch
from .beliefcore import Classifier, EntitySimilarity, RelationSimilarity, mlp
from .features import (
    CandidateFeatures,
    EmbeddingTokenEncoder,
    FileTokenEncoder,
    PhraseEncoder,
    VisualRelation,
    attach_relation_alignments,
    build_candidate_features_batch,
)
from .propagate import (
    BP,
    GROUNDING,
    MATCHING,
    TD,
    LocalBeliefs,
    ProgramTrace,
    PropagationConfig,
    PropagationResult,
    local_beliefs_batch,
    propagate,
)
from .sample import Sample


@dataclass
class ModelConfig:
    vocab: list[str] = field(default_factory=lambda: ["<unk>"])
    obj_dim: int = 16
    dim: int = 64
    hidden: int = 128
    k: int = 5
    trf_hidden: int = 64
    trf_dim: int = 64
    sim_dim: int = 32
    cls_hidden: int = 32
    reg_hidden: int = 64
    grounding_scale: float = 10.0
    feature_file: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(eq=False)
class SampleOutput:
    sample: Sample
    features: CandidateFeatures
    local: LocalBeliefs
    matching: PropagationResult | None = None
    grounding: PropagationResult | None = None
    trace_refs: dict | None = None


class RCRN(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        if c.feature_file:
            self.token_encoder = FileTokenEncoder(c.feature_file, c.dim)
        else:
            self.token_encoder = EmbeddingTokenEncoder(c.vocab, c.dim, c.obj_dim)
        self.phrase_encoder = PhraseEncoder(c.dim, c.hidden)
        self.vis_rel = VisualRelation(c.dim)

        self.sim_app = EntitySimilarity(c.dim, c.trf_hidden, c.trf_dim, c.sim_dim)
        self.sim_pos = EntitySimilarity(5, c.trf_hidden, c.trf_dim, c.sim_dim)
        self.sim_rel = RelationSimilarity(c.dim, c.trf_hidden, c.trf_dim)

        gate_dim = c.hidden + 2 * c.k
        self.gate_app = nn.Linear(gate_dim, 1)
        self.gate_pos = nn.Linear(gate_dim, 1)
        self.w_rel = nn.ModuleDict({
            f"{GROUNDING}_{BP}": nn.Linear(gate_dim, 1),
            f"{MATCHING}_{BP}": nn.Linear(gate_dim, 1),
            f"{MATCHING}_{TD}": nn.Linear(gate_dim, 1),
        })
        self.classifier = Classifier(c.k, c.cls_hidden)
        self.regress = mlp(2 * c.dim + 5, c.reg_hidden, 4)
        nn.init.zeros_(self.regress[2].weight)
        nn.init.zeros_(self.regress[2].bias)
        self.grounding_log_scale = nn.Parameter(torch.tensor(math.log(c.grounding_scale)))

    # parameter groups: the token encoder is the stand-in for pretrained layers
    def encoder_parameters(self) -> list[nn.Parameter]:
        return list(self.token_encoder.parameters())

    def reasoning_parameters(self) -> list[nn.Parameter]:
        enc = {id(p) for p in self.encoder_parameters()}
        return [p for p in self.parameters() if id(p) not in enc]

    @property
    def dtype(self) -> torch.dtype:
        return self.phrase_encoder.lstm.weight_ih_l0.dtype

    def features(self, samples: Sequence[Sample]) -> list[CandidateFeatures]:
        encs = self.token_encoder.encode_batch(samples)
        for enc in encs:
            if enc.words.shape[0] and enc.words.shape[-1] != self.config.dim:
                raise DimensionMismatch(f"word vectors have dim {enc.words.shape[-1]}, expected {self.config.dim}")
        items = [(s.graph, s.scene, enc) for s, enc in zip(samples, encs)]
        feats = build_candidate_features_batch(items, self.phrase_encoder)
        attach_relation_alignments(feats, self.vis_rel, self.sim_rel)
        return feats

    def run(self, samples: Sequence[Sample], tasks: Sequence[str] = (MATCHING, GROUNDING),
            message_passing: bool = True, gate_memos: Sequence[dict] | None = None,
            traces: Sequence[ProgramTrace] | None = None) -> list[SampleOutput]:
        feats = self.features(samples)
        all_refs = [None if traces is None or traces[n] is None else {} for n in range(len(samples))]
        locals_ = local_beliefs_batch(feats, self, gate_memos, traces, all_refs)
        outs = []
        for n, (s, f, loc) in enumerate(zip(samples, feats, locals_)):
            memo = None if gate_memos is None else gate_memos[n]
            trace = None if traces is None else traces[n]
            refs = all_refs[n]
            out = SampleOutput(s, f, loc)
            if MATCHING in tasks:
                out.matching = propagate(s.graph, f, self, PropagationConfig.matching(self.config.k, message_passing),
                                         loc, memo, trace, refs)
            if GROUNDING in tasks:
                out.grounding = propagate(s.graph, f, self, PropagationConfig.grounding(self.config.k, message_passing),
                                          loc, memo, trace, refs)
            if trace is not None:
                out.trace_refs = refs
            outs.append(out)
        return outs
