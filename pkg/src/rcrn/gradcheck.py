"""Finite-difference verification of analytic gradients on tiny instances.

Gate inputs are pinned through a gate memo captured on the unperturbed
forward pass, so the numeric side sees the same gradient stop as autograd.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .graphs import BoxProposal, EntityPhrase, LanguageSceneGraph, RelationPhrase, VisualScene
from .learning import grounding_label, grounding_loss
from .model import RCRN, ModelConfig
from .propagate import GROUNDING, MATCHING
from .readout import itm_score
from .sample import Sample, build_vocab


def tiny_sample(rng: np.random.Generator, n_proposals: int = 4, obj_dim: int = 4, shape: str = "star") -> Sample:
    """Three entities (``star``: root with two children, ``chain``: a path)
    over ``n_proposals`` random boxes."""
    ents = (EntityPhrase(0, ("red", "cube")), EntityPhrase(1, ("blue",)), EntityPhrase(2, ("small", "cone")))
    if shape == "star":
        rels = (RelationPhrase(0, 0, 1, ("left", "of")), RelationPhrase(1, 0, 2, ("near",)))
    elif shape == "chain":
        rels = (RelationPhrase(0, 0, 1, ("left", "of")), RelationPhrase(1, 1, 2, ("near",)))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    props = []
    for i in range(n_proposals):
        w, h = rng.uniform(0.1, 0.3, size=2)
        box = (float(rng.uniform(0, 1 - w)), float(rng.uniform(0, 1 - h)), float(w), float(h))
        props.append(BoxProposal(i, box, rng.normal(size=obj_dim)))
    scene = VisualScene(tuple(props))
    return Sample.build("tiny", LanguageSceneGraph(ents, rels, 0), scene, 1, referent_box=props[1].box)


def tiny_model(sample: Sample, seed: int = 0, k: int = 2) -> RCRN:
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab=build_vocab([sample]), obj_dim=sample.scene.feats().shape[1], dim=6, hidden=4, k=k,
                      trf_hidden=5, trf_dim=4, sim_dim=3, cls_hidden=3, reg_hidden=3)
    model = RCRN(cfg).double()
    # non-zero regression head so every parameter tensor carries signal
    with torch.no_grad():
        for p in model.regress.parameters():
            p.normal_(0.0, 0.3)
    return model


def itm_objective(model: RCRN, sample: Sample, memo: dict) -> torch.Tensor:
    out = model.run([sample], (MATCHING,), gate_memos=[memo])[0]
    return itm_score(out.matching)


def grounding_objective(model: RCRN, sample: Sample, memo: dict) -> torch.Tensor:
    out = model.run([sample], (GROUNDING,), gate_memos=[memo])[0]
    pid, _ = grounding_label(sample.scene, sample.referent_box)
    root = out.grounding.root_belief(sample.graph)
    return grounding_loss(root.values, root.ids.index(pid), model.grounding_log_scale.exp())


def kink_margin(model: RCRN, sample: Sample) -> float:
    """Smallest distance of any rectifier input to its kink on the forward
    pass, covering every hidden ReLU along with the relation cosine.
    Finite differences are only meaningful when this is not tiny."""
    seen: list[float] = []
    hooks = [m.register_forward_pre_hook(lambda _m, inp: seen.append(float(inp[0].abs().min())))
             for m in model.modules() if isinstance(m, torch.nn.ReLU)]
    try:
        with torch.no_grad():
            model.run([sample], (MATCHING, GROUNDING))
            f = model.features([sample])[0]
            for mod, x, y in ((model.sim_app, f.ent_app, f.objects), (model.sim_pos, f.ent_loc, f.obj_loc)):
                tx, ty = mod.trf(x), mod.trf(y)
                u = mod.w_sim((tx[:, None, :] - ty[None, :, :]).pow(2))
                seen.append(float((u / u.norm(dim=-1, keepdim=True)).abs().min()))
            allp = range(len(f.proposal_ids))
            cos = model.sim_rel.trf(f.rel_lang)[:, None, None, :] * model.sim_rel.trf(
                f.visual_relations(allp, allp, model.vis_rel))[None]
            seen.append(float(cos.sum(-1).abs().min()))
    finally:
        for h in hooks:
            h.remove()
    return min(seen)


def well_conditioned_instance(seed: int, shape: str = "star", margin: float = 1e-3,
                              max_draws: int = 50) -> tuple[RCRN, Sample, int]:
    """First (sample, model) drawn from ``seed`` whose kink margin exceeds
    ``margin``; also returns the number of rejected draws."""
    rng = np.random.default_rng(seed)
    for draw in range(max_draws):
        sample = tiny_sample(rng, shape=shape)
        model = tiny_model(sample, seed * max_draws + draw)
        if kink_margin(model, sample) > margin:
            return model, sample, draw
    raise RuntimeError(f"no well-conditioned instance in {max_draws} draws")


@dataclass
class ParamCheck:
    name: str
    rel_error: float
    analytic_norm: float
    numeric_norm: float

    def ok(self, tol: float) -> bool:
        return self.rel_error < tol


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    if den < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / den)


def check_gradients(model: RCRN, sample: Sample, objective: Callable[[RCRN, Sample, dict], torch.Tensor],
                    eps: float = 1e-4) -> list[ParamCheck]:
    """Richardson-extrapolated central differences (steps ``2 eps`` and
    ``eps``) for every scalar parameter versus autograd."""
    memo: dict = {}
    model.zero_grad()
    objective(model, sample, memo).backward()
    results = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = np.zeros(p.shape) if p.grad is None else p.grad.detach().numpy().copy()
            numeric = np.zeros(p.shape)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                central = []
                for h in (2 * eps, eps):
                    flat[i] = orig + h
                    up = float(objective(model, sample, memo))
                    flat[i] = orig - h
                    down = float(objective(model, sample, memo))
                    central.append((up - down) / (2 * h))
                flat[i] = orig
                numeric.reshape(-1)[i] = (4 * central[1] - central[0]) / 3
            results.append(ParamCheck(name, relative_error(analytic, numeric),
                                      float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric))))
    return results


def run_suite(seed: int = 0, tol: float = 1e-4, shapes: tuple[str, ...] = ("star", "chain")) -> dict:
    """Gradient checks of the match score and the grounding loss; returns a
    summary with the worst relative error per objective and shape."""
    summary = {"tolerance": tol, "cases": []}
    for shape in shapes:
        model, sample, rejected = well_conditioned_instance(seed, shape)
        for obj_name, fn in (("itm_score", itm_objective), ("grounding_loss", grounding_objective)):
            checks = check_gradients(model, sample, fn)
            worst = max(checks, key=lambda c: c.rel_error)
            summary["cases"].append({
                "shape": shape, "objective": obj_name, "parameters": len(checks), "rejected_draws": rejected,
                "max_rel_error": worst.rel_error, "worst_parameter": worst.name,
                "passed": all(c.ok(tol) for c in checks),
                "failures": [c.name for c in checks if not c.ok(tol)],
            })
    summary["passed"] = all(c["passed"] for c in summary["cases"])
    return summary
