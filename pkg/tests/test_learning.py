"""Loss terms, label construction, the training loop and checkpoints."""

import json
import math

import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from builders import random_sample, small_model
from rcrn.errors import DimensionMismatch, EmptyDataset
from rcrn.graphs import BoxProposal, EntityPhrase, LanguageSceneGraph, VisualScene, iou
from rcrn.learning import (
    LossBundle,
    TrainConfig,
    compute_losses,
    default_model_config,
    grounding_label,
    grounding_loss,
    load_checkpoint,
    match_loss,
    save_checkpoint,
    smooth_l1,
    train,
)
from rcrn.model import RCRN
from rcrn.readout import predict_batch
from rcrn.sample import Sample

D = torch.float64
COLOURS = ("red", "green", "blue")


def separable_corpus(n: int, seed: int = 0) -> list[Sample]:
    """Single-entity expressions over three proposals with one-hot
    appearance features; the colour word names exactly one of them."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        perm, target = rng.permutation(3), int(rng.integers(3))
        props = tuple(BoxProposal(p, (0.05 + 0.3 * p, 0.3, 0.25, 0.3), np.eye(3)[perm[p]]) for p in range(3))
        graph = LanguageSceneGraph((EntityPhrase(0, (COLOURS[perm[target]],)),), (), 0)
        out.append(Sample.build(str(i), graph, VisualScene(props), 1, referent_box=props[target].box))
    return out


def tiny_dims(samples, k=3):
    return default_model_config(samples, k, dim=16, hidden=16, trf_hidden=16, trf_dim=16, sim_dim=8, cls_hidden=8,
                                reg_hidden=8)


# ---------------------------------------------------------------------------
# labels and loss terms


@pytest.mark.example
def test_grounding_label_examples():
    props = (BoxProposal(0, (0.0, 0.0, 0.25, 0.25), np.zeros(2)), BoxProposal(1, (0.5, 0.5, 0.25, 0.25), np.zeros(2)),
             BoxProposal(2, (0.5, 0.0, 0.25, 0.25), np.zeros(2)))
    scene = VisualScene(props)
    assert grounding_label(scene, (0.5, 0.5, 0.25, 0.25)) == (1, 1.0)
    assert grounding_label(scene, (0.875, 0.875, 0.125, 0.125)) == (0, 0.0)
    # equal overlap with proposals 0 and 2 (dyadic coordinates keep the tie exact)
    gt = (0.125, 0.0, 0.5, 0.25)
    assert iou(props[0].box, gt) == iou(props[2].box, gt) > 0
    assert grounding_label(scene, gt) == (0, iou(props[0].box, gt))


@pytest.mark.example
def test_smooth_l1_examples():
    t = torch.zeros(4, dtype=D)
    assert smooth_l1(t, t).item() == 0.0
    assert smooth_l1(torch.tensor([0.5], dtype=D), torch.zeros(1, dtype=D)).item() == 0.125
    assert smooth_l1(torch.tensor([2.0], dtype=D), torch.zeros(1, dtype=D)).item() == 1.5
    with pytest.raises(DimensionMismatch):
        smooth_l1(torch.zeros(3), torch.zeros(4))


@pytest.mark.example
def test_match_and_grounding_loss_examples():
    assert_allclose(match_loss(torch.tensor(0.5, dtype=D), 1).item(), math.log(2), rtol=1e-12)
    assert_allclose(match_loss(torch.tensor(0.5, dtype=D), 0).item(), math.log(2), rtol=1e-12)
    # a very sharp softmax puts all mass on the label
    assert grounding_loss(torch.tensor([0.0, 1.0, 0.0], dtype=D), 1, 1e4).item() == 0.0


@pytest.mark.example
def test_loss_bundle_total():
    b = LossBundle(torch.tensor(1.0), torch.tensor(2.0), torch.tensor(0.5), mu=3.0, omega=1.0)
    assert b.total.item() == 7.5
    assert b.to_dict()["total"] == 7.5


@pytest.mark.example
def test_regression_term_gated_by_overlap(rng):
    s = random_sample(rng, n_entities=2, n_proposals=3)
    model = small_model([s])
    with torch.no_grad():
        model.regress[2].bias.fill_(0.3)
    cfg = TrainConfig()
    near = Sample.build("a", s.graph, s.scene, 1, referent_box=s.scene.proposals[0].box)
    far = Sample.build("b", s.graph, s.scene, 1, referent_box=(0.97, 0.97, 0.02, 0.02))
    assert grounding_label(far.scene, far.referent_box)[1] < 0.5
    out_near, out_far = model.run([near, far])
    assert compute_losses(out_near, model, cfg).reg.item() > 0
    assert compute_losses(out_far, model, cfg).reg.item() == 0.0


def test_mismatched_samples_only_carry_the_match_term(rng):
    s = random_sample(rng, n_entities=3, n_proposals=4, match=0)
    model = small_model([s])
    b = compute_losses(model.run([s])[0], model, TrainConfig())
    assert b.grd.item() == 0.0 and b.reg.item() == 0.0 and b.match.item() > 0


def test_losses_are_finite_on_random_samples():
    rng = np.random.default_rng(4)
    for n in range(20):
        s = random_sample(rng, n_entities=int(rng.integers(1, 6)), n_proposals=int(rng.integers(2, 8)),
                          match=n % 2, sid=str(n))
        model = small_model([s], seed=n)
        b = compute_losses(model.run([s])[0], model, TrainConfig())
        assert all(math.isfinite(v) and v >= 0 for v in b.to_dict().values())


# ---------------------------------------------------------------------------
# configuration


def test_train_config_defaults_and_presets():
    c = TrainConfig()
    assert (c.mu, c.omega, c.k) == (3.0, 1.0, 5)
    assert c.warmup_iterations == 500 and c.encoder_lr == c.lr_reasoning
    full = TrainConfig.preset("full")
    assert full.batch_size == 64 and full.iterations == 80000
    assert TrainConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c
    with pytest.raises(KeyError):
        TrainConfig.preset("huge")
    with pytest.raises(ValueError):
        TrainConfig(mu=-1)


# ---------------------------------------------------------------------------
# training loop


@pytest.mark.example
def test_training_is_deterministic(tiny_corpus):
    samples, _ = tiny_corpus
    cfg = TrainConfig(iterations=6, warmup=2, batch_size=4, seed=5)
    runs = [train(samples, cfg, model_config=tiny_dims(samples)) for _ in range(2)]
    (m1, log1), (m2, log2) = runs
    assert [r["total"] for r in log1] == [r["total"] for r in log2]
    for (n, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
        assert torch.equal(a, b), n


@pytest.mark.example
def test_grounding_only_warmup_leaves_match_head_at_chance(tiny_corpus):
    samples, _ = tiny_corpus
    cfg = TrainConfig(iterations=30, warmup=30, batch_size=4, seed=1)
    torch.manual_seed(cfg.seed)
    init = RCRN(tiny_dims(samples))
    before = {n: p.clone() for n, p in init.classifier.state_dict().items()}
    model, log = train(samples, cfg, model=init)
    assert all(r["stage"] == 0 and r["match"] == 0.0 for r in log)
    for n, p in model.classifier.state_dict().items():
        assert torch.equal(p, before[n]), n
    test = [s for s in samples if s.split != "train"]
    preds = predict_batch(test, model)
    acc = np.mean([p.match == bool(s.match) for p, s in zip(preds, test)])
    assert abs(acc - 0.5) <= 0.2


def test_separable_dataset_grounding_converges():
    samples = separable_corpus(60)
    # the colour word identifies a unique proposal in every scene
    for s in samples:
        colour = COLOURS.index(s.graph.entities[0].words[0])
        hits = [p.id for p in s.scene.proposals if p.feat[colour] == 1]
        assert len(hits) == 1 and s.scene.proposals[hits[0]].box == s.referent_box
    cfg = TrainConfig(iterations=500, warmup=500, batch_size=8, lr_reasoning=3e-3, seed=0)
    model, log = train(samples, cfg, model_config=tiny_dims(samples))
    grd = np.array([r["grd"] for r in log])
    assert grd[-50:].mean() < 0.1
    ma = np.convolve(grd, np.ones(200) / 200, "valid")
    assert np.all(np.diff(ma) <= 0)


def test_empty_dataset_raises():
    with pytest.raises(EmptyDataset):
        train([], TrainConfig(iterations=1))


def test_training_log_file_and_checkpoint(tmp_path, tiny_corpus):
    samples, _ = tiny_corpus
    cfg = TrainConfig(iterations=6, warmup=2, batch_size=4, log_every=2)
    model, _ = train(samples, cfg, model_config=tiny_dims(samples), log_path=tmp_path / "log.jsonl",
                     checkpoint_path=tmp_path / "model.pt")
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in lines] == [0, 2, 4, 5]
    assert {"grd", "match", "reg", "total", "lr", "stage"} <= set(lines[0])
    back, blob = load_checkpoint(tmp_path / "model.pt")
    assert blob["train_config"] == cfg.to_dict() and blob["iteration"] == 6
    for (n, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), n


def test_checkpoint_manifest_mismatch_rejected(tmp_path, rng):
    s = random_sample(rng)
    model = small_model([s])
    save_checkpoint(model, tmp_path / "m.pt")
    blob = torch.load(tmp_path / "m.pt", weights_only=False)
    blob["manifest"][0]["shape"] = [999]
    torch.save(blob, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")
    blob["version"] = 99
    torch.save(blob, tmp_path / "old.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "old.pt")
