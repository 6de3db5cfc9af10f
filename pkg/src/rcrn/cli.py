"""Command-line interface: corpus generation, training, evaluation, program
traces, diagnosis and gradient checks.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import torch
import yaml

from .errors import InsufficientSamples, RCRNError
from .sample import load_jsonl


def load_config(path: str | None, section: str) -> dict:
    """Read a YAML or JSON mapping; a ``section`` key selects a sub-mapping."""
    if not path:
        return {}
    text = Path(path).read_text()
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    data = data or {}
    if not isinstance(data, dict):
        raise click.UsageError(f"config {path} must contain a mapping")
    return dict(data.get(section, data))


def overrides(**kw) -> dict:
    return {k: v for k, v in kw.items() if v is not None}


def load_corpus(corpus: str, split: str | None = None):
    path = Path(corpus)
    if path.is_dir():
        path = path / "samples.jsonl"
    if not path.exists():
        raise InsufficientSamples(f"no corpus at {path}")
    samples = load_jsonl(path)
    if split:
        samples = [s for s in samples if s.split == split]
    if not samples:
        raise InsufficientSamples(f"corpus {corpus} has no samples" + (f" in split {split!r}" if split else ""))
    return samples


def emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text if text.endswith("\n") else text + "\n")
    else:
        click.echo(text)


class Group(click.Group):
    """Maps package and IO errors to exit status 1 with a one-line message."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.exceptions.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except (RCRNError, OSError, ValueError, KeyError, RuntimeError) as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            ctx.exit(1)


@click.group(cls=Group)
@click.option("--threads", type=int, default=None, help="Torch intra-op threads.")
def main(threads):
    """Relation-aware matching and grounding of expressions in scenes."""
    if threads:
        torch.set_num_threads(threads)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML/JSON config.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Corpus directory.")
@click.option("--seed", type=int, default=None)
@click.option("--n-train", type=int, default=None)
@click.option("--n-indist", type=int, default=None)
@click.option("--n-ood", type=int, default=None)
def gen(config_path, out, seed, n_train, n_indist, n_ood):
    """Generate a synthetic corpus (samples.jsonl, splits.json, stats.json)."""
    from .synthgen import SynthConfig, write_corpus

    cfg = SynthConfig.from_dict({**load_config(config_path, "synth"),
                                 **overrides(seed=seed, n_train=n_train, n_indist=n_indist, n_ood=n_ood)})
    stats = write_corpus(out, cfg)
    full = stats["full"]
    click.echo(f"wrote {full['samples']} samples to {out} (relation TV {full['relation_tv']:.4f})")


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Checkpoint path.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--preset", type=click.Choice(["desk", "full", "smoke"]), default="desk")
@click.option("--seed", type=int, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--warmup", type=int, default=None)
@click.option("--lr", type=float, default=None, help="Reasoning learning rate.")
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None, help="JSON-lines training log.")
def train(corpus, out, config_path, preset, seed, iterations, batch_size, warmup, lr, log_path):
    """Train a model on the corpus' train split."""
    from .learning import TrainConfig, default_model_config
    from .learning import train as run_train

    cfg_file = load_config(config_path, "train")
    model_kw = load_config(config_path, "model") if config_path else {}
    if "model" in cfg_file:
        model_kw = cfg_file.pop("model")
    tcfg = TrainConfig.preset(preset, **{**cfg_file, **overrides(seed=seed, iterations=iterations,
                                                                 batch_size=batch_size, warmup=warmup,
                                                                 lr_reasoning=lr)})
    samples = load_corpus(corpus)
    train_set = [s for s in samples if s.split == "train"] or samples
    mcfg = default_model_config(train_set, tcfg.k, **{k: v for k, v in model_kw.items() if k not in ("vocab", "obj_dim", "k")})
    model, log = run_train(train_set, tcfg, model_config=mcfg, log_path=log_path, checkpoint_path=out)
    last = log[-1] if log else {}
    click.echo(f"trained {tcfg.iterations} iterations; final loss {last.get('total', float('nan')):.4f}; saved {out}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--split", default=None, help="Restrict to one split (default: all non-train samples).")
@click.option("--mode", type=click.Choice(["joint", "oracle"]), default="joint")
@click.option("--no-mp", is_flag=True, help="Use local beliefs only (no message passing).")
@click.option("--out", default=None, type=click.Path(dir_okay=False), help="Write the JSON report here.")
@click.option("--csv", "csv_path", default=None, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=0)
def eval_cmd(checkpoint, corpus, split, mode, no_mp, out, csv_path, seed):
    """Evaluate a checkpoint; prints a table and writes a JSON report."""
    from .evalkit import evaluate
    from .learning import load_checkpoint

    torch.manual_seed(seed)
    samples = load_corpus(corpus, split)
    if split is None:
        samples = [s for s in samples if s.split != "train"] or samples
    model, _ = load_checkpoint(checkpoint)
    report = evaluate(model, samples, mode, message_passing=not no_mp)
    if out:
        Path(out).write_text(report.to_json() + "\n")
    if csv_path:
        Path(csv_path).write_text(report.to_csv())
    click.echo(report.to_text())


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--sample-id", default=None, help="Sample to trace (default: the first one).")
@click.option("--mode", type=click.Choice(["joint", "oracle"]), default="joint")
@click.option("--out", default=None, type=click.Path(dir_okay=False))
@click.option("--verify", is_flag=True, help="Replay the trace and check it reproduces the prediction.")
@click.option("--seed", type=int, default=0)
def trace(checkpoint, corpus, sample_id, mode, out, verify, seed):
    """Record the module-level program executed for one sample."""
    from .learning import load_checkpoint
    from .propagate import ProgramTrace, replay
    from .readout import predict, prediction_from_trace

    torch.manual_seed(seed)
    samples = load_corpus(corpus)
    if sample_id is not None:
        samples = [s for s in samples if s.id == sample_id]
        if not samples:
            raise KeyError(f"sample {sample_id!r} not in corpus")
    sample = samples[0]
    model, _ = load_checkpoint(checkpoint)
    tr = ProgramTrace()
    pred = predict(sample, model, mode, trace=tr)
    doc = {"sample": sample.id, "mode": mode, "prediction": pred.to_dict(), "steps": tr.to_json()}
    emit(json.dumps(doc, indent=1), out)
    if verify:
        loaded = ProgramTrace.from_json(json.loads(json.dumps(doc))["steps"])
        outputs = replay(loaded, model.classifier, model.dtype)
        rebuilt = prediction_from_trace(loaded, outputs, mode)
        same = (rebuilt["match_prob"] == pred.match_prob and rebuilt["grounded_id"] == pred.grounded_id
                and rebuilt["mismatched_relation_id"] == pred.mismatched_relation_id
                and all(st["output"] == o for st, o in zip(loaded.steps, outputs)))
        click.echo(f"verify: {'ok' if same else 'MISMATCH'}", err=True)
        if not same:
            sys.exit(1)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--split", default=None)
@click.option("--out", default=None, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=0)
def diagnose(checkpoint, corpus, split, out, seed):
    """Intermediate diagnosis: recall@k with and without message passing."""
    from .evalkit import diagnose as run_diagnose
    from .evalkit import diagnosis_text
    from .learning import load_checkpoint

    torch.manual_seed(seed)
    samples = load_corpus(corpus, split)
    model, _ = load_checkpoint(checkpoint)
    d = run_diagnose(model, samples)
    if out:
        Path(out).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
    click.echo(diagnosis_text(d))


@main.command()
@click.option("--seed", type=int, default=0)
@click.option("--tol", type=float, default=1e-4)
@click.option("--out", default=None, type=click.Path(dir_okay=False))
def gradcheck(seed, tol, out):
    """Finite-difference gradient checks on tiny 64-bit instances."""
    from .gradcheck import run_suite

    summary = run_suite(seed, tol)
    for c in summary["cases"]:
        click.echo(f"{c['shape']:<6} {c['objective']:<15} max rel err {c['max_rel_error']:.2e} "
                   f"({'ok' if c['passed'] else 'FAIL'})")
    if out:
        Path(out).write_text(json.dumps(summary, indent=1) + "\n")
    if not summary["passed"]:
        sys.exit(1)


if __name__ == "__main__":
    main()
