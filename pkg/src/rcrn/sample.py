"""The unit of training and evaluation: one (scene, expression) pair with labels."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .graphs import Box, LanguageSceneGraph, VisualScene, serialize


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    tokens: tuple[str, ...]
    graph: LanguageSceneGraph
    scene: VisualScene
    match: int
    referent_box: Box | None = None
    mismatched_relation: int | None = None
    split: str = "train"
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def build(cls, id: str, graph: LanguageSceneGraph, scene: VisualScene, match: int, **kw) -> "Sample":
        """Fill tokens and phrase spans by linearising the graph."""
        tokens, graph = serialize(graph)
        return cls(id, tuple(tokens), graph, scene, int(match), **kw)

    @property
    def num_entities(self) -> int:
        return self.graph.num_entities

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "graph": self.graph.to_dict(),
            "scene": self.scene.to_dict(),
            "match": self.match,
            "referent_box": None if self.referent_box is None else [float(v) for v in self.referent_box],
            "mismatched_relation": self.mismatched_relation,
            "split": self.split,
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        box = d.get("referent_box")
        return cls(
            id=str(d["id"]),
            tokens=tuple(d["tokens"]),
            graph=LanguageSceneGraph.from_dict(d["graph"]),
            scene=VisualScene.from_dict(d["scene"]),
            match=int(d["match"]),
            referent_box=None if box is None else tuple(float(v) for v in box),
            mismatched_relation=d.get("mismatched_relation"),
            split=d.get("split", "train"),
            extra=d.get("extra", {}),
        )


def dump_jsonl(samples: Iterable[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def load_jsonl(path: str | Path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(Sample.from_dict(json.loads(line)))
    return out


def build_vocab(samples: Iterable[Sample]) -> list[str]:
    words = set()
    for s in samples:
        words.update(s.tokens)
    return ["<unk>"] + sorted(words)
