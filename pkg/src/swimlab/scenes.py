"""Synthetic grid scenes, instance masks, and the JSONL dataset format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from swimlab.numerics import SeededRng
from swimlab.prompt import (
    COLORS,
    DEFAULT_TEMPLATES,
    SHAPES,
    TEXTURES,
    SynonymTable,
    Vocabulary,
    nlref_lite,
    perturb_synonyms,
    refine,
    tokenize_and_locate,
)

FEATURE_DIM = len(COLORS) + len(SHAPES) + len(TEXTURES) + 2
FOOTPRINT_SIDES = (2, 3)
MIN_FOOTPRINT = min(FOOTPRINT_SIDES) ** 2
MAX_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    texture: str
    cells: tuple[tuple[int, int], ...]

    def attrs(self) -> dict[str, str]:
        return {"shape": self.shape, "color": self.color, "texture": self.texture}


@dataclass(frozen=True)
class Scene:
    grid_h: int
    grid_w: int
    objects: tuple[SceneObject, ...]
    frames: int = 1  # extension point for multi-frame samples; only 1 is used

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def features(self) -> np.ndarray:
        """(grid_h * grid_w, FEATURE_DIM) row-major cell features; empty cells are zero."""
        feats = np.zeros((self.grid_h, self.grid_w, FEATURE_DIM))
        nc, ns, nt = len(COLORS), len(SHAPES), len(TEXTURES)
        for obj in self.objects:
            ci, si, ti = COLORS.index(obj.color), SHAPES.index(obj.shape), TEXTURES.index(obj.texture)
            for r, c in obj.cells:
                feats[r, c, ci] = 1.0
                feats[r, c, nc + si] = 1.0
                feats[r, c, nc + ns + ti] = 1.0
                feats[r, c, nc + ns + nt] = r / max(self.grid_h - 1, 1)
                feats[r, c, nc + ns + nt + 1] = c / max(self.grid_w - 1, 1)
        return feats.reshape(self.num_tokens, FEATURE_DIM)


@dataclass(frozen=True)
class InstanceMask:
    grid_h: int
    grid_w: int
    cells: tuple[tuple[int, int], ...]

    def array(self) -> np.ndarray:
        m = np.zeros((self.grid_h, self.grid_w), dtype=np.float64)
        for r, c in self.cells:
            m[r, c] = 1.0
        return m

    def rle(self) -> list[list[int]]:
        """Foreground runs as ``[start, length]`` over the row-major flattening."""
        runs: list[list[int]] = []
        for r, c in self.cells:
            idx = r * self.grid_w + c
            if runs and runs[-1][0] + runs[-1][1] == idx:
                runs[-1][1] += 1
            else:
                runs.append([idx, 1])
        return runs

    @classmethod
    def from_rle(cls, grid_h: int, grid_w: int, runs: Sequence[Sequence[int]]) -> InstanceMask:
        cells = []
        for start, length in runs:
            if length < 1 or start < 0 or start + length > grid_h * grid_w:
                raise ValueError(f"bad run {start},{length}")
            cells.extend(divmod(i, grid_w) for i in range(start, start + length))
        if cells != sorted(set(cells)):
            raise ValueError("runs overlap or are out of order")
        return cls(grid_h, grid_w, tuple(cells))


@dataclass(frozen=True)
class DatasetRecord:
    id: int
    scene: Scene
    prompt_raw: str
    prompt_refined: str
    noun_span: tuple[int, int]
    answer: str
    mask: InstanceMask


# ---------------------------------------------------------------- generation


def _unique_objects(objects: Sequence[SceneObject]) -> list[int]:
    keys = [(o.shape, o.color, o.texture) for o in objects]
    return [i for i, k in enumerate(keys) if keys.count(k) == 1]


def generate_scene(rng: SeededRng, grid: tuple[int, int] = (12, 12), n_objects: tuple[int, int] = (3, 5)) -> Scene:
    """Place rectangular objects with a one-cell gap so footprints never touch."""
    h, w = grid
    if h < 4 or w < 4:
        raise ValueError(f"grid must be at least 4x4, got {h}x{w}")
    lo, hi = n_objects
    if lo < 1 or hi < lo:
        raise ValueError(f"bad object range {n_objects}")
    n = int(rng.integers(lo, hi + 1))
    if n * MIN_FOOTPRINT > h * w:
        raise ValueError("scene too crowded")

    while True:
        attrs = [
            (SHAPES[rng.choice(len(SHAPES))], COLORS[rng.choice(len(COLORS))], TEXTURES[rng.choice(len(TEXTURES))])
            for _ in range(n)
        ]
        if any(attrs.count(a) == 1 for a in attrs):
            break

    blocked = np.zeros((h, w), dtype=bool)
    objects = []
    for shape, color, texture in attrs:
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            oh = FOOTPRINT_SIDES[rng.choice(len(FOOTPRINT_SIDES))]
            ow = FOOTPRINT_SIDES[rng.choice(len(FOOTPRINT_SIDES))]
            if oh > h or ow > w:
                continue
            r0 = int(rng.integers(0, h - oh + 1))
            c0 = int(rng.integers(0, w - ow + 1))
            if blocked[r0 : r0 + oh, c0 : c0 + ow].any():
                continue
            blocked[max(r0 - 1, 0) : r0 + oh + 1, max(c0 - 1, 0) : c0 + ow + 1] = True
            cells = tuple((r, c) for r in range(r0, r0 + oh) for c in range(c0, c0 + ow))
            objects.append(SceneObject(shape, color, texture, cells))
            break
        else:
            raise ValueError("scene too crowded")
    return Scene(h, w, tuple(objects))


def generate_record(
    rng: SeededRng,
    scene: Scene,
    vocab: Vocabulary,
    record_id: int = 0,
    templates: Sequence[str] = DEFAULT_TEMPLATES,
    synonyms: SynonymTable | None = None,
    synonym_rate: float = 0.0,
) -> DatasetRecord:
    """Pick a target, refine a templated question about its texture, attach its mask.

    Targets whose shortest expression avoids the texture word are preferred,
    so the answer is not spelled out in the question.
    """
    scene_attrs = [o.attrs() for o in scene.objects]
    describable, leaky = [], []
    for i in _unique_objects(scene.objects):
        expr, _ = nlref_lite(scene_attrs[i], scene_attrs)
        (leaky if scene.objects[i].texture in expr.split() else describable).append(i)
    pool = describable or leaky
    if not pool:
        raise ValueError("ambiguous referent")
    target = pool[rng.choice(len(pool))]
    obj = scene.objects[target]
    raw = templates[rng.choice(len(templates))]
    prompt = refine(raw, scene_attrs[target], scene_attrs, vocab)
    refined = prompt.refined_human
    if synonyms is not None and synonym_rate > 0 and rng.uniform() < synonym_rate:
        refined, _ = perturb_synonyms(refined, synonyms, rng)
    _, span = tokenize_and_locate(refined, vocab)
    mask = InstanceMask(scene.grid_h, scene.grid_w, tuple(sorted(obj.cells)))
    return DatasetRecord(record_id, scene, raw, refined, span, obj.texture, mask)


def generate_dataset(
    seed: int,
    num: int,
    vocab: Vocabulary,
    split: int = 0,
    grid: tuple[int, int] = (12, 12),
    n_objects: tuple[int, int] = (3, 5),
    templates: Sequence[str] = DEFAULT_TEMPLATES,
    synonyms: SynonymTable | None = None,
    synonym_rate: float = 0.0,
) -> list[DatasetRecord]:
    """Record i draws from its own stream keyed by (seed, split, i), so a
    smaller dataset is always a prefix of a larger one with the same seed."""
    records = []
    for i in range(num):
        rng = SeededRng([seed, split, i])
        try:
            scene = generate_scene(rng, grid, n_objects)
            records.append(generate_record(rng, scene, vocab, i, templates, synonyms, synonym_rate))
        except ValueError as exc:
            raise ValueError(f"sample {i}: {exc}") from exc
    return records


# ---------------------------------------------------------------- persistence


def record_to_json(rec: DatasetRecord) -> str:
    obj = {
        "id": rec.id,
        "grid": {"h": rec.scene.grid_h, "w": rec.scene.grid_w},
        "objects": [
            {"shape": o.shape, "color": o.color, "texture": o.texture, "cells": [list(c) for c in o.cells]}
            for o in rec.scene.objects
        ],
        "prompt_raw": rec.prompt_raw,
        "prompt_refined": rec.prompt_refined,
        "noun_span": list(rec.noun_span),
        "answer": rec.answer,
        "mask_rle": rec.mask.rle(),
    }
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def record_from_json(line: str) -> DatasetRecord:
    obj = json.loads(line)
    h, w = int(obj["grid"]["h"]), int(obj["grid"]["w"])
    objects = tuple(
        SceneObject(o["shape"], o["color"], o["texture"], tuple((int(r), int(c)) for r, c in o["cells"]))
        for o in obj["objects"]
    )
    s, e = obj["noun_span"]
    return DatasetRecord(
        id=int(obj["id"]),
        scene=Scene(h, w, objects),
        prompt_raw=obj["prompt_raw"],
        prompt_refined=obj["prompt_refined"],
        noun_span=(int(s), int(e)),
        answer=obj["answer"],
        mask=InstanceMask.from_rle(h, w, obj["mask_rle"]),
    )


def write_dataset(records: Iterable[DatasetRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(record_to_json(rec))
            fh.write("\n")


def read_dataset(path: str | Path) -> list[DatasetRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: malformed record on line {lineno}: {exc}") from exc
    return records
