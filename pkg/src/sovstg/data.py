"""Synthetic HOI corpus: shape scenes whose verbs are decidable from box geometry.

Humans are light-gray filled rectangles, objects are colored shapes. Every box
edge lies on the pixel grid, so annotated coordinates are exact dyadic
fractions and the geometric labeler gives the same answer on re-read values.
"""
from __future__ import annotations

import dataclasses
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import Box
from .structures import HOIInstance

ANNOTATION_VERSION = 1
HUMAN_COLOR = (0.8, 0.8, 0.8)

# name -> (shape, rgb)
OBJECT_ARCHETYPES = {
    "ball": ("circle", (1.0, 0.0, 0.0)),
    "box": ("square", (0.0, 1.0, 0.0)),
    "cone": ("triangle", (0.0, 0.0, 1.0)),
    "cup": ("square", (1.0, 1.0, 0.0)),
    "kite": ("triangle", (1.0, 0.0, 1.0)),
    "plate": ("circle", (0.0, 1.0, 1.0)),
}
VERBS = ("above", "below", "beside", "overlapping", "holding")


class SceneSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    canvas: int = 64
    objects: tuple[str, ...] = tuple(OBJECT_ARCHETYPES)
    verbs: tuple[str, ...] = VERBS
    pairs_per_image: tuple[int, int] = (1, 2)
    skew: float = 2.5
    seed: int = 0
    num_train: int = 2000
    num_test: int = 500
    human_size: tuple[int, int] = (10, 22)     # pixels, inclusive range
    object_size: tuple[int, int] = (6, 14)
    adjacency_gap: float = 0.05
    render: bool = True

    def __post_init__(self):
        if not self.verbs:
            raise SceneSpecError("verb vocabulary is empty")
        if not self.objects:
            raise SceneSpecError("object vocabulary is empty")
        unknown = [v for v in self.verbs if v not in VERBS]
        if unknown:
            raise SceneSpecError(f"verbs {unknown} have no geometric definition; known: {VERBS}")
        unknown = [o for o in self.objects if o not in OBJECT_ARCHETYPES]
        if unknown:
            raise SceneSpecError(f"objects {unknown} are not known archetypes; known: {sorted(OBJECT_ARCHETYPES)}")
        lo, hi = self.pairs_per_image
        if not 1 <= lo <= hi:
            raise SceneSpecError("pairs_per_image must satisfy 1 <= min <= max")
        if self.skew < 1:
            raise SceneSpecError("skew must be >= 1")
        if self.canvas < 16:
            raise SceneSpecError("canvas must be at least 16 pixels")
        for name in ("human_size", "object_size"):
            a, b = getattr(self, name)
            if not 1 <= a <= b < self.canvas // 2:
                raise SceneSpecError(f"{name} must satisfy 1 <= min <= max < canvas / 2")
        if self.num_train < 1 or self.num_test < 0:
            raise SceneSpecError("num_train must be positive and num_test non-negative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SceneSpecError(f"unknown scene spec keys: {unknown}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def _extents(a: Box, b: Box):
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    x_overlap = min(ax1, bx1) - max(ax0, bx0)
    y_overlap = min(ay1, by1) - max(ay0, by0)
    return x_overlap, y_overlap


def relation_verbs(subject: Box, obj: Box, verbs=VERBS, adjacency_gap: float = 0.05) -> tuple[int, ...]:
    """Indices (into ``verbs``) of every relation that holds between the two boxes.

    Image y grows downward, so ``above`` means the subject ends before the
    object starts vertically.
    """
    xo, yo = _extents(subject, obj)
    s0, s1 = subject.corners()[1], subject.corners()[3]
    o0, o1 = obj.corners()[1], obj.corners()[3]
    intersects = xo > 0 and yo > 0
    gap = max(-xo, -yo)
    holds = {
        "above": xo > 0 and s1 <= o0,
        "below": xo > 0 and s0 >= o1,
        "beside": yo > 0 and xo <= 0,
        "overlapping": intersects,
        "holding": not intersects and gap <= adjacency_gap,
    }
    return tuple(i for i, v in enumerate(verbs) if holds[v])


def _intersects(a: Box, b: Box) -> bool:
    xo, yo = _extents(a, b)
    return xo > 0 and yo > 0


def _pixel_box(x0, y0, w, h, canvas) -> Box:
    return Box((x0 + w / 2) / canvas, (y0 + h / 2) / canvas, w / canvas, h / canvas)


def class_probabilities(num_classes: int, skew: float) -> np.ndarray:
    p = skew ** -np.arange(num_classes, dtype=float)
    return p / p.sum()


@dataclass
class Scene:
    humans: list[Box] = field(default_factory=list)
    objects: list[tuple[Box, int]] = field(default_factory=list)
    instances: list[HOIInstance] = field(default_factory=list)


def _sample_box(rng, size_range, canvas):
    w = int(rng.integers(size_range[0], size_range[1] + 1))
    h = int(rng.integers(size_range[0], size_range[1] + 1))
    x0 = int(rng.integers(0, canvas - w + 1))
    y0 = int(rng.integers(0, canvas - h + 1))
    return _pixel_box(x0, y0, w, h, canvas)


def sample_scene(spec: SceneSpec, rng: np.random.Generator, max_tries: int = 500) -> Scene:
    """Place ``pairs_per_image`` human-object pairs, each built for a target verb.

    Boxes of different pairs never intersect. Afterwards every human-object
    combination with a non-empty relation set becomes an annotated instance.
    """
    probs = class_probabilities(len(spec.objects), spec.skew)
    n_pairs = int(rng.integers(spec.pairs_per_image[0], spec.pairs_per_image[1] + 1))
    scene = Scene()
    placed: list[Box] = []
    for _ in range(n_pairs):
        target = int(rng.integers(len(spec.verbs)))
        cls = int(rng.choice(len(spec.objects), p=probs))
        for _ in range(max_tries):
            h = _sample_box(rng, spec.human_size, spec.canvas)
            o = _sample_box(rng, spec.object_size, spec.canvas)
            if target not in relation_verbs(h, o, spec.verbs, spec.adjacency_gap):
                continue
            if any(_intersects(h, p) or _intersects(o, p) for p in placed):
                continue
            scene.humans.append(h)
            scene.objects.append((o, cls))
            placed += [h, o]
            break
    if not scene.humans:
        raise SceneSpecError("could not place any human-object pair; relax the size ranges")
    for h in scene.humans:
        for o, cls in scene.objects:
            verbs = relation_verbs(h, o, spec.verbs, spec.adjacency_gap)
            if verbs:
                scene.instances.append(HOIInstance(h, o, cls, verbs))
    return scene


def _shape_mask(box: Box, shape: str, canvas: int) -> np.ndarray:
    x0, y0, x1, y1 = (round(v * canvas) for v in box.corners())
    mask = np.zeros((canvas, canvas), dtype=bool)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    # pixel centers, relative to the box
    u = (xs + 0.5 - x0) / (x1 - x0)
    v = (ys + 0.5 - y0) / (y1 - y0)
    if shape == "square":
        inside = np.ones_like(u, dtype=bool)
    elif shape == "circle":
        inside = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif shape == "triangle":
        inside = np.abs(u - 0.5) <= v / 2
    else:
        raise ValueError(f"unknown shape {shape!r}")
    mask[y0:y1, x0:x1] = inside
    return mask


def render(humans: list[Box], objects: list[tuple[Box, str]], canvas: int) -> np.ndarray:
    """RGB uint8 image (H, W, 3). Overlapping shapes average their colors."""
    acc = np.zeros((canvas, canvas, 3))
    count = np.zeros((canvas, canvas, 1))
    layers = [(b, "square", HUMAN_COLOR) for b in humans]
    layers += [(b, *OBJECT_ARCHETYPES[name]) for b, name in objects]
    for box, shape, color in layers:
        m = _shape_mask(box, shape, canvas)
        acc[m] += color
        count[m] += 1
    img = acc / np.maximum(count, 1)
    return np.round(img * 255).astype(np.uint8)


def render_instances(instances: list[HOIInstance], object_names, canvas: int) -> np.ndarray:
    """Rebuild an image from its annotations alone (the renderer only needs boxes and classes)."""
    humans = list(dict.fromkeys(i.subject for i in instances))
    objects = list(dict.fromkeys((i.object, object_names[i.object_class]) for i in instances))
    return render(humans, objects, canvas)


def _instance_json(inst: HOIInstance, num_verbs: int) -> dict:
    return {"subject": inst.subject.as_list(), "object": inst.object.as_list(),
            "object_class": inst.object_class,
            "verbs": [1 if v in inst.verbs else 0 for v in range(num_verbs)]}


def _instance_from_json(d: dict) -> HOIInstance:
    verbs = tuple(i for i, bit in enumerate(d["verbs"]) if bit)
    return HOIInstance(Box(*d["subject"]), Box(*d["object"]), int(d["object_class"]), verbs)


def hoi_class_counts(images: list[dict]) -> Counter:
    counts = Counter()
    for img in images:
        for inst in img["instances"]:
            for v, bit in enumerate(inst["verbs"]):
                if bit:
                    counts[(inst["object_class"], v)] += 1
    return counts


def generate_dataset(spec: SceneSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write ``train.json``, ``test.json``, ``class_counts.json``, ``spec.json`` and PNGs.

    The split files share the vocabulary; ``hoi_classes`` lists every
    (object, verb) pair seen in training, sorted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    splits = {}
    for split, n in (("train", spec.num_train), ("test", spec.num_test)):
        images = []
        for i in range(n):
            scene = sample_scene(spec, rng)
            image_id = f"{split}_{i:05d}"
            entry = {"id": image_id, "width": spec.canvas, "height": spec.canvas,
                     "instances": [_instance_json(x, len(spec.verbs)) for x in scene.instances]}
            if spec.render:
                (out / split).mkdir(exist_ok=True)
                entry["file"] = f"{split}/{image_id}.png"
                pixels = render(scene.humans, [(b, spec.objects[c]) for b, c in scene.objects], spec.canvas)
                Image.fromarray(pixels).save(out / entry["file"])
            images.append(entry)
        splits[split] = images

    counts = hoi_class_counts(splits["train"])
    hoi_classes = sorted(counts)
    vocab = {"objects": list(spec.objects), "verbs": list(spec.verbs), "hoi_classes": [list(c) for c in hoi_classes]}
    paths = {}
    for split, images in splits.items():
        paths[split] = out / f"{split}.json"
        doc = {"version": ANNOTATION_VERSION, "split": split, **vocab, "images": images}
        paths[split].write_text(json.dumps(doc, indent=1, sort_keys=True))
    paths["class_counts"] = out / "class_counts.json"
    paths["class_counts"].write_text(json.dumps(
        {"hoi_classes": [{"hoi_class": i, "object": o, "verb": v, "count": counts[(o, v)]}
                         for i, (o, v) in enumerate(hoi_classes)]}, indent=1))
    paths["spec"] = out / "spec.json"
    paths["spec"].write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True))
    return paths


class HOIDataset:
    """One split of a generated corpus, fully materialized as tensors.

    Images come from the PNGs when present, otherwise they are re-rendered from
    the annotations.
    """

    def __init__(self, root: str | Path, split: str = "train", limit: int = 0):
        self.root = Path(root)
        path = self.root / f"{split}.json"
        if not path.exists():
            raise FileNotFoundError(f"no {split} annotations at {path}")
        doc = json.loads(path.read_text())
        self.object_names = doc["objects"]
        self.verb_names = doc["verbs"]
        self.hoi_classes = [tuple(c) for c in doc["hoi_classes"]]
        entries = doc["images"][:limit] if limit else doc["images"]
        self.image_ids = [e["id"] for e in entries]
        self.instances = [[_instance_from_json(d) for d in e["instances"]] for e in entries]
        pixels = np.stack([self._load(e, inst) for e, inst in zip(entries, self.instances)])
        self.images = torch.from_numpy(pixels).permute(0, 3, 1, 2).float() / 255.0

    def _load(self, entry, instances):
        f = entry.get("file")
        if f and (self.root / f).exists():
            return np.asarray(Image.open(self.root / f).convert("RGB"))
        return render_instances(instances, self.object_names, entry["width"])

    def __len__(self):
        return len(self.image_ids)

    def ground_truths(self) -> dict[str, list[HOIInstance]]:
        return dict(zip(self.image_ids, self.instances))

    def class_counts(self) -> dict[int, int]:
        """Training-instance count per HOI class index (read from ``class_counts.json``)."""
        doc = json.loads((self.root / "class_counts.json").read_text())
        return {e["hoi_class"]: e["count"] for e in doc["hoi_classes"]}


def load_scene_spec(path: str | Path) -> SceneSpec:
    from .config import read_mapping
    return SceneSpec.from_dict(read_mapping(path))
