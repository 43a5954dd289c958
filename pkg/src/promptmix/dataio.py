"""Synthetic style-clustered datasets, their file format, and split sampling.

Examples are generated FROM the frozen encoders and hard-template features:
each (class, style) cell draws image features around the mean hard feature
of the style's template group for that class, then maps them back through
the image encoder's pseudo-inverse so the raw-input path stays exercised.
By construction (checked at generation time for the noiseless case) the
hard-template gating argmax recovers the style label at sigma = 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import EncoderBundle, EncoderSpec
from .errors import DatasetError, DatasetFormatError, HyperparameterError, InvalidInputError
from .prompts import ClassCatalog, TemplateGroup
from .router import GroupFeatureCache, group_hard_features, hard_gating_distribution

FORMAT_MAGIC = "PROMPTMIX-DS"
FORMAT_VERSION = "v1"

# Default class-name pool: single common words, so class tokens stay short.
CLASS_NAME_POOL = [
    "ant", "bear", "cat", "deer", "dog", "eagle", "fox", "frog", "goat", "horse",
    "koala", "lion", "lizard", "monkey", "moose", "mouse", "otter", "owl", "panda", "pig",
    "rabbit", "raven", "seal", "shark", "sheep", "sloth", "snail", "snake", "swan", "tiger",
    "toad", "trout", "turtle", "whale", "wolf", "zebra", "crab", "dove", "hawk", "mole",
]


def default_class_names(count: int) -> list[str]:
    if count <= len(CLASS_NAME_POOL):
        return CLASS_NAME_POOL[:count]
    extra = [f"entity{i}" for i in range(count - len(CLASS_NAME_POOL))]
    return CLASS_NAME_POOL + extra


@dataclass
class Dataset:
    """Raw input vectors with class and style labels, plus provenance."""

    class_names: list[str]
    num_styles: int
    per_cell: int
    sigma: float
    seed: int
    encoder_spec: EncoderSpec
    raw: np.ndarray = field(repr=False)  # (N, input_dim)
    class_indices: np.ndarray = field(repr=False)  # (N,)
    style_indices: np.ndarray = field(repr=False)  # (N,)

    def __post_init__(self):
        n = self.raw.shape[0]
        if self.class_indices.shape != (n,) or self.style_indices.shape != (n,):
            raise DatasetError("label arrays do not match the raw array")
        if n and (self.class_indices.min() < 0 or self.class_indices.max() >= len(self.class_names)):
            raise DatasetError("class index out of range")
        if n and (self.style_indices.min() < 0 or self.style_indices.max() >= self.num_styles):
            raise DatasetError("style index out of range")

    def __len__(self) -> int:
        return self.raw.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def indices_of_classes(self, classes: list[int]) -> list[int]:
        keep = set(classes)
        return [i for i in range(len(self)) if int(self.class_indices[i]) in keep]


def generate_synthetic_dataset(
    num_classes: int,
    num_styles: int,
    per_cell: int,
    sigma: float,
    seed: int,
    encoders: EncoderBundle,
    groups: list[TemplateGroup],
    class_names: list[str] | None = None,
) -> Dataset:
    """Draw ``per_cell`` examples for every (class, style) cell.

    Style s is anchored to template group s: the cell's image features are
    ``normalize(mean hard feature of (group s, class c) + N(0, sigma^2))``,
    mapped back to raw inputs through the image encoder's pseudo-inverse.
    At sigma = 0 the hard-gating argmax over the given groups must equal
    the style label for every cell; generation fails loudly otherwise.
    """
    if num_styles > len(groups):
        raise HyperparameterError(f"{num_styles} styles need at least that many groups, got {len(groups)}")
    if num_classes < 1 or num_styles < 1 or per_cell < 1:
        raise HyperparameterError("classes, styles and per_cell must all be >= 1")
    if sigma < 0:
        raise HyperparameterError(f"sigma must be >= 0, got {sigma}")
    names = list(class_names) if class_names is not None else default_class_names(num_classes)
    if len(names) != num_classes:
        raise InvalidInputError(f"{len(names)} class names for {num_classes} classes")

    catalog = ClassCatalog.build(names, encoders.tokenizer, encoders.embeddings)
    cache = group_hard_features(groups, catalog, encoders)
    d = encoders.spec.feature_dim

    raws, cls_idx, sty_idx = [], [], []
    for c in range(num_classes):
        for s in range(num_styles):
            anchor = cache.template_class_features[s][:, c, :].mean(axis=0)
            rng = np.random.default_rng(np.random.SeedSequence([seed, 5, c, s]))
            noise = rng.normal(0.0, sigma, size=(per_cell, d)) if sigma > 0 else np.zeros((per_cell, d))
            for j in range(per_cell):
                raw = encoders.image.preimage(anchor + noise[j])
                raws.append(raw)
                cls_idx.append(c)
                sty_idx.append(s)
            if sigma == 0.0:
                feature = encoders.image.encode(raws[-1])
                winner = int(np.argmax(hard_gating_distribution(feature, cache)))
                if winner != s:
                    raise DatasetError(
                        f"groups are not style-separable: cell (class {names[c]!r}, style {s}) "
                        f"routes to group {winner} at sigma=0"
                    )

    dataset = Dataset(
        class_names=names,
        num_styles=num_styles,
        per_cell=per_cell,
        sigma=float(sigma),
        seed=seed,
        encoder_spec=encoders.spec,
        raw=np.array(raws),
        class_indices=np.array(cls_idx, dtype=np.int64),
        style_indices=np.array(sty_idx, dtype=np.int64),
    )
    return dataset


def style_agreement(dataset: Dataset, cache: GroupFeatureCache, encoders: EncoderBundle) -> float:
    """Fraction of examples whose hard-gating argmax equals their style label."""
    hits = 0
    for i in range(len(dataset)):
        feature = encoders.image.encode(dataset.raw[i])
        if int(np.argmax(hard_gating_distribution(feature, cache))) == int(dataset.style_indices[i]):
            hits += 1
    return hits / len(dataset)


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "classes": dataset.num_classes,
        "styles": dataset.num_styles,
        "dim": dataset.raw.shape[1],
        "seed": dataset.seed,
        "sigma": dataset.sigma,
        "per_cell": dataset.per_cell,
        "names": dataset.class_names,
        "encoder": dataset.encoder_spec.to_dict(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{FORMAT_MAGIC} {FORMAT_VERSION} {json.dumps(header)}\n")
        for i in range(len(dataset)):
            row = ",".join(repr(float(x)) for x in dataset.raw[i])
            fh.write(f"{int(dataset.class_indices[i])},{int(dataset.style_indices[i])},{row}\n")


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError("empty dataset file")
    parts = lines[0].split(" ", 2)
    if len(parts) != 3 or parts[0] != FORMAT_MAGIC:
        raise DatasetFormatError(f"not a {FORMAT_MAGIC} file")
    if parts[1] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {parts[1]!r}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(parts[2])
        names = list(header["names"])
        styles = int(header["styles"])
        dim = int(header["dim"])
        per_cell = int(header["per_cell"])
        spec = EncoderSpec.from_dict(header["encoder"])
        expected = int(header["classes"]) * styles * per_cell
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"malformed header: {exc}") from exc
    if len(names) != int(header["classes"]):
        raise DatasetFormatError("header class count does not match names")

    records = [line for line in lines[1:] if line]
    if len(records) != expected:
        raise DatasetFormatError(f"expected {expected} records, found {len(records)}")
    raw = np.empty((len(records), dim))
    cls_idx = np.empty(len(records), dtype=np.int64)
    sty_idx = np.empty(len(records), dtype=np.int64)
    for i, line in enumerate(records):
        fields = line.split(",")
        if len(fields) != dim + 2:
            raise DatasetFormatError(f"record {i}: expected {dim + 2} fields, found {len(fields)}")
        try:
            cls_idx[i] = int(fields[0])
            sty_idx[i] = int(fields[1])
            raw[i] = [float(x) for x in fields[2:]]
        except ValueError as exc:
            raise DatasetFormatError(f"record {i}: {exc}") from exc
    return Dataset(
        class_names=names,
        num_styles=styles,
        per_cell=per_cell,
        sigma=float(header["sigma"]),
        seed=int(header["seed"]),
        encoder_spec=spec,
        raw=raw,
        class_indices=cls_idx,
        style_indices=sty_idx,
    )


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitSpec:
    """Disjoint base/new class partition for generalization runs."""

    base_classes: list[int]
    new_classes: list[int]
    shots: int
    seed: int

    def __post_init__(self):
        if set(self.base_classes) & set(self.new_classes):
            raise InvalidInputError("base and new classes overlap")


def split_base_new(class_names: list[str], seed: int, shots: int = 16) -> SplitSpec:
    """Seeded shuffle; the first ceil(C/2) classes become the base half."""
    c = len(class_names)
    if c < 2:
        raise HyperparameterError(f"base/new split needs >= 2 classes, got {c}")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(c)
    cut = math.ceil(c / 2)
    return SplitSpec(
        base_classes=sorted(int(i) for i in perm[:cut]),
        new_classes=sorted(int(i) for i in perm[cut:]),
        shots=shots,
        seed=seed,
    )


def sample_few_shot(
    dataset: Dataset,
    shots: int,
    seed: int,
    class_subset: list[int] | None = None,
) -> tuple[list[int], list[int]]:
    """Per-class train/test split: exactly ``shots`` train examples per class.

    Sampling is without replacement and style-stratified whenever ``shots``
    divides evenly across styles with enough examples per style bucket.
    The remainder of each class becomes test data.
    """
    if shots < 1:
        raise HyperparameterError(f"shots must be >= 1, got {shots}")
    classes = list(class_subset) if class_subset is not None else list(range(dataset.num_classes))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 6]))
    by_class: dict[int, list[int]] = {c: [] for c in classes}
    for i in range(len(dataset)):
        c = int(dataset.class_indices[i])
        if c in by_class:
            by_class[c].append(i)

    train: list[int] = []
    test: list[int] = []
    per_style = shots // dataset.num_styles if shots % dataset.num_styles == 0 else 0
    for c in classes:
        pool = by_class[c]
        if len(pool) < shots:
            raise DatasetError(f"class {dataset.class_names[c]!r} has {len(pool)} examples, needs {shots}")
        buckets = [[i for i in pool if int(dataset.style_indices[i]) == s] for s in range(dataset.num_styles)]
        if per_style and all(len(b) >= per_style for b in buckets):
            chosen: list[int] = []
            for bucket in buckets:
                chosen.extend(rng.choice(bucket, size=per_style, replace=False).tolist())
        else:
            chosen = rng.choice(pool, size=shots, replace=False).tolist()
        chosen_set = set(int(i) for i in chosen)
        train.extend(sorted(chosen_set))
        test.extend(i for i in pool if i not in chosen_set)
    return sorted(train), sorted(test)
