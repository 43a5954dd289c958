"""Instance gating: a linear router over experts plus the hard-template reference.

The trainable router maps a unit-norm image feature to a distribution over
the G experts. Its distillation target is the reference distribution built
from frozen hard-template group features: softmax over the cosine
similarities between the image feature and each group's mean text feature.
The reference path is computed outside the gradient graph on purpose; it is
a constant target.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoders import EncoderBundle
from .errors import HyperparameterError, InvalidInputError, ShapeError
from .prompts import ClassCatalog, TemplateGroup, parse_template


@dataclass
class RouterParameters:
    """Single linear layer: logits = weight^T v + bias."""

    weight: ad.Tensor  # (d, G), trainable
    bias: ad.Tensor  # (G,), trainable

    @classmethod
    def create(cls, feature_dim: int, num_experts: int, seed: int, init_scale: float = 0.01) -> "RouterParameters":
        # Small seeded noise instead of zeros so top-k selection is
        # input-dependent from the first step; zeros would freeze the
        # selection on the lowest-index experts until gradients arrive.
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
        weight = ad.parameter(rng.normal(0.0, init_scale, size=(feature_dim, num_experts)), name="router.weight")
        bias = ad.parameter(np.zeros(num_experts), name="router.bias")
        return cls(weight, bias)

    @property
    def num_experts(self) -> int:
        return self.weight.data.shape[1]

    def trainable(self) -> list[ad.Tensor]:
        return [self.weight, self.bias]


def gate(image_feature, params: RouterParameters) -> ad.Tensor:
    """Gating distribution over experts for one unit-norm image feature."""
    v = ad.as_tensor(image_feature)
    if v.data.ndim != 1 or v.data.shape[0] != params.weight.data.shape[0]:
        raise ShapeError(f"image feature {v.data.shape} vs router weight {params.weight.data.shape}")
    logits = ad.add(ad.matmul(v, params.weight), params.bias)
    return ad.softmax(logits, 1.0)


@dataclass
class TopKSelection:
    """K expert indices in descending gate probability, plus mixing weights."""

    indices: list[int]
    weights: ad.Tensor  # (K,); renormalized to sum 1 unless disabled

    @property
    def k(self) -> int:
        return len(self.indices)


def select_topk(dist: ad.Tensor, k: int, renormalize: bool = True) -> TopKSelection:
    """Keep the K most probable experts; ties go to the lower index.

    With ``renormalize`` the kept probabilities are rescaled to sum to 1
    (gradients flow through the rescaling); otherwise the raw gate
    probabilities are used as-is.
    """
    dist = ad.as_tensor(dist)
    if dist.data.ndim != 1:
        raise ShapeError("select_topk takes a 1-D distribution")
    g = dist.data.shape[0]
    if not 1 <= k <= g:
        raise HyperparameterError(f"top-k needs 1 <= k <= {g}, got {k}")
    order = np.argsort(-dist.data, kind="stable")  # stable: ties keep lower index first
    indices = [int(i) for i in order[:k]]
    selected = ad.stack_scalars([ad.pick(dist, i) for i in indices])
    weights = ad.div(selected, ad.sum_entries(selected)) if renormalize else selected
    return TopKSelection(indices, weights)


@dataclass
class GroupFeatureCache:
    """Frozen text features of every hard template and their group means.

    ``template_class_features[g][i, c]`` is the unit feature of group g's
    i-th template filled with class c; ``group_features[g]`` is the
    normalized mean over that group's templates and all classes. Rebuilt
    whenever the catalog or the groups change (see ``fingerprint``).
    """

    group_features: np.ndarray  # (G, d), unit rows
    template_class_features: list[np.ndarray] = field(repr=False)  # per group: (|I_g|, |C|, d)
    fingerprint: str = ""

    @property
    def num_groups(self) -> int:
        return self.group_features.shape[0]

    def checksum(self) -> str:
        h = hashlib.sha256(self.group_features.tobytes())
        for block in self.template_class_features:
            h.update(block.tobytes())
        return h.hexdigest()


def cache_fingerprint(groups: list[TemplateGroup], catalog: ClassCatalog) -> str:
    h = hashlib.sha256()
    for g in groups:
        for t in g.templates:
            h.update(t.encode("utf-8"))
            h.update(b"\x00")
        h.update(b"\x01")
    for name in catalog.names:
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def group_hard_features(groups: list[TemplateGroup], catalog: ClassCatalog, encoders: EncoderBundle) -> GroupFeatureCache:
    """Encode every (template, class) pair and average into group features."""
    if not groups:
        raise InvalidInputError("no template groups")
    per_group = []
    means = []
    for group in groups:
        block = np.empty((len(group.templates), len(catalog), encoders.spec.feature_dim))
        for i, template in enumerate(group.templates):
            for c, name in enumerate(catalog.names):
                _, _, filled = parse_template(template, name)
                block[i, c] = encoders.encode_string(filled).data
        block.flags.writeable = False
        per_group.append(block)
        means.append(block.mean(axis=(0, 1)))
    group_features = np.stack(means)
    norms = np.linalg.norm(group_features, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise InvalidInputError("a group's mean hard feature collapsed to zero")
    group_features = group_features / norms
    group_features.flags.writeable = False
    return GroupFeatureCache(group_features, per_group, cache_fingerprint(groups, catalog))


def hard_gating_distribution(image_feature: np.ndarray, cache: GroupFeatureCache) -> np.ndarray:
    """Reference gating distribution; a constant, no gradients flow into it."""
    v = np.asarray(image_feature, dtype=np.float64)
    if v.shape != (cache.group_features.shape[1],):
        raise ShapeError(f"image feature {v.shape} vs group features {cache.group_features.shape}")
    sims = cache.group_features @ v
    return ad.softmax(ad.constant(sims), 1.0).data
