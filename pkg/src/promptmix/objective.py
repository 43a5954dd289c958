"""The three-part training objective and its gradient flow.

Per instance: a classification cross-entropy over cosine scores against the
top-k mixed class features, a KL term aligning the router's gating
distribution with the hard-template reference, and a grouped text-level
supervision term keeping each soft prompt's class features close to its own
group's hard-template features. The total is cls + w_router * router +
w_text * text; one backward pass populates gradients for exactly the soft
prompt contexts and the router parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoders import TextEncoder
from .errors import HyperparameterError, InvalidInputError, ShapeError
from .prompts import ClassCatalog, PromptBank, SoftPrompt, TemplateGroup, class_text_features
from .router import (
    GroupFeatureCache,
    RouterParameters,
    TopKSelection,
    gate,
    hard_gating_distribution,
    select_topk,
)


@dataclass
class LossBreakdown:
    """The three loss terms, their weights, and the weighted total."""

    cls: float
    router: float
    text: float
    total: float
    weight_router: float
    weight_text: float

    def __post_init__(self):
        recomputed = self.cls + self.weight_router * self.router + self.weight_text * self.text
        if abs(self.total - recomputed) > 1e-12:
            raise InvalidInputError(f"loss breakdown inconsistent: {self.total} vs {recomputed}")
        for name in ("cls", "router", "text", "total"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise InvalidInputError(f"loss term {name} is {v}")


@dataclass
class MixtureOutput:
    """Mixed class features for one instance plus its cosine scores."""

    features: ad.Tensor  # (|C|, d)
    logits: ad.Tensor  # (|C|,) cosines against the image feature
    selection: TopKSelection


def mixture_class_features(selection: TopKSelection, per_prompt_features: list[ad.Tensor]) -> ad.Tensor:
    """Row-wise convex combination of the selected prompts' class features.

    Deliberately not re-normalized; the downstream cosine handles scale.
    """
    if len(per_prompt_features) != selection.k:
        raise ShapeError(f"{len(per_prompt_features)} feature matrices for k={selection.k}")
    return ad.weighted_sum(per_prompt_features, selection.weights)


def mix_and_score(image_feature, selection: TopKSelection, per_prompt_features: list[ad.Tensor]) -> MixtureOutput:
    v = ad.as_tensor(image_feature)
    mixed = mixture_class_features(selection, per_prompt_features)
    logits = ad.matmul(ad.normalize_rows(mixed), v)
    return MixtureOutput(mixed, logits, selection)


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if tau <= 0.0:
        raise HyperparameterError(f"temperature must be > 0, got {tau}")
    return tau


def classification_loss(image_feature, mixed_features, label: int, tau: float = 0.07) -> ad.Tensor:
    """Cross-entropy of softmax(cos(v, row_c) / tau) at the true class."""
    tau = _check_tau(tau)
    v = ad.as_tensor(image_feature)
    logits = ad.matmul(ad.normalize_rows(ad.as_tensor(mixed_features)), v)
    return ad.cross_entropy(ad.softmax(logits, tau), label)


def router_loss(w_router: ad.Tensor, w_hard) -> ad.Tensor:
    """KL(router gating || hard reference); the reference is a constant."""
    target = w_hard if isinstance(w_hard, ad.Tensor) else ad.constant(np.asarray(w_hard))
    if target.requires_grad:
        target = ad.constant(target.data)
    return ad.kl_divergence(w_router, target)


def text_supervision_loss(
    prompts: list[SoftPrompt],
    groups: list[TemplateGroup],
    cache: GroupFeatureCache,
    catalog: ClassCatalog,
    text_encoder: TextEncoder,
    tau: float = 0.07,
    features_by_group: dict[int, ad.Tensor] | None = None,
) -> ad.Tensor:
    """Average over groups and classes of -ln P(class | soft prompt).

    For one group, template i scores class c by the cosine between the hard
    feature of (template i, class c) and the soft prompt's feature for
    class c; each template's class-softmax probabilities are averaged
    *before* the log, then the mean negative log over classes is taken.
    Hard features come from the frozen cache, so gradients reach only the
    soft prompts.
    """
    tau = _check_tau(tau)
    if not prompts or len(prompts) != len(groups):
        raise InvalidInputError(f"{len(prompts)} prompts for {len(groups)} groups")
    if cache.num_groups != len(groups):
        raise ShapeError(f"cache covers {cache.num_groups} groups, need {len(groups)}")
    per_group_losses = []
    for g, (prompt, group) in enumerate(zip(prompts, groups)):
        block = cache.template_class_features[g]  # (|I_g|, |C|, d)
        if block.shape[0] == 0:
            raise InvalidInputError(f"group {group.name!r} has no templates in the cache")
        if block.shape[1] != len(catalog):
            raise ShapeError(f"cache has {block.shape[1]} classes, catalog has {len(catalog)}")
        if features_by_group is not None and g in features_by_group:
            soft = features_by_group[g]
        else:
            soft = class_text_features(prompt, catalog, text_encoder)
            if features_by_group is not None:
                features_by_group[g] = soft
        per_template = [
            ad.softmax(ad.dot_rows(ad.constant(block[i]), soft), tau)
            for i in range(block.shape[0])
        ]
        uniform = ad.constant(np.full(len(per_template), 1.0 / len(per_template)))
        averaged = ad.weighted_sum(per_template, uniform)
        per_group_losses.append(ad.scale(ad.mean_entries(ad.log(averaged)), -1.0))
    return ad.mean_entries(ad.stack_scalars(per_group_losses))


@dataclass
class LossSettings:
    """Knobs of the combined objective (teaching-config subset)."""

    tau: float = 0.07
    weight_router: float = 1.0
    weight_text: float = 5.0
    k: int = 2
    renormalize_topk: bool = True
    router_cls_grad: bool = True

    def __post_init__(self):
        _check_tau(self.tau)
        if self.weight_router < 0 or self.weight_text < 0:
            raise HyperparameterError("loss weights must be >= 0")


def total_loss(
    batch: list[tuple[np.ndarray, int]],
    bank: PromptBank,
    router_params: RouterParameters,
    router_cache: GroupFeatureCache,
    catalog: ClassCatalog,
    text_encoder: TextEncoder,
    settings: LossSettings,
    text_cache: GroupFeatureCache | None = None,
    text_catalog: ClassCatalog | None = None,
    run_backward: bool = True,
) -> tuple[LossBreakdown, dict]:
    """Combined loss over a batch of (unit image feature, label) pairs.

    Classification uses ``catalog``; the text term may use a wider
    ``text_catalog`` (text-only supervision of extra class names) with its
    matching ``text_cache``. Returns the breakdown and per-instance stats;
    when ``run_backward`` the gradients land on the soft prompts and router.
    """
    if not batch:
        raise InvalidInputError("empty batch")
    text_catalog = text_catalog or catalog
    text_cache = text_cache or router_cache
    features_by_group: dict[int, ad.Tensor] = {}

    def features_for(g: int) -> ad.Tensor:
        if g not in features_by_group:
            features_by_group[g] = class_text_features(bank.prompts[g], catalog, text_encoder)
        return features_by_group[g]

    cls_terms, router_terms, kl_values = [], [], []
    for raw_feature, label in batch:
        v = ad.constant(np.asarray(raw_feature))
        probs = gate(v, router_params)
        selection = select_topk(probs, settings.k, settings.renormalize_topk)
        if not settings.router_cls_grad:
            selection = TopKSelection(selection.indices, ad.constant(selection.weights.data))
        scored = mix_and_score(v, selection, [features_for(g) for g in selection.indices])
        cls_terms.append(ad.cross_entropy(ad.softmax(scored.logits, settings.tau), label))
        w_hard = hard_gating_distribution(v.data, router_cache)
        term = router_loss(probs, w_hard)
        router_terms.append(term)
        kl_values.append(term.item())

    cls = ad.mean_entries(ad.stack_scalars(cls_terms))
    router = ad.mean_entries(ad.stack_scalars(router_terms))
    shared = features_by_group if text_catalog is catalog else None
    text = text_supervision_loss(
        bank.prompts, bank.groups, text_cache, text_catalog, text_encoder, settings.tau, shared
    )
    total = ad.add(ad.add(cls, ad.scale(router, settings.weight_router)), ad.scale(text, settings.weight_text))
    if run_backward:
        ad.backward(total)
    breakdown = LossBreakdown(
        cls=cls.item(),
        router=router.item(),
        text=text.item(),
        total=total.item(),
        weight_router=settings.weight_router,
        weight_text=settings.weight_text,
    )
    stats = {"kl_mean": float(np.mean(kl_values))}
    return breakdown, stats
