"""Finite-difference verification of the full objective's gradients.

Builds small self-contained instances (two expert groups, three classes,
8-dimensional features), runs one combined forward/backward, and compares
every trainable parameter's analytic gradient against central differences.
Worst relative error is reported per parameter group: the prompt contexts,
the router weight, and the router bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoders import EncoderSpec
from .objective import LossSettings, total_loss
from .prompts import ClassCatalog, PromptBank, load_template_groups
from .router import RouterParameters, group_hard_features

TOY_TEMPLATES = """# plain
a photo of a {}.
a bright photo of a {}.
# stylized
a blurry photo of the {}.
{} texture.
"""

PARAMETER_GROUPS = ["prompt_contexts", "router_weight", "router_bias"]


@dataclass
class GradCheckReport:
    seeds: int
    eps: float
    tolerance: float
    worst: dict[str, float]  # parameter group -> worst relative error

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.worst.values())

    def lines(self) -> list[str]:
        out = []
        for group in PARAMETER_GROUPS:
            err = self.worst[group]
            verdict = "ok" if err <= self.tolerance else "FAIL"
            out.append(f"{group:16s} worst_rel_err={err:.3e}  {verdict}")
        return out


def _build_instance(seed: int, num_classes: int = 3, batch: int = 3):
    enc = EncoderSpec(seed=seed, vocab_size=512, embed_dim=8, feature_dim=8, input_dim=12).build()
    groups = load_template_groups(TOY_TEMPLATES, expert_range=(1, 20))
    names = ["cat", "dog", "bird", "fish"][:num_classes]
    catalog = ClassCatalog.build(names, enc.tokenizer, enc.embeddings)
    bank = PromptBank.initialize(groups, enc.tokenizer, enc.embeddings)
    router = RouterParameters.create(enc.spec.feature_dim, len(groups), seed, init_scale=0.3)
    cache = group_hard_features(groups, catalog, enc)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 9]))
    examples = []
    for _ in range(batch):
        raw = rng.normal(size=enc.spec.input_dim)
        examples.append((enc.image.encode(raw), int(rng.integers(0, num_classes))))
    return enc, catalog, bank, router, cache, examples


def _group_of(name: str) -> str:
    if name == "router.weight":
        return "router_weight"
    if name == "router.bias":
        return "router_bias"
    return "prompt_contexts"


def run_gradcheck(
    seeds: int = 20,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    settings: LossSettings | None = None,
) -> GradCheckReport:
    """Analytic vs central-difference gradients over seeded toy instances."""
    settings = settings or LossSettings(tau=0.07, weight_router=1.0, weight_text=5.0, k=2)
    worst = {group: 0.0 for group in PARAMETER_GROUPS}
    for seed in range(seeds):
        enc, catalog, bank, router, cache, examples = _build_instance(seed)
        params = bank.trainable() + router.trainable()
        ad.zero_grads(params)
        total_loss(examples, bank, router, cache, catalog, enc.text, settings)

        def loss_at(x: np.ndarray, p: ad.Tensor) -> float:
            saved = p.data
            p.data = x
            try:
                breakdown, _ = total_loss(
                    examples, bank, router, cache, catalog, enc.text, settings, run_backward=False
                )
                return breakdown.total
            finally:
                p.data = saved

        for p in params:
            analytic = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
            numeric = ad.finite_difference_gradient(lambda x, p=p: loss_at(x, p), p.data, eps)
            err = ad.relative_gradient_error(analytic, numeric)
            group = _group_of(p.name)
            worst[group] = max(worst[group], err)
    return GradCheckReport(seeds=seeds, eps=eps, tolerance=tolerance, worst=worst)
