"""Training loop, evaluation protocols, checkpoint state, and ablations.

Optimization is plain SGD with momentum 0.9 under a cosine-decay schedule
with linear warmup. Everything is deterministic given the config seed:
batch order derives from (seed, epoch), and resuming from a checkpoint
continues the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .dataio import Dataset, sample_few_shot, split_base_new
from .encoders import EncoderBundle
from .errors import HyperparameterError, InvalidInputError, MetricError, NumericAbort, PromptMixError
from .objective import LossSettings, mix_and_score, total_loss
from .prompts import (
    ClassCatalog,
    PromptBank,
    SoftPrompt,
    TemplateGroup,
    class_text_features,
    restrict_groups,
)
from .router import (
    GroupFeatureCache,
    RouterParameters,
    gate,
    group_hard_features,
    hard_gating_distribution,
    select_topk,
)

METRIC_COLUMNS = ["epoch", "step", "lr", "loss_total", "loss_cls", "loss_router", "loss_text", "kl_mean"]


@dataclass
class TrainConfig:
    """All training hyperparameters; field names double as config-file keys."""

    experts: int = 0  # 0 means "all groups in the template document"
    top_k: int = 2
    tau: float = 0.07
    weight_router: float = 1.0
    weight_text: float = 5.0
    learning_rate: float = 0.002
    momentum: float = 0.9
    warmup_epochs: int = 1
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    shots: int = 16
    virtual_classes: bool = False
    router_cls_grad: bool = True
    renormalize_topk: bool = True

    def __post_init__(self):
        if self.top_k < 1:
            raise HyperparameterError(f"top_k must be >= 1, got {self.top_k}")
        if self.experts and self.top_k > self.experts:
            raise HyperparameterError(f"top_k {self.top_k} > experts {self.experts}")
        if self.tau <= 0:
            raise HyperparameterError(f"tau must be > 0, got {self.tau}")
        if self.weight_router < 0 or self.weight_text < 0:
            raise HyperparameterError("loss weights must be >= 0")
        for name in ("learning_rate", "epochs", "batch_size", "shots"):
            if getattr(self, name) <= 0:
                raise HyperparameterError(f"{name} must be > 0")
        if not 0 <= self.momentum < 1:
            raise HyperparameterError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise HyperparameterError("warmup_epochs must be in [0, epochs]")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise HyperparameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def loss_settings(self) -> LossSettings:
        return LossSettings(
            tau=self.tau,
            weight_router=self.weight_router,
            weight_text=self.weight_text,
            k=self.top_k,
            renormalize_topk=self.renormalize_topk,
            router_cls_grad=self.router_cls_grad,
        )


@dataclass
class Split:
    """Index-level train/test partition plus the optional base/new class halves."""

    mode: str  # "few-shot" or "base-to-new"
    train: list[int]
    test: list[int]
    shots: int
    seed: int
    new_test: list[int] = field(default_factory=list)
    base_classes: list[int] | None = None
    new_classes: list[int] | None = None

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "train": self.train,
            "test": self.test,
            "shots": self.shots,
            "seed": self.seed,
            "new_test": self.new_test,
            "base_classes": self.base_classes,
            "new_classes": self.new_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Split":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = repr((self.mode, self.train, self.test, self.new_test, self.base_classes)).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def few_shot_split(dataset: Dataset, shots: int, seed: int) -> Split:
    train, test = sample_few_shot(dataset, shots, seed)
    return Split(mode="few-shot", train=train, test=test, shots=shots, seed=seed)


def base_new_split(dataset: Dataset, shots: int, seed: int) -> Split:
    spec = split_base_new(dataset.class_names, seed, shots)
    train, base_test = sample_few_shot(dataset, shots, seed, class_subset=spec.base_classes)
    return Split(
        mode="base-to-new",
        train=train,
        test=base_test,
        shots=shots,
        seed=seed,
        new_test=dataset.indices_of_classes(spec.new_classes),
        base_classes=spec.base_classes,
        new_classes=spec.new_classes,
    )


@dataclass
class Model:
    """Everything the forward path needs; encoders and caches are frozen."""

    encoders: EncoderBundle
    groups: list[TemplateGroup]
    bank: PromptBank
    router: RouterParameters
    catalog: ClassCatalog  # classification classes (base half in base-to-new mode)
    label_map: dict[int, int]  # dataset class index -> catalog position
    router_cache: GroupFeatureCache
    text_catalog: ClassCatalog
    text_cache: GroupFeatureCache

    def trainable(self) -> list[ad.Tensor]:
        return self.bank.trainable() + self.router.trainable()


def build_model(config: TrainConfig, dataset: Dataset, groups: list[TemplateGroup], split: Split) -> Model:
    encoders = dataset.encoder_spec.build()
    n_groups = config.experts if config.experts else len(groups)
    groups_used = restrict_groups(groups, n_groups)
    if config.top_k > len(groups_used):
        raise HyperparameterError(f"top_k {config.top_k} > {len(groups_used)} experts")

    train_classes = split.base_classes if split.base_classes is not None else list(range(dataset.num_classes))
    names = [dataset.class_names[c] for c in train_classes]
    catalog = ClassCatalog.build(names, encoders.tokenizer, encoders.embeddings)
    label_map = {c: pos for pos, c in enumerate(train_classes)}

    if config.virtual_classes and split.mode == "base-to-new":
        text_catalog = ClassCatalog.build(dataset.class_names, encoders.tokenizer, encoders.embeddings)
    else:
        text_catalog = catalog

    bank = PromptBank.initialize(groups_used, encoders.tokenizer, encoders.embeddings)
    router = RouterParameters.create(encoders.spec.feature_dim, len(groups_used), config.seed)
    router_cache = group_hard_features(groups_used, catalog, encoders)
    text_cache = (
        router_cache if text_catalog is catalog else group_hard_features(groups_used, text_catalog, encoders)
    )
    return Model(
        encoders=encoders,
        groups=groups_used,
        bank=bank,
        router=router,
        catalog=catalog,
        label_map=label_map,
        router_cache=router_cache,
        text_catalog=text_catalog,
        text_cache=text_cache,
    )


class SGD:
    """Momentum SGD; velocities persist across steps and into checkpoints."""

    def __init__(self, params: list[ad.Tensor], momentum: float):
        self.params = params
        self.momentum = momentum
        self.velocities = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocities):
            v *= self.momentum
            if p.grad is not None:
                v += p.grad
            p.data -= lr * v

    def zero_grad(self) -> None:
        ad.zero_grads(self.params)


def schedule_lr(config: TrainConfig, step: int, steps_per_epoch: int, total_steps: int) -> float:
    """Linear warmup for warmup_epochs, then cosine decay to zero."""
    warm = config.warmup_epochs * steps_per_epoch
    if warm > 0 and step < warm:
        return config.learning_rate * (step + 1) / warm
    span = max(total_steps - warm, 1)
    progress = (step - warm) / span
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def epoch_order(seed: int, epoch: int, train_indices: list[int]) -> list[int]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 8, epoch]))
    return [train_indices[i] for i in rng.permutation(len(train_indices))]


@dataclass
class TrainState:
    config: TrainConfig
    model: Model
    optimizer: SGD
    split: Split
    step: int
    metrics: list[list[float]]
    epoch_accum: dict | None = None

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.split.train) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch


def _empty_accum() -> dict:
    return {"examples": 0, "cls": 0.0, "router": 0.0, "text": 0.0, "total": 0.0, "kl": 0.0, "lr": 0.0}


def train(
    config: TrainConfig,
    dataset: Dataset,
    groups: list[TemplateGroup],
    split: Split,
    resume: TrainState | None = None,
    stop_after_steps: int | None = None,
    on_step=None,
) -> TrainState:
    """Minibatch descent on the combined objective; deterministic in the seed.

    ``resume`` continues an earlier state (same config/split) exactly as if
    the run had never stopped; ``stop_after_steps`` halts early at a global
    step count so the trajectory can be checkpointed and resumed.
    """
    if resume is not None:
        state = resume
        if state.config != config:
            raise InvalidInputError("resume state was produced under a different config")
    else:
        model = build_model(config, dataset, groups, split)
        state = TrainState(
            config=config,
            model=model,
            optimizer=SGD(model.trainable(), config.momentum),
            split=split,
            step=0,
            metrics=[],
            epoch_accum=None,
        )
    if not split.train:
        raise InvalidInputError("empty training split")

    model = state.model
    settings = config.loss_settings()
    features = {i: model.encoders.image.encode(dataset.raw[i]) for i in split.train}
    labels = {i: model.label_map[int(dataset.class_indices[i])] for i in split.train}

    steps_per_epoch = state.steps_per_epoch
    total_steps = state.total_steps
    target = total_steps if stop_after_steps is None else min(stop_after_steps, total_steps)
    accum = state.epoch_accum if state.epoch_accum is not None else _empty_accum()
    order: list[int] = []
    order_epoch = -1

    while state.step < target:
        step = state.step
        epoch = step // steps_per_epoch
        if epoch != order_epoch:
            order = epoch_order(config.seed, epoch, split.train)
            order_epoch = epoch
        lo = (step % steps_per_epoch) * config.batch_size
        batch_indices = order[lo : lo + config.batch_size]
        batch = [(features[i], labels[i]) for i in batch_indices]

        state.optimizer.zero_grad()
        try:
            breakdown, stats = total_loss(
                batch,
                model.bank,
                model.router,
                model.router_cache,
                model.catalog,
                model.encoders.text,
                settings,
                text_cache=model.text_cache,
                text_catalog=model.text_catalog,
            )
        except PromptMixError as exc:
            raise NumericAbort(
                f"non-finite loss at step {step}: {exc}",
                diagnostics={
                    "step": step,
                    "epoch": epoch,
                    "batch_indices": [int(i) for i in batch_indices],
                    "error": str(exc),
                },
            ) from exc

        lr = schedule_lr(config, step, steps_per_epoch, total_steps)
        state.optimizer.step(lr)
        state.step += 1

        n = len(batch)
        accum["examples"] += n
        accum["cls"] += breakdown.cls * n
        accum["router"] += breakdown.router * n
        accum["text"] += breakdown.text * n
        accum["total"] += breakdown.total * n
        accum["kl"] += stats["kl_mean"] * n
        accum["lr"] = lr
        if state.step % steps_per_epoch == 0:
            n_ep = accum["examples"]
            state.metrics.append(
                [
                    float(epoch),
                    float(state.step),
                    accum["lr"],
                    accum["total"] / n_ep,
                    accum["cls"] / n_ep,
                    accum["router"] / n_ep,
                    accum["text"] / n_ep,
                    accum["kl"] / n_ep,
                ]
            )
            accum = _empty_accum()
        if on_step is not None:
            on_step(state)

    state.epoch_accum = accum if accum["examples"] else None
    return state


def mean_router_kl(model: Model, dataset: Dataset, indices: list[int]) -> float:
    """Mean KL(gating || hard reference) over the given examples; no training."""
    values = []
    for i in indices:
        v = model.encoders.image.encode(dataset.raw[i])
        probs = gate(ad.constant(v), model.router)
        w_hard = hard_gating_distribution(v, model.router_cache)
        values.append(ad.kl_divergence(ad.constant(probs.data), ad.constant(w_hard)).item())
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SplitResult:
    examples: int
    correct: int

    @property
    def top1(self) -> float:
        return self.correct / self.examples if self.examples else 0.0


@dataclass
class EvalReport:
    """Top-1 accuracies per split; harmonic mean in base-to-new mode."""

    mode: str
    results: dict[str, SplitResult]
    feature_constructions: int
    k: int
    harmonic: float | None = None

    def rows(self) -> list[dict]:
        out = []
        for name, r in self.results.items():
            out.append({"split": name, "examples": r.examples, "correct": r.correct, "top1": r.top1})
        return out


def harmonic_mean(base_acc: float, new_acc: float) -> float:
    """Harmonic mean of two percentages in (0, 100]."""
    for v in (base_acc, new_acc):
        if not 0 < v <= 100:
            raise MetricError(f"harmonic mean needs accuracies in (0, 100], got {v}")
    return 2.0 * base_acc * new_acc / (base_acc + new_acc)


def _evaluate_indices(
    model: Model,
    dataset: Dataset,
    indices: list[int],
    class_subset: list[int],
    k: int,
    renormalize: bool,
) -> tuple[SplitResult, int]:
    names = [dataset.class_names[c] for c in class_subset]
    catalog = ClassCatalog.build(names, model.encoders.tokenizer, model.encoders.embeddings)
    label_map = {c: pos for pos, c in enumerate(class_subset)}
    constructions = 0
    correct = 0
    for i in indices:
        c = int(dataset.class_indices[i])
        if c not in label_map:
            raise InvalidInputError(f"example {i} (class {c}) is outside the evaluation classes")
        v = model.encoders.image.encode(dataset.raw[i])
        probs = gate(ad.constant(v), model.router)
        selection = select_topk(probs, k, renormalize)
        per_prompt = []
        for g in selection.indices:
            per_prompt.append(class_text_features(model.bank.prompts[g], catalog, model.encoders.text))
            constructions += 1
        scored = mix_and_score(ad.constant(v), selection, per_prompt)
        if int(np.argmax(scored.logits.data)) == label_map[c]:
            correct += 1
    return SplitResult(examples=len(indices), correct=correct), constructions


def evaluate(state: TrainState, dataset: Dataset, split: Split | None = None) -> EvalReport:
    """Top-1 accuracy under sparse gating: exactly k feature builds per example.

    In base-to-new mode the new-class half is scored against class features
    rebuilt from the new class names under the same trained prompts.
    """
    split = split or state.split
    model = state.model
    k = state.config.top_k
    renorm = state.config.renormalize_topk
    constructions = 0
    results: dict[str, SplitResult] = {}
    harmonic = None
    if split.mode == "base-to-new":
        base_result, built = _evaluate_indices(model, dataset, split.test, split.base_classes, k, renorm)
        constructions += built
        results["base"] = base_result
        new_result, built = _evaluate_indices(model, dataset, split.new_test, split.new_classes, k, renorm)
        constructions += built
        results["new"] = new_result
        if base_result.correct and new_result.correct:
            harmonic = harmonic_mean(100.0 * base_result.top1, 100.0 * new_result.top1)
    else:
        all_classes = list(range(dataset.num_classes))
        test_result, built = _evaluate_indices(model, dataset, split.test, all_classes, k, renorm)
        constructions += built
        results["test"] = test_result
    return EvalReport(
        mode=split.mode,
        results=results,
        feature_constructions=constructions,
        k=k,
        harmonic=harmonic,
    )


# ---------------------------------------------------------------------------
# checkpoint round-trip


def state_to_checkpoint(state: TrainState, dataset: Dataset) -> Checkpoint:
    model = state.model
    meta = {
        "config": state.config.to_dict(),
        "encoder_spec": model.encoders.spec.to_dict(),
        "groups": [
            {"name": g.name, "templates": g.templates, "init_template_index": g.init_template_index}
            for g in model.groups
        ],
        "class_names": dataset.class_names,
        "split": state.split.to_dict(),
        "step": state.step,
        "metric_columns": METRIC_COLUMNS,
        "metrics": state.metrics,
        "epoch_accum": state.epoch_accum,
    }
    arrays: dict[str, np.ndarray] = {}
    for prompt in model.bank.prompts:
        arrays[f"prompt{prompt.group_id}.prefix"] = prompt.prefix.data
        arrays[f"prompt{prompt.group_id}.suffix"] = prompt.suffix.data
    arrays["router.weight"] = model.router.weight.data
    arrays["router.bias"] = model.router.bias.data
    for p, v in zip(state.optimizer.params, state.optimizer.velocities):
        arrays[f"vel:{p.name}"] = v
    return Checkpoint(meta=meta, arrays=arrays)


def state_from_checkpoint(ckpt: Checkpoint, dataset: Dataset) -> TrainState:
    meta = ckpt.meta
    config = TrainConfig.from_dict(meta["config"])
    if meta["encoder_spec"] != dataset.encoder_spec.to_dict():
        raise InvalidInputError("checkpoint encoders do not match the dataset's encoder spec")
    if meta["class_names"] != dataset.class_names:
        raise InvalidInputError("checkpoint class catalog does not match the dataset")
    split = Split.from_dict(meta["split"])
    groups = [
        TemplateGroup(i, g["name"], list(g["templates"]), g["init_template_index"])
        for i, g in enumerate(meta["groups"])
    ]
    model = build_model(config, dataset, groups, split)
    for prompt in model.bank.prompts:
        prompt.prefix.data = ckpt.arrays[f"prompt{prompt.group_id}.prefix"].copy()
        prompt.suffix.data = ckpt.arrays[f"prompt{prompt.group_id}.suffix"].copy()
    model.router.weight.data = ckpt.arrays["router.weight"].copy()
    model.router.bias.data = ckpt.arrays["router.bias"].copy()
    optimizer = SGD(model.trainable(), config.momentum)
    for j, p in enumerate(optimizer.params):
        optimizer.velocities[j] = ckpt.arrays[f"vel:{p.name}"].copy()
    return TrainState(
        config=config,
        model=model,
        optimizer=optimizer,
        split=split,
        step=int(meta["step"]),
        metrics=[list(row) for row in meta["metrics"]],
        epoch_accum=meta.get("epoch_accum"),
    )


# ---------------------------------------------------------------------------
# ablations


COMPONENT_VARIANTS = ["baseline", "+moe", "+router_kl", "+text_sup"]
TOPK_VARIANTS = [2, 3, 4]


def _component_config(config: TrainConfig, variant: str, seed: int) -> TrainConfig:
    if variant == "baseline":
        return replace(config, experts=1, top_k=1, weight_router=0.0, weight_text=0.0, seed=seed)
    if variant == "+moe":
        return replace(config, weight_router=0.0, weight_text=0.0, seed=seed)
    if variant == "+router_kl":
        return replace(config, weight_text=0.0, seed=seed)
    if variant == "+text_sup":
        return replace(config, seed=seed)
    raise HyperparameterError(f"unknown component variant {variant!r}")


def run_ablation(
    config: TrainConfig,
    dataset: Dataset,
    groups: list[TemplateGroup],
    axis: str,
    seeds: list[int],
) -> list[dict]:
    """Controlled sweeps: shared split per seed across all variants.

    ``components`` adds the mixture, the router KL term and the grouped
    text supervision one at a time on top of a single-prompt baseline;
    ``topk`` sweeps the number of selected experts.
    """
    if axis not in ("components", "topk"):
        raise HyperparameterError(f"ablation axis must be 'components' or 'topk', got {axis!r}")
    rows: list[dict] = []
    for seed in seeds:
        split = few_shot_split(dataset, config.shots, seed)
        if axis == "components":
            variants = [(name, _component_config(config, name, seed)) for name in COMPONENT_VARIANTS]
        else:
            variants = [(f"k={k}", replace(config, top_k=k, seed=seed)) for k in TOPK_VARIANTS]
        for name, variant_config in variants:
            state = train(variant_config, dataset, groups, split)
            report = evaluate(state, dataset)
            rows.append(
                {
                    "axis": axis,
                    "variant": name,
                    "seed": seed,
                    "split_id": split.fingerprint(),
                    "top1": report.results["test"].top1,
                }
            )
    return rows
