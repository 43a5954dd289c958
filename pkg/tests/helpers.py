"""Independent oracle implementations the tests compare against.

Everything here is deliberately written without the package's autodiff:
gradients are hand-derived chain rule over plain numpy, probabilities are
enumerated tuple by tuple. These stay independent of the code paths they
check.
"""

from __future__ import annotations

import math

import numpy as np


def np_softmax(z: np.ndarray, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64) / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def np_cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


class SinglePromptReference:
    """Plain single-prompt context optimization with hand-derived gradients.

    Forward per class: mean-pool [prefix; class tokens; suffix], project,
    L2-normalize, cosine against the image feature over a temperature,
    softmax cross-entropy. The backward pass is written out by hand.
    """

    def __init__(self, projection, prefix, suffix, class_embeddings, tau):
        self.projection = np.array(projection)
        self.prefix = np.array(prefix)
        self.suffix = np.array(suffix)
        self.class_embeddings = [np.array(e) for e in class_embeddings]
        self.tau = tau

    def class_features(self):
        feats, caches = [], []
        for emb in self.class_embeddings:
            length = self.prefix.shape[0] + emb.shape[0] + self.suffix.shape[0]
            pooled = (self.prefix.sum(axis=0) + emb.sum(axis=0) + self.suffix.sum(axis=0)) / length
            u = pooled @ self.projection
            norm = np.linalg.norm(u)
            feats.append(u / norm)
            caches.append((length, u / norm, norm))
        return feats, caches

    def batch_gradients(self, batch):
        """Mean loss over the batch and gradients for prefix/suffix."""
        feats, caches = self.class_features()
        n_classes = len(feats)
        n = len(batch)
        loss = 0.0
        # dL/df_c summed over examples (features are shared within a step)
        g_feats = [np.zeros_like(feats[0]) for _ in range(n_classes)]
        for v, label in batch:
            cos = np.array([f @ v for f in feats])
            p = np_softmax(cos, self.tau)
            loss += -math.log(p[label])
            dcos = p.copy()
            dcos[label] -= 1.0
            dcos /= self.tau * n
            for c in range(n_classes):
                g_feats[c] += dcos[c] * v
        g_prefix = np.zeros_like(self.prefix)
        g_suffix = np.zeros_like(self.suffix)
        for c in range(n_classes):
            length, f, norm = caches[c]
            g_u = (g_feats[c] - f * (f @ g_feats[c])) / norm
            g_pooled = self.projection @ g_u
            row = g_pooled / length
            g_prefix += row
            g_suffix += row
        return loss / n, g_prefix, g_suffix


def reference_schedule(lr: float, warmup_epochs: int, step: int, steps_per_epoch: int, total_steps: int) -> float:
    warm = warmup_epochs * steps_per_epoch
    if warm > 0 and step < warm:
        return lr * (step + 1) / warm
    span = max(total_steps - warm, 1)
    return lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


def reference_epoch_order(seed: int, epoch: int, train_indices: list[int]) -> list[int]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 8, epoch]))
    return [train_indices[i] for i in rng.permutation(len(train_indices))]


# ---------------------------------------------------------------------------
# grouped text supervision, enumerated tuple by tuple


def enumerate_text_supervision(hard_blocks, soft_features, tau, prob_first=True) -> float:
    """Loss over all (group, template, class, target) tuples.

    ``prob_first`` averages template probabilities before the log (the
    implemented order); the alternative averages the per-template logs.
    """
    total = 0.0
    n_groups = len(hard_blocks)
    for g in range(n_groups):
        block = np.asarray(hard_blocks[g])  # (I, C, d)
        soft = np.asarray(soft_features[g])  # (C, d)
        n_templates, n_classes, _ = block.shape
        group_sum = 0.0
        for y in range(n_classes):
            per_template = []
            for i in range(n_templates):
                z = np.array([np_cosine(block[i, c], soft[c]) / tau for c in range(n_classes)])
                e = np.exp(z - z.max())
                per_template.append(float(e[y] / e.sum()))
            if prob_first:
                group_sum += -math.log(sum(per_template) / n_templates)
            else:
                group_sum += -sum(math.log(p) for p in per_template) / n_templates
        total += group_sum / n_classes
    return total / n_groups


# ---------------------------------------------------------------------------
# zero-shot hard-template classification


def zero_shot_accuracy(features, labels, cache, k: int) -> float:
    """Classify with hard-template features only: route by group cosine,
    mix the top-k groups' init-template class features, argmax cosine."""
    correct = 0
    for v, label in zip(features, labels):
        sims = cache.group_features @ v
        gating = np_softmax(sims)
        order = np.argsort(-gating, kind="stable")[:k]
        weights = gating[order] / gating[order].sum()
        mixed = np.zeros_like(cache.template_class_features[0][0])
        for w, g in zip(weights, order):
            mixed = mixed + w * cache.template_class_features[g][0]
        scores = [np_cosine(mixed[c], v) for c in range(mixed.shape[0])]
        if int(np.argmax(scores)) == label:
            correct += 1
    return correct / len(labels)
