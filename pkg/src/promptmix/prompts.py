"""Hard-template groups and the learnable soft prompts anchored to them.

A template group is an ordered set of hard-prompt strings with one ``{}``
class placeholder each. Every group anchors one soft prompt: a pair of
trainable context-embedding blocks (prefix and suffix) initialized from the
token embeddings of the group's designated init template, so training
starts exactly at that hard prompt's encoding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoders import EmbeddingTable, TextEncoder, Tokenizer
from .errors import InvalidInputError, TemplateError

PLACEHOLDER = "{}"


@dataclass
class TemplateGroup:
    group_id: int
    name: str
    templates: list[str]
    init_template_index: int = 0

    def __post_init__(self):
        if not self.templates:
            raise TemplateError(f"group {self.name!r} has no templates")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise TemplateError(f"template needs exactly one {PLACEHOLDER}: {t!r}")
        if not 0 <= self.init_template_index < len(self.templates):
            raise TemplateError(
                f"init_template_index {self.init_template_index} out of range for group {self.name!r}"
            )

    @property
    def init_template(self) -> str:
        return self.templates[self.init_template_index]


def parse_template(template: str, class_name: str) -> tuple[str, str, str]:
    """Split a template at its placeholder: (prefix, suffix, filled string)."""
    n = template.count(PLACEHOLDER)
    if n != 1:
        raise TemplateError(f"template needs exactly one {PLACEHOLDER}, found {n}: {template!r}")
    prefix, suffix = template.split(PLACEHOLDER)
    return prefix, suffix, prefix + class_name + suffix


def load_template_groups(text: str, expert_range: tuple[int, int] = (4, 20)) -> list[TemplateGroup]:
    """Parse a grouped-template document.

    Lines starting with ``#`` begin a new named group; every other non-empty
    line is one template. Group counts outside ``expert_range`` parse fine
    but emit a warning.
    """
    groups: list[TemplateGroup] = []
    current_name: str | None = None
    current_templates: list[str] = []
    current_line = 0

    def close_group():
        nonlocal current_name, current_templates
        if current_name is None:
            return
        if not current_templates:
            raise TemplateError(f"group {current_name!r} has no templates", line=current_line)
        groups.append(TemplateGroup(len(groups), current_name, current_templates))
        current_name, current_templates = None, []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            close_group()
            current_name = line.lstrip("#").strip() or f"group-{len(groups)}"
            current_line = lineno
            continue
        if line.count(PLACEHOLDER) != 1:
            raise TemplateError(f"template needs exactly one {PLACEHOLDER}: {line!r}", line=lineno)
        if current_name is None:
            current_name = f"group-{len(groups)}"
            current_line = lineno
        current_templates.append(line)
    close_group()

    if not groups:
        raise TemplateError("document contains no template groups")
    lo, hi = expert_range
    if not lo <= len(groups) <= hi:
        warnings.warn(f"{len(groups)} template groups is outside the usual {lo}..{hi} expert range")
    return groups


def read_template_file(path) -> list[TemplateGroup]:
    with open(path, encoding="utf-8") as fh:
        return load_template_groups(fh.read())


@dataclass
class ClassCatalog:
    """Ordered class names with their frozen token embeddings."""

    names: list[str]
    token_ids: list[list[int]]
    embeddings: list[ad.Tensor] = field(repr=False)

    @classmethod
    def build(cls, names: list[str], tokenizer: Tokenizer, table: EmbeddingTable) -> "ClassCatalog":
        if len(set(names)) != len(names):
            raise InvalidInputError("class names must be unique")
        if not names:
            raise InvalidInputError("class catalog is empty")
        ids = []
        embs = []
        for name in names:
            toks = tokenizer.tokenize(name)
            if not toks:
                raise InvalidInputError(f"class name tokenizes to nothing: {name!r}")
            ids.append(toks)
            embs.append(table.lookup(toks))
        return cls(list(names), ids, embs)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown class {name!r}") from None


@dataclass
class SoftPrompt:
    """One expert: trainable context blocks around a frozen class token slot."""

    group_id: int
    prefix: ad.Tensor
    suffix: ad.Tensor

    @property
    def context_length(self) -> int:
        return self.prefix.data.shape[0] + self.suffix.data.shape[0]

    def trainable(self) -> list[ad.Tensor]:
        return [self.prefix, self.suffix]


def init_soft_prompt(group: TemplateGroup, tokenizer: Tokenizer, table: EmbeddingTable) -> SoftPrompt:
    """Context blocks copied from the init template's token embeddings.

    Either side may tokenize to nothing (placeholder at an edge); only a
    template with no context tokens at all is rejected.
    """
    prefix_text, suffix_text, _ = parse_template(group.init_template, "")
    pre_ids = tokenizer.tokenize(prefix_text)
    post_ids = tokenizer.tokenize(suffix_text)
    if not pre_ids and not post_ids:
        raise TemplateError(f"init template has no context tokens: {group.init_template!r}")
    prefix = ad.parameter(table.rows[pre_ids], name=f"prompt{group.group_id}.prefix")
    suffix = ad.parameter(table.rows[post_ids], name=f"prompt{group.group_id}.suffix")
    return SoftPrompt(group.group_id, prefix, suffix)


def assemble_prompt(prompt: SoftPrompt, catalog: ClassCatalog, class_name: str) -> ad.Tensor:
    """[prefix context; class token embeddings; suffix context] as one sequence.

    The class segment is frozen; gradients reach only the context blocks.
    """
    class_emb = catalog.embeddings[catalog.index(class_name)]
    return ad.concat_rows([prompt.prefix, class_emb, prompt.suffix])


def class_text_features(prompt: SoftPrompt, catalog: ClassCatalog, text_encoder: TextEncoder) -> ad.Tensor:
    """|C| x d matrix; row c is the encoded prompt filled with class c."""
    rows = [text_encoder.encode(assemble_prompt(prompt, catalog, name)) for name in catalog.names]
    return ad.concat_rows(rows)


class PromptBank:
    """The G groups and their G soft prompts, in group order."""

    def __init__(self, groups: list[TemplateGroup], prompts: list[SoftPrompt]):
        if len(groups) != len(prompts):
            raise InvalidInputError(f"{len(groups)} groups vs {len(prompts)} prompts")
        self.groups = groups
        self.prompts = prompts

    @classmethod
    def initialize(cls, groups: list[TemplateGroup], tokenizer: Tokenizer, table: EmbeddingTable) -> "PromptBank":
        return cls(groups, [init_soft_prompt(g, tokenizer, table) for g in groups])

    def __len__(self) -> int:
        return len(self.groups)

    def trainable(self) -> list[ad.Tensor]:
        return [t for p in self.prompts for t in p.trainable()]


def restrict_groups(groups: list[TemplateGroup], count: int) -> list[TemplateGroup]:
    """First ``count`` groups, re-numbered from zero."""
    if not 1 <= count <= len(groups):
        raise InvalidInputError(f"cannot take {count} of {len(groups)} groups")
    return [
        TemplateGroup(i, g.name, list(g.templates), g.init_template_index)
        for i, g in enumerate(groups[:count])
    ]
