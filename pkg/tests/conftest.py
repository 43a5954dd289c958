import numpy as np
import pytest

from promptmix.encoders import EncoderSpec
from promptmix.prompts import ClassCatalog, PromptBank, load_template_groups
from promptmix.router import RouterParameters, group_hard_features

TOY_DOC = """# plain
a photo of a {}.
a bright photo of a {}.
# stylized
a blurry photo of the {}.
{} texture.
"""


@pytest.fixture(scope="session")
def toy_encoders():
    return EncoderSpec(seed=0, vocab_size=512, embed_dim=8, feature_dim=8, input_dim=12).build()


@pytest.fixture(scope="session")
def toy_groups():
    return load_template_groups(TOY_DOC, expert_range=(1, 20))


@pytest.fixture()
def toy_setup(toy_encoders, toy_groups):
    """Fresh prompts/router per test; encoders and hard features are shared."""
    enc = toy_encoders
    catalog = ClassCatalog.build(["cat", "dog", "bird"], enc.tokenizer, enc.embeddings)
    bank = PromptBank.initialize(toy_groups, enc.tokenizer, enc.embeddings)
    router = RouterParameters.create(enc.spec.feature_dim, len(toy_groups), seed=0, init_scale=0.3)
    cache = group_hard_features(toy_groups, catalog, enc)
    return enc, toy_groups, catalog, bank, router, cache


def random_unit_features(enc, rng, n):
    out = []
    for _ in range(n):
        out.append(enc.image.encode(rng.normal(size=enc.spec.input_dim)))
    return out
