"""Shared fixtures: small alphabets and hand-built language models."""

import pytest
from hypothesis import HealthCheck, settings

from ocrpost.corpus import Alphabet
from ocrpost.ngram import WordUnigramLM

settings.register_profile(
    "ci",
    derandomize=True,
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.function_scoped_fixture],
)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def abc_alphabet() -> Alphabet:
    """Letters a-d plus space and basic punctuation."""
    return Alphabet.from_texts(["abcd .,!?"])


@pytest.fixture(scope="session")
def word_alphabet() -> Alphabet:
    """Alphabet covering the dog/door lexicon plus a few spare letters."""
    return Alphabet.from_texts(["dogrcatxyz "])


@pytest.fixture(scope="session")
def fig2_wordlm() -> WordUnigramLM:
    """Two-word lexicon with probabilities 0.75/0.2 and unknown mass 0.05."""
    return WordUnigramLM.from_probabilities({"dog": 0.75, "door": 0.2}, 0.05)
