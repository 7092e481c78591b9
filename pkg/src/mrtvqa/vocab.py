"""Fixed token vocabularies for questions and answers.

Both vocabularies are static so that index assignments are stable across
runs and datasets; checkpoints embed them for compatibility checking.
"""

from __future__ import annotations

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow")
SIZES = ("small", "large")
MATERIALS = ("rubber", "metal")
RELATIONS = ("left of", "right of", "in front of", "behind")

ANSWER_TOKENS = (
    ("yes", "no")
    + tuple(str(i) for i in range(11))
    + COLORS
    + SHAPES
    + SIZES
    + MATERIALS
)

PAD_TOKEN = "<pad>"

_QUESTION_WORDS = (
    "is there a",
    "are there any",
    "how many",
    "what number of",
    "what color is the",
    "what is the color of the",
    "are there more",
    "are there fewer",
    "left of right in front behind than objects object things thing",
)


class VocabError(KeyError):
    """A token outside the vocabulary reached tokenization or embedding."""


def _question_word_list():
    words = set()
    for phrase in _QUESTION_WORDS:
        words.update(phrase.split())
    for group in (SHAPES, COLORS, SIZES, MATERIALS):
        words.update(group)
    words.update(s + "s" for s in SHAPES)  # plural nouns used by count templates
    return [PAD_TOKEN] + sorted(words)


class QuestionVocab:
    """word <-> index with PAD at index 0."""

    def __init__(self):
        self.words = _question_word_list()
        self.index = {w: i for i, w in enumerate(self.words)}
        self.pad_index = 0

    def __len__(self):
        return len(self.words)

    def encode(self, text):
        toks = text.lower().replace("?", "").split()
        try:
            return [self.index[t] for t in toks]
        except KeyError as e:
            raise VocabError(f"unknown question token {e.args[0]!r}") from None

    def decode(self, ids):
        return " ".join(self.words[i] for i in ids if i != self.pad_index)


class AnswerVocab:
    """Ordered answer-token list; index <-> token bijection."""

    def __init__(self, tokens=ANSWER_TOKENS):
        self.tokens = tuple(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("AnswerVocab: duplicate answer tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, token):
        try:
            return self.index[token]
        except KeyError:
            raise VocabError(f"unknown answer token {token!r}") from None

    def decode(self, i):
        return self.tokens[i]
