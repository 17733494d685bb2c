"""Task prompt templates and the word-level tokenizer used by the tiny backbone.

Every prompt has the layout ``<pre> [feature block] <post> <target>``: the
feature block is a run of embedding positions, not text.  ``render_text``
returns the three string pieces; joining them with a feature placeholder
reproduces the training prompts verbatim.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

TASKS = ("summarization", "open_qa", "multi_choice")
LETTERS = "ABCDE"
FEATURE_SLOT = "{f_1,...,f_n}"

MC_PRE = "Instruction: Choose the correct answer based on the video and question.\nVideo: "
MC_POST = ".\n Question: {question}.\nChoices:\n{choices}\nAnswer: "
MC_TARGET = "The correct choice is ({letter})."

QA_PRE = "Instruction: Predict the answer based on the video and question.\nVideo: "
QA_POST = ".\nQuestion: {question}.\nAnswer: "

SUM_PRE = "Instruction: Generate a dense description for the video.\nVideo: "
SUM_POST = ".\nDescription: "


@dataclass(frozen=True)
class PromptTemplateSet:
    summarization: tuple[str, str] = (SUM_PRE, SUM_POST)
    open_qa: tuple[str, str] = (QA_PRE, QA_POST)
    multi_choice: tuple[str, str] = (MC_PRE, MC_POST)


DEFAULT_TEMPLATES = PromptTemplateSet()


def format_choices(options: Sequence[str]) -> str:
    if not 2 <= len(options) <= len(LETTERS):
        raise ValueError(f"{len(options)} options; templates support 2-{len(LETTERS)}")
    return " ".join(f"({LETTERS[k]}): {opt}." for k, opt in enumerate(options))


def close_sentence(text: str) -> str:
    """Append the template's closing period unless the text already ends a sentence."""
    text = text.strip()
    return text if text.endswith((".", "!", "?")) else text + "."


def render_text(task: str, *, question: str = "", options: Sequence[str] = (),
                answer_index: int | None = None, answer: str = "", description: str = "",
                templates: PromptTemplateSet = DEFAULT_TEMPLATES) -> tuple[str, str, str]:
    """Return (pre, post, target) strings for one task instance.

    ``target`` is empty when the corresponding answer field is not given,
    which is how inference prompts are built.
    """
    if task == "multi_choice":
        pre, post = templates.multi_choice
        post = post.format(question=question, choices=format_choices(options))
        target = MC_TARGET.format(letter=LETTERS[answer_index]) if answer_index is not None else ""
    elif task == "open_qa":
        pre, post = templates.open_qa
        post = post.format(question=question)
        target = close_sentence(answer) if answer else ""
    elif task == "summarization":
        pre, post = templates.summarization
        target = close_sentence(description) if description else ""
    else:
        raise ValueError(f"unknown task {task!r}")
    return pre, post, target


def full_prompt(task: str, slot: str = FEATURE_SLOT, **fields) -> str:
    pre, post, target = render_text(task, **fields)
    return pre + slot + post + target


# -- tokenizer -------------------------------------------------------------

_TOKEN = re.compile(r"\w+|[^\w\s]")
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")
PAD, UNK, BOS, EOS = range(4)
_NO_SPACE_BEFORE = set(".,:;!?)")
_NO_SPACE_AFTER = set("(")


def split_words(text: str) -> list[str]:
    return _TOKEN.findall(text)


class Tokenizer:
    """Word-level tokenizer with a closed vocabulary built from a text corpus."""

    def __init__(self, words: Iterable[str]):
        vocab = list(SPECIALS)
        for w in words:
            if w not in vocab:
                vocab.append(w)
        self.vocab = vocab
        self.ids = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Tokenizer":
        words = set()
        for t in texts:
            words.update(split_words(t))
        for task in TASKS:
            pre, post, _ = render_text(task, question="q", options=["a", "b"], answer_index=0)
            words.update(split_words(pre + post + MC_TARGET))
        words.update(LETTERS)
        return cls(sorted(words))

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.ids.get(w, UNK) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        out = ""
        for i in ids:
            if i in (PAD, BOS, EOS):
                continue
            w = self.vocab[i]
            if out and w not in _NO_SPACE_BEFORE and out[-1] not in _NO_SPACE_AFTER:
                out += " "
            out += w
        return out

    def letter_id(self, letter: str) -> int:
        return self.ids[letter]
