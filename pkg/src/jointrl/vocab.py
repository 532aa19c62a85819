"""Fixed toy vocabulary shared by every scenario."""

from __future__ import annotations

NAMES = [
    "<pad>", "<bos>", "<eos>", "<think>", "</think>", "<answer>", "</answer>", "Yes", "No",
    # prompt-spec words
    "one", "two",
    "anywhere", "left", "right", "top", "bottom",
    "plain", "red", "blue",
    "norel", "left-of", "above",
    # edit instructions
    "translate", "rotate", "scale", "identity",
    "+x", "-x", "+y", "-y", "ccw", "cw", "grow", "shrink",
    # bit tasks
    "0", "1", "parity", "count",
    "d0", "d1", "d2", "d3", "d4", "d5", "d6", "d7",
    # free-form thought tokens
    "r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7",
    # structural markers
    "<vis>", "<reflect>", "<edit>", "<gen>",
]

ID = {name: i for i, name in enumerate(NAMES)}
VOCAB_SIZE = len(NAMES)

PAD, BOS, EOS = ID["<pad>"], ID["<bos>"], ID["<eos>"]
THINK, END_THINK = ID["<think>"], ID["</think>"]
ANSWER, END_ANSWER = ID["<answer>"], ID["</answer>"]
YES, NO = ID["Yes"], ID["No"]
VIS, REFLECT, EDIT, GEN = ID["<vis>"], ID["<reflect>"], ID["<edit>"], ID["<gen>"]

COUNT_WORDS = {1: ID["one"], 2: ID["two"]}
REGION_WORDS = {r: ID[r] for r in ("anywhere", "left", "right", "top", "bottom")}
ATTR_WORDS = {None: ID["plain"], "red": ID["red"], "blue": ID["blue"]}
RELATION_WORDS = {None: ID["norel"], "left-of": ID["left-of"], "above": ID["above"]}
BIT_WORDS = (ID["0"], ID["1"])
DIGIT_WORDS = tuple(ID[f"d{i}"] for i in range(8))
THOUGHT_WORDS = tuple(ID[f"r{i}"] for i in range(8))

SPEC_WORDS = tuple(
    sorted(
        set(COUNT_WORDS.values())
        | set(REGION_WORDS.values())
        | set(ATTR_WORDS.values())
        | set(RELATION_WORDS.values())
    )
)
ANSWER_PROTOCOL = (ANSWER, YES, NO, END_ANSWER, EOS)

assert VOCAB_SIZE <= 64


def encode(words) -> list[int]:
    return [ID[w] for w in words]


def decode(ids) -> list[str]:
    return [NAMES[int(i)] for i in ids]
