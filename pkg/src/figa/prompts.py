"""Prompt templates sent to the completion service."""

from __future__ import annotations

import re

from .records import RevisionReason

ROLLOUT_TEMPLATE = (
    "Below is an instruction that describes a task. "
    "Write a response that appropriately completes the request.\n\n"
    "### Instruction:\n{query}\n\n### Response:\n"
)

_PAIR_HEADER = "Question: {query}\nResponse 1: {response_1}\nResponse 2: {response_2}\n"

REASON_TEMPLATE = _PAIR_HEADER + (
    "Among them, the quality of Response 1 is inferior to that of Response 2. "
    "Please compare them and choose one of the following four possible reasons "
    "for the area where Response 1 performed the worst:\n"
    "A. Needs more accurate content,\n"
    "B. Needs more comprehensive content or more details,\n"
    "C. Requires adjustments in structure,\n"
    "D. Other reasons (such as containing harmful information or going off-topic).\n"
    "Do not include analysis, but just return the choice."
)

REVISION_TEMPLATES: dict[RevisionReason, str] = {
    RevisionReason.INACCURACY: _PAIR_HEADER + (
        "Please replace the content corresponding to Response 1 with the accurate and "
        "high-quality essence from Response 2, and remain the original structure of Response 1.\n"
        "Ensure that the edit distance between the optimized Response 1 and the Response 1 "
        "is as low as possible."
    ),
    RevisionReason.LACK_OF_DETAIL: _PAIR_HEADER + (
        "Please incorporate the comprehensive topic or the details from Response 2 into "
        "Response 1, or if necessary, replace any synonymous content from Response 1 with "
        "that from Response 2.\n"
        "You must remain the original structure of Response 1, ensure the edit distance "
        "between the optimized Response 1 with the Response 1 is as low as possible, and not "
        "add new contents other than those contained in Response 1 and Response 2."
    ),
    RevisionReason.STRUCTURE: _PAIR_HEADER + (
        "The structure of Response 2 is well-organized, featuring elements including but "
        "not limited to:\n"
        "1. point-by-point addressing,\n"
        "2. providing an overview of the question before answering.\n"
        "Use the structure of Response 2 to rephrase Response 1.\n"
        "Ensure that the optimized Response 1 should maintain a relatively low edit distance "
        "from the original Response 1."
    ),
}

ANNOTATION_TEMPLATE = (
    "Below is an instruction that describes a task, followed by an original response and "
    "a better response in terms of how well it aligns with human preferences, being "
    "helpful, harmless, and honest.\n"
    "Your task is to return a list containing tuples with words and corresponding scores, "
    "which are meant to measure the extent to which the words improve the quality of the "
    "original answer to the better answer.\n"
    "The scores are all integers, with 0 being the lowest score and 5 being the highest score.\n"
    "Instruction: {query}\nOriginal Response: {original}\nBetter Response: {better}\n"
)


def rollout_prompt(query: str) -> str:
    return ROLLOUT_TEMPLATE.format(query=query)


def reason_prompt(query: str, initial: str, reference: str) -> str:
    return REASON_TEMPLATE.format(query=query, response_1=initial, response_2=reference)


def revision_prompt(reason: RevisionReason, query: str, initial: str, reference: str) -> str:
    try:
        template = REVISION_TEMPLATES[reason]
    except KeyError:
        raise ValueError(f"no revision prompt for reason {reason.value}") from None
    return template.format(query=query, response_1=initial, response_2=reference)


def annotation_prompt(query: str, original: str, better: str) -> str:
    return ANNOTATION_TEMPLATE.format(query=query, original=original, better=better)


_ROLLOUT_RE = re.compile(r"### Instruction:\n(?P<query>.*)\n\n### Response:\n\Z", re.S)
_PAIR_RE = re.compile(
    r"\AQuestion: (?P<query>.*?)\nResponse 1: (?P<r1>.*?)\nResponse 2: (?P<r2>.*?)\n"
    r"(?P<body>(?:Among them|Please replace|Please incorporate|The structure of Response 2).*)\Z",
    re.S,
)
_ANNOT_RE = re.compile(
    r"Instruction: (?P<query>.*?)\nOriginal Response: (?P<original>.*?)\nBetter Response: (?P<better>.*)\n\Z",
    re.S,
)


def parse_prompt(prompt: str) -> tuple[str, dict[str, str]]:
    """Recover the kind and fields of a prompt built by this module.

    Used by the offline stub service. Returns ``(kind, fields)`` where kind is
    one of "rollout", "reason", "revise-A", "revise-B", "revise-C",
    "annotate"; raises ValueError for anything else.
    """
    if prompt.startswith(ROLLOUT_TEMPLATE.split("{", 1)[0]):
        m = _ROLLOUT_RE.search(prompt)
        if m:
            return "rollout", {"query": m["query"]}
    if prompt.startswith(ANNOTATION_TEMPLATE.split("{", 1)[0]):
        m = _ANNOT_RE.search(prompt)
        if m:
            return "annotate", m.groupdict()
    m = _PAIR_RE.match(prompt)
    if m:
        fields = {"query": m["query"], "initial": m["r1"], "reference": m["r2"]}
        body = m["body"]
        if body.startswith("Among them"):
            return "reason", fields
        for reason, template in REVISION_TEMPLATES.items():
            if template.endswith(body):
                return f"revise-{reason.value}", fields
    raise ValueError("unrecognized prompt")
