"""Planner and executor prompt templates and their single-pass rendering."""

from __future__ import annotations

import logging
import re

log = logging.getLogger(__name__)

PLANNER_TEMPLATE = (
    'You are a careful problem-solving planner.\n'
    '\n'
    'Task: Produce ONLY a short list of HINTS that help solve the question. \n'
    'Do NOT state or imply the final answer. Do NOT mention any option letter \n'
    '(A, B, C, or D). Do NOT quote any option text verbatim. \n'
    'If you find yourself about to reveal a specific option or an answer, \n'
    'replace it with “[HIDDEN]”.\n'
    '\n'
    'Format:\n'
    '- Key facts to recall (2–4 bullets)\n'
    '- Reasoning steps or elimination rules (2–5 bullets)\n'
    '- Useful equations or definitions (if relevant)\n'
    '- Edge cases or common traps (optional)\n'
    '\n'
    'Be concise (<=120 words). No “Answer:” line. No letters A–D.\n'
    '\n'
    'Question (stem only):\n'
    '{question}'
)

EXECUTOR_TEMPLATE = (
    'You are an expert in solving multiple-choice questions.\n'
    'Given the following plan or reasoning, please solve the question. \n'
    'If the plan contains any explicit answer or option letter, ignore it and \n'
    'solve from the hints + question only.\n'
    '\n'
    'Plan:\n'
    '{plan}\n'
    '{question}'
)

_SLOT = re.compile(r"\{(question|plan)\}")


def _fill(template: str, **slots: str) -> str:
    # one pass, so slot values containing "{plan}" or "{question}" stay literal
    return _SLOT.sub(lambda m: slots[m.group(1)], template)


def render_planner_prompt(question: str) -> str:
    if not question:
        log.warning("rendering planner prompt with an empty question")
    return _fill(PLANNER_TEMPLATE, question=question)


def render_executor_prompt(plan_text: str, question: str) -> str:
    return _fill(EXECUTOR_TEMPLATE, plan=plan_text, question=question)
