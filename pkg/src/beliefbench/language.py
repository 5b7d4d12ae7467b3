"""Closed-vocabulary task instructions.

Grammar:
    place <color> [then <color> ...]
    stack <color> [then <color> ...] on <color>
"""

from __future__ import annotations

from .env import COLOR_NAMES, TaskSpec, WorldState, stack_base_index

VOCAB = ("<pad>", "place", "stack", "then", "on") + COLOR_NAMES
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}
MAX_TOKENS = 16


class InstructionError(ValueError):
    pass


def encode_instruction(text: str) -> list[int]:
    words = text.strip().lower().split()
    if not words:
        raise InstructionError("empty instruction")
    if len(words) > MAX_TOKENS:
        raise InstructionError(f"instruction longer than {MAX_TOKENS} tokens")
    ids = []
    for w in words:
        if w not in TOKEN_TO_ID:
            raise InstructionError(f"unknown word {w!r}; vocabulary is closed")
        ids.append(TOKEN_TO_ID[w])
    _validate(words)
    return ids


def decode_instruction(ids: list[int]) -> str:
    try:
        return " ".join(VOCAB[i] for i in ids if i != 0)
    except IndexError as exc:
        raise InstructionError(f"token id out of range: {ids}") from exc


def _validate(words: list[str]) -> None:
    verb = words[0]
    if verb not in ("place", "stack"):
        raise InstructionError(f"instruction must start with place/stack, got {verb!r}")
    rest = words[1:]
    if verb == "stack":
        if "on" not in rest:
            raise InstructionError("stack instruction needs 'on <color>'")
        on_idx = rest.index("on")
        if on_idx != len(rest) - 2 or rest[-1] not in COLOR_NAMES:
            raise InstructionError("stack instruction must end with 'on <color>'")
        rest = rest[:on_idx]
    expect_color = True
    for w in rest:
        if expect_color:
            if w not in COLOR_NAMES:
                raise InstructionError(f"expected a color, got {w!r}")
        elif w != "then":
            raise InstructionError(f"expected 'then', got {w!r}")
        expect_color = not expect_color
    if expect_color or not rest:
        raise InstructionError("dangling instruction")


def instruction_for(state: WorldState) -> str:
    """Episode instruction naming the target colors in required order."""
    task: TaskSpec = state.task
    colors = [COLOR_NAMES[state.objects[i].color_id] for i in task.targets]
    if task.family == "pick_place":
        return "place " + " then ".join(colors)
    base = stack_base_index(task)
    base_color = COLOR_NAMES[state.objects[base].color_id]
    return "stack " + " then ".join(colors) + f" on {base_color}"
