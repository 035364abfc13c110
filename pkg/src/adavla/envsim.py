"""Tiny 2D manipulation world with a scripted proportional-controller expert.

An agent moves on the unit square, closes its gripper to pick colored
objects, and drops them at a goal marker. Observations are G x G grids with
one soft-splat channel per entity kind; instructions are short token
sequences over a fixed 32-word vocabulary.

Everything is deterministic given the reset seed and the action sequence.
State transitions are functional: `step_env` returns a new state and never
mutates its argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch

from . import numerics
from .numerics import InputError, Rng

COLORS = ("red", "green", "blue")

VOCAB = (
    "<pad>", "move", "pick", "to", "goal", "red", "green", "blue",
    "the", "object", "block", "cube", "item", "target", "place", "put",
    "grab", "lift", "drop", "near", "far", "left", "right", "up",
    "down", "open", "close", "gripper", "arm", "table", "zone", "spot",
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}

TEMPLATES = ("move_to_goal", "pick")


@dataclass
class EnvConfig:
    grid: int = 8
    d_a: int = 3
    step_scale: float = 0.05
    gripper_deadband: float = 0.5
    pick_radius: float = 0.08
    place_radius: float = 0.08
    min_separation: float = 0.15
    max_steps: int = 80
    splat_sigma: float = 1.0      # in cells
    splat_support: float = 3.0    # truncation radius, in sigmas
    max_text_len: int = 8

    @property
    def channels(self) -> int:
        # agent, gripper-closed, one per color, goal
        return 2 + len(COLORS) + 1


@dataclass(frozen=True)
class ObjectState:
    oid: int
    color: str
    xy: tuple[float, float]
    held: bool = False


@dataclass(frozen=True)
class Task:
    template: str
    color: str


@dataclass(frozen=True)
class WorldState:
    agent_xy: tuple[float, float]
    gripper_closed: bool
    objects: tuple[ObjectState, ...]
    goal_xy: tuple[float, float]
    step: int
    task: Task


@dataclass(frozen=True)
class Instruction:
    text: str
    token_ids: torch.Tensor  # (max_text_len,), padded with <pad>
    mask: torch.Tensor       # (max_text_len,), 1 for real tokens


def encode_instruction(text: str, max_len: int = 8) -> Instruction:
    words = text.split()
    if len(words) > max_len:
        raise InputError(f"instruction longer than {max_len} tokens: {text!r}")
    try:
        ids = [TOKEN_ID[w] for w in words]
    except KeyError as exc:
        raise InputError(f"word {exc.args[0]!r} not in vocabulary") from None
    pad = max_len - len(ids)
    token_ids = torch.tensor(ids + [TOKEN_ID["<pad>"]] * pad, dtype=torch.long)
    mask = torch.tensor([1] * len(ids) + [0] * pad, dtype=torch.long)
    return Instruction(text=text, token_ids=token_ids, mask=mask)


def instruction_for(task: Task, max_len: int = 8) -> Instruction:
    if task.template == "move_to_goal":
        return encode_instruction(f"move {task.color} to goal", max_len)
    if task.template == "pick":
        return encode_instruction(f"pick {task.color}", max_len)
    raise InputError(f"unknown task template {task.template!r}")


def color_from_instruction(instruction: Instruction) -> str:
    for color in COLORS:
        if bool((instruction.token_ids == TOKEN_ID[color]).any()):
            return color
    raise InputError("instruction names no known color")


# -- reset ---------------------------------------------------------------------


def reset(seed: int, task_template: str = "move_to_goal", color: str | None = None,
          cfg: EnvConfig | None = None) -> tuple[WorldState, torch.Tensor, Instruction]:
    """Place agent, goal and one object per color with pairwise separation."""
    cfg = cfg or EnvConfig()
    if task_template not in TEMPLATES:
        raise InputError(f"unknown task template {task_template!r}")
    rng = Rng(seed).derive("env")
    if color is None:
        color = COLORS[int(rng.derive("color").randint(0, len(COLORS), 1))]

    placed: list[tuple[float, float]] = []
    draw = rng.derive("layout")
    while len(placed) < 2 + len(COLORS):
        x, y = (float(v) for v in draw.uniform(2))
        if all(math.hypot(x - px, y - py) >= cfg.min_separation for px, py in placed):
            placed.append((x, y))

    agent_xy, goal_xy = placed[0], placed[1]
    objects = tuple(
        ObjectState(oid=i, color=c, xy=placed[2 + i])
        for i, c in enumerate(COLORS))
    state = WorldState(agent_xy=agent_xy, gripper_closed=False, objects=objects,
                       goal_xy=goal_xy, step=0, task=Task(task_template, color))
    instruction = instruction_for(state.task, cfg.max_text_len)
    return state, render(state, cfg), instruction


# -- rendering -------------------------------------------------------------------


def _splat(grid: torch.Tensor, xy: tuple[float, float], cfg: EnvConfig) -> None:
    """Max-compose a truncated Gaussian bump (sigma in cells) around xy."""
    g = cfg.grid
    cx, cy = xy[0] * g, xy[1] * g
    radius = cfg.splat_sigma * cfg.splat_support
    for row in range(g):
        for col in range(g):
            dx = (col + 0.5) - cx
            dy = (row + 0.5) - cy
            d2 = dx * dx + dy * dy
            if d2 <= radius * radius:
                val = math.exp(-d2 / (2.0 * cfg.splat_sigma ** 2))
                if val > float(grid[row, col]):
                    grid[row, col] = val


def render(state: WorldState, cfg: EnvConfig | None = None) -> torch.Tensor:
    """G x G x C observation; channels = [agent, gripper, red, green, blue, goal]."""
    cfg = cfg or EnvConfig()
    obs = torch.zeros(cfg.grid, cfg.grid, cfg.channels, dtype=numerics.active_dtype())
    _splat(obs[:, :, 0], state.agent_xy, cfg)
    if state.gripper_closed:
        _splat(obs[:, :, 1], state.agent_xy, cfg)
    for obj in state.objects:
        _splat(obs[:, :, 2 + COLORS.index(obj.color)], obj.xy, cfg)
    _splat(obs[:, :, 2 + len(COLORS)], state.goal_xy, cfg)
    return obs


# -- dynamics ----------------------------------------------------------------------


def _clip01(v: float) -> float:
    return min(1.0, max(0.0, v))


def step_env(state: WorldState, action, cfg: EnvConfig | None = None
             ) -> tuple[WorldState, bool]:
    """Advance one control step; returns (new state, success flag).

    Movement is scaled and clipped to the unit square; the gripper toggles on
    the sign of the third action component outside a deadband; picking grabs
    the nearest free object in range on a close edge, and opening within
    range of the goal while holding the target completes a move task. The
    step counter always advances.
    """
    cfg = cfg or EnvConfig()
    vals = [float(v) for v in action]
    if len(vals) != cfg.d_a:
        raise InputError(f"action has {len(vals)} components, expected {cfg.d_a}")
    if not all(math.isfinite(v) for v in vals):
        raise InputError("non-finite action component")
    dx, dy, grip = vals

    ax = _clip01(state.agent_xy[0] + cfg.step_scale * dx)
    ay = _clip01(state.agent_xy[1] + cfg.step_scale * dy)
    agent_xy = (ax, ay)

    closed = state.gripper_closed
    if grip >= cfg.gripper_deadband:
        closed = True
    elif grip <= -cfg.gripper_deadband:
        closed = False

    objects = list(state.objects)
    success = False

    # pick on a close edge
    if closed and not state.gripper_closed and not any(o.held for o in objects):
        in_range = [
            (math.hypot(o.xy[0] - ax, o.xy[1] - ay), i)
            for i, o in enumerate(objects)
            if math.hypot(o.xy[0] - ax, o.xy[1] - ay) <= cfg.pick_radius
        ]
        if in_range:
            _, idx = min(in_range)
            objects[idx] = replace(objects[idx], held=True)

    # held object rides with the agent
    objects = [replace(o, xy=agent_xy) if o.held else o for o in objects]

    # place on an open edge
    if not closed and state.gripper_closed:
        for i, o in enumerate(objects):
            if o.held:
                objects[i] = replace(o, held=False)
                at_goal = math.hypot(ax - state.goal_xy[0],
                                     ay - state.goal_xy[1]) <= cfg.place_radius
                if (state.task.template == "move_to_goal"
                        and o.color == state.task.color and at_goal):
                    success = True

    if state.task.template == "pick":
        success = any(o.held and o.color == state.task.color for o in objects)

    new_state = WorldState(agent_xy=agent_xy, gripper_closed=closed,
                           objects=tuple(objects), goal_xy=state.goal_xy,
                           step=state.step + 1, task=state.task)
    return new_state, success


# -- scripted expert -----------------------------------------------------------------


def _toward(src: tuple[float, float], dst: tuple[float, float],
            cfg: EnvConfig) -> tuple[float, float]:
    """Proportional move command, clipped to one unit action."""
    raw_x = (dst[0] - src[0]) / cfg.step_scale
    raw_y = (dst[1] - src[1]) / cfg.step_scale
    return (min(1.0, max(-1.0, raw_x)), min(1.0, max(-1.0, raw_y)))


def _expert_action(state: WorldState, target_color: str, cfg: EnvConfig) -> list[float]:
    target = next(o for o in state.objects if o.color == target_color)
    approach = 0.6  # close/open inside this fraction of the interaction radius

    if not target.held:
        d = math.hypot(target.xy[0] - state.agent_xy[0],
                       target.xy[1] - state.agent_xy[1])
        if state.gripper_closed:
            # holding nothing useful (or a stale close): open before approaching
            return [0.0, 0.0, -1.0]
        if d > cfg.pick_radius * approach:
            mx, my = _toward(state.agent_xy, target.xy, cfg)
            return [mx, my, -1.0]
        return [0.0, 0.0, 1.0]

    if state.task.template == "pick":
        return [0.0, 0.0, 0.0]

    d = math.hypot(state.goal_xy[0] - state.agent_xy[0],
                   state.goal_xy[1] - state.agent_xy[1])
    if d > cfg.place_radius * approach:
        mx, my = _toward(state.agent_xy, state.goal_xy, cfg)
        return [mx, my, 1.0]
    return [0.0, 0.0, -1.0]


def scripted_expert(state: WorldState, instruction: Instruction,
                    cfg: EnvConfig | None = None, horizon: int = 8) -> torch.Tensor:
    """Emit an H-step action chunk by simulating the controller forward."""
    cfg = cfg or EnvConfig()
    color = color_from_instruction(instruction)
    actions = []
    sim = state
    for _ in range(horizon):
        a = _expert_action(sim, color, cfg)
        actions.append(a)
        sim, _ = step_env(sim, a, cfg)
    return torch.tensor(actions, dtype=numerics.active_dtype())
