"""Plan-matrix layout: task block | action block | observation block.

A plan matrix has shape (T, C + A + O). Every row carries the task one-hot,
row t carries the one-hot of action t, and the observation block holds o_s in
the first row, o_g in the last row and zeros in between. Batched matrices
have a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np


@dataclass(frozen=True)
class ProblemDims:
    T: int
    A: int
    C: int
    O: int

    def __post_init__(self):
        for name in ("T", "A", "C", "O"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"ProblemDims.{name} must be positive, got {getattr(self, name)}")
        if self.T < 2:
            raise ValueError(f"horizon T must be >= 2 (start and goal rows), got {self.T}")

    @property
    def width(self) -> int:
        return self.C + self.A + self.O

    @property
    def task_slice(self) -> slice:
        return slice(0, self.C)

    @property
    def action_slice(self) -> slice:
        return slice(self.C, self.C + self.A)

    @property
    def obs_slice(self) -> slice:
        return slice(self.C + self.A, self.width)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_labels(name: str, labels: np.ndarray, bound: int) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= bound):
        bad = labels[(labels < 0) | (labels >= bound)][0]
        raise ValueError(f"{name} label {bad} outside [0, {bound})")


def assemble_batch(tasks, actions, o_s, o_g, dims: ProblemDims) -> np.ndarray:
    """Build x0 for a batch: tasks (B,), actions (B, T), o_s/o_g (B, O)."""
    tasks = np.asarray(tasks, dtype=np.int64).reshape(-1)
    actions = np.asarray(actions, dtype=np.int64)
    o_s = np.asarray(o_s, dtype=np.float64)
    o_g = np.asarray(o_g, dtype=np.float64)
    bsz = tasks.shape[0]
    if actions.shape != (bsz, dims.T):
        raise ValueError(f"actions shape {actions.shape} != ({bsz}, {dims.T})")
    if o_s.shape != (bsz, dims.O) or o_g.shape != (bsz, dims.O):
        raise ValueError(f"observation shapes {o_s.shape}, {o_g.shape} != ({bsz}, {dims.O})")
    _check_labels("task", tasks, dims.C)
    _check_labels("action", actions, dims.A)
    x = np.zeros((bsz, dims.T, dims.width))
    rows = np.arange(bsz)
    x[rows, :, tasks] = 1.0
    x[rows[:, None], np.arange(dims.T)[None, :], dims.C + actions] = 1.0
    x[:, 0, dims.obs_slice] = o_s
    x[:, -1, dims.obs_slice] = o_g
    return x


def assemble_x0(c: int, actions, o_s, o_g, dims: ProblemDims) -> np.ndarray:
    return assemble_batch([c], np.asarray(actions)[None], np.asarray(o_s)[None], np.asarray(o_g)[None], dims)[0]


def impose_conditions(x: np.ndarray, tasks, o_s, o_g, dims: ProblemDims) -> np.ndarray:
    """Overwrite task and observation blocks of a batched plan matrix in place."""
    tasks = np.asarray(tasks, dtype=np.int64).reshape(-1)
    x[:, :, dims.task_slice] = 0.0
    x[np.arange(len(tasks)), :, tasks] = 1.0
    x[:, :, dims.obs_slice] = 0.0
    x[:, 0, dims.obs_slice] = o_s
    x[:, -1, dims.obs_slice] = o_g
    return x


def decode_actions(x: np.ndarray, dims: ProblemDims) -> np.ndarray:
    """Argmax over the action block per position; ties go to the lowest index."""
    x = np.asarray(x)
    if x.shape[-1] != dims.width or x.shape[-2] != dims.T:
        raise ValueError(f"plan matrix shape {x.shape} does not end in ({dims.T}, {dims.width})")
    return np.argmax(x[..., dims.action_slice], axis=-1)
