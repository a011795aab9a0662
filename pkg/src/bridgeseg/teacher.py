"""EMA teacher of the source branch and its hard pseudo-labels."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ShapeError, Tensor
from .nets import ParamSet, argmax_rows, classify, extract_features


@dataclass
class TeacherState:
    params: ParamSet
    alpha_max: float = 0.999
    t: int = 0


def init_teacher(student: ParamSet, alpha_max: float = 0.999) -> TeacherState:
    """Copy the extractor and classifier of ``student``; projections are not tracked."""
    tensors = {
        n: Tensor(t.values.copy())
        for n, t in student.items()
        if not n.startswith("projection.")
    }
    spec = replace(student.spec, proj_dim=None)
    return TeacherState(ParamSet(spec, tensors, role="teacher"), alpha_max, 0)


def alpha_at_step(t: int, alpha_max: float) -> float:
    return min(1.0 - 1.0 / (t + 1), alpha_max)


def ema_update(teacher: TeacherState, student: ParamSet) -> float:
    """Blend student weights into the teacher; returns the alpha used."""
    alpha = alpha_at_step(teacher.t, teacher.alpha_max)
    for name, tt in teacher.params.items():
        sv = student[name].values
        if sv.shape != tt.values.shape:
            raise ShapeError(f"ema_update: {name} teacher {tt.values.shape} vs student {sv.shape}")
        tt.values *= alpha
        tt.values += (1.0 - alpha) * sv
    teacher.t += 1
    return alpha


def teacher_pseudo_label(teacher: TeacherState | ParamSet, x_bs: Tensor | np.ndarray) -> np.ndarray:
    """One-hot C x N matrix of the teacher's per-point argmax.

    Plain numpy output: pseudo-labels never carry gradient.
    """
    params = teacher.params if isinstance(teacher, TeacherState) else teacher
    if not isinstance(x_bs, Tensor):
        x_bs = Tensor(x_bs)
    logp = classify(params, extract_features(params, x_bs)).values
    return one_hot(argmax_rows(logp), params.spec.num_classes)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """C x N one-hot matrix (columns are points)."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((num_classes, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out
