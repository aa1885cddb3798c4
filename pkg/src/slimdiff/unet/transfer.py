"""Teacher-to-student weight transfer.

The mapping follows the pruning transform: down blocks keep their leading
pairs (the teacher's last pair is dropped), up blocks keep the leading
pairs plus the final one (the second-to-last is dropped), and the mid
block is dropped whole. The asymmetry is forced by skip channels: in an
up block only the last resnet consumes the stage-boundary skip, so that
resnet must survive for its convolutions to keep their shapes.
"""

from dataclasses import dataclass

import torch

from ..errors import TransferError
from .model import UNetModel
from .spec import student_spec as derive_student_spec


@dataclass(frozen=True)
class TransferReport:
    copied: tuple[str, ...]  # student parameter names that received weights
    dropped: tuple[str, ...]  # teacher parameter names with no destination
    unmatched: tuple[str, ...]  # student parameter names left uninitialized
    mapping: dict  # student name -> teacher name


def _rename(name: str, teacher_spec, student_spec) -> str:
    parts = name.split(".")
    if parts[0] == "up_blocks" and parts[2] in ("resnets", "attentions"):
        i, j = int(parts[1]), int(parts[3])
        rt_s = student_spec.up_blocks[i].rt_pairs
        rt_t = teacher_spec.up_blocks[i].rt_pairs
        if j == rt_s - 1:
            parts[3] = str(rt_t - 1)
        return ".".join(parts)
    return name


def transfer_weights(teacher: UNetModel, student: UNetModel) -> TransferReport:
    expected = derive_student_spec(teacher.spec)
    if student.spec != expected:
        raise TransferError(
            "student layout is not the pruning of this teacher; transfer mapping undefined"
        )
    teacher_state = dict(teacher.state_dict())
    mapping = {
        name: _rename(name, teacher.spec, student.spec) for name, _ in student.named_parameters()
    }
    copied = []
    unmatched = []
    with torch.no_grad():
        for name, param in student.named_parameters():
            source = teacher_state.get(mapping[name])
            if source is None:
                unmatched.append(name)
                continue
            if tuple(source.shape) != tuple(param.shape):
                raise TransferError(
                    f"{name}: student shape {tuple(param.shape)} vs teacher "
                    f"{tuple(source.shape)} under mapping {mapping[name]}"
                )
            param.copy_(source)
            copied.append(name)
    used = {mapping[n] for n in copied}
    dropped = tuple(n for n in teacher_state if n not in used)
    return TransferReport(
        copied=tuple(copied), dropped=dropped, unmatched=tuple(unmatched), mapping=mapping
    )
