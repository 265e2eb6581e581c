from .adam import AdamState, adam_step
from .gradcheck import gradcheck
from .ops import forward_op
from .tape import ShapeError, Tape, Tensor

__all__ = ["AdamState", "adam_step", "gradcheck", "forward_op", "ShapeError", "Tape", "Tensor"]
