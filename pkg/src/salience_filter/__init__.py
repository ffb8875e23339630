from .tensor import Tensor, Tape, backward  # noqa: F401
