"""Dense float64 tensors, reverse-mode autodiff and seeded random streams."""
from . import ops
from .gradcheck import check_gradient, numeric_grad, relative_error
from .ops import value_of
from .rng import RngStream, sample_standard_normal
from .tape import NonFiniteError, Tape, Tensor, backward, grad, value_and_grad

_FORWARD = {
    "matmul": ops.matmul, "add": ops.add, "sub": ops.sub, "mul": ops.mul,
    "relu": ops.relu, "tanh": ops.tanh, "exp": ops.exp, "log": ops.log,
    "sum": ops.sum, "mean": ops.mean, "square": ops.square,
    "log_sum_exp": ops.log_sum_exp, "softmax": ops.softmax,
    "gather": ops.gather, "concat": ops.concat,
}


def forward(op_kind: str, inputs, tape: Tape | None = None, **kwargs):
    """Apply ``op_kind`` to ``inputs``, recording on ``tape``.

    Array inputs are lifted to leaves of ``tape`` when one is given.
    """
    try:
        fn = _FORWARD[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    if tape is not None:
        inputs = [x if isinstance(x, Tensor) else tape.leaf(x) for x in inputs]
    if op_kind == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


__all__ = [
    "NonFiniteError", "RngStream", "Tape", "Tensor", "backward", "check_gradient",
    "forward", "grad", "numeric_grad", "ops", "relative_error",
    "sample_standard_normal", "value_and_grad", "value_of",
]
