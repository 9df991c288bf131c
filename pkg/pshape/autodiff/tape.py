"""
Reverse-mode differentiation over 2-D double-precision matrices.

Every differentiable value is a `Tensor2` recorded on a `Tape`. A tape is built by
one forward pass for one sample and is walked once, in reverse recording order, by
`Tape.backward`. Parameters are never mutated here: gradients come back in a
`Gradients` object and are added into `Parameter.grad` by an explicit, ordered
reduction step.
"""

from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from pshape.exceptions import ContractError, DimensionError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def as_matrix(value) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise DimensionError(f"Expected a matrix, got an array of shape {array.shape}")
    return array


class Parameter:
    """Named trainable matrix with a gradient accumulator of the same shape."""

    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = as_matrix(value).copy()
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class Tensor2:
    __slots__ = ("value", "tape", "node")

    def __init__(self, value: np.ndarray, tape: "Tape", node: int):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self) -> str:
        return f"Tensor2(shape={self.shape}, node={self.node})"


class Gradients:
    def __init__(self, tape: "Tape", grads: List[Optional[np.ndarray]]):
        self._tape = tape
        self._grads = grads

    def of(self, tensor: Tensor2) -> np.ndarray:
        grad = self._grads[tensor.node]
        return np.zeros_like(tensor.value) if grad is None else grad

    def parameters(self) -> Dict[str, np.ndarray]:
        result = {}
        for node, param in self._tape.parameter_nodes():
            grad = self._grads[node]
            result[param.name] = np.zeros_like(param.value) if grad is None else grad
        return result

    def accumulate_into(self, scale: float = 1.0) -> None:
        for node, param in self._tape.parameter_nodes():
            grad = self._grads[node]
            if grad is not None and param.trainable:
                param.grad = param.grad + scale * grad


class Tape:
    def __init__(self):
        self._values: List[np.ndarray] = []
        self._parents: List[Sequence[int]] = []
        self._backward: List[Optional[BackwardFn]] = []
        self._ops: List[str] = []
        self._param_nodes: Dict[int, int] = {}
        self._params: Dict[int, Parameter] = {}

    def __len__(self) -> int:
        return len(self._values)

    def _push(self, value, parents, backward, op) -> Tensor2:
        node = len(self._values)
        self._values.append(value)
        self._parents.append(tuple(parents))
        self._backward.append(backward)
        self._ops.append(op)
        return Tensor2(value, self, node)

    def constant(self, value) -> Tensor2:
        value = as_matrix(value)
        if not np.all(np.isfinite(value)):
            raise NumericError("Non-finite entries in input tensor")
        return self._push(value, (), None, "leaf")

    def parameter(self, param: Parameter) -> Tensor2:
        key = id(param)
        if key in self._param_nodes:
            node = self._param_nodes[key]
            return Tensor2(self._values[node], self, node)
        tensor = self._push(param.value, (), None, f"param:{param.name}")
        self._param_nodes[key] = tensor.node
        self._params[tensor.node] = param
        return tensor

    def record(
        self,
        op: str,
        value: np.ndarray,
        parents: Sequence[Tensor2],
        backward: BackwardFn,
    ) -> Tensor2:
        for parent in parents:
            if parent.tape is not self:
                raise ContractError(f"{op}: input recorded on a different tape")
        if not np.all(np.isfinite(value)):
            raise NumericError(f"{op} produced non-finite values")
        return self._push(value, [p.node for p in parents], backward, op)

    def parameter_nodes(self) -> Iterable:
        return sorted(self._params.items())

    def backward(self, loss: Tensor2) -> Gradients:
        if loss.tape is not self:
            raise ContractError("Loss was recorded on a different tape")
        if loss.shape != (1, 1):
            raise ContractError(f"Loss must be a 1x1 scalar, got shape {loss.shape}")
        grads: List[Optional[np.ndarray]] = [None] * len(self._values)
        grads[loss.node] = np.ones((1, 1))
        # recording order is topological, so a reverse sweep visits each node once
        for node in range(loss.node, -1, -1):
            upstream = grads[node]
            backward_fn = self._backward[node]
            if upstream is None or backward_fn is None:
                continue
            for parent, grad in zip(self._parents[node], backward_fn(upstream)):
                if grad is None:
                    continue
                grads[parent] = grad if grads[parent] is None else grads[parent] + grad
        return Gradients(self, grads)


def backward(tape: Tape, loss: Tensor2) -> Gradients:
    """Backpropagate `loss` and add the result into every Parameter on the tape."""
    gradients = tape.backward(loss)
    gradients.accumulate_into()
    return gradients
