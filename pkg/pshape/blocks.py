"""
Computational blocks: global signature network, rotation network, encoder and
decoder. Blocks own their Parameters and record their forward pass on a Tape;
they keep no other state.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from pshape.autodiff import (
    Parameter,
    Tape,
    Tensor2,
    concat_cols,
    concat_many,
    kl_divergence,
    matmul_bias,
    relu,
    reparameterize,
    reshape,
    set_maxpool,
    slice_cols,
    slice_rows,
    tanh_act,
)
from pshape.exceptions import EmptySetError, ShapeMismatch
from pshape.transport import TransportSettings, transport_loss

GSN_HIDDEN = (64, 128)
ROTATION_HIDDEN = 128
POSTERIOR_HIDDEN = 512
DECODER_HIDDEN = (256, 512)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    def __init__(
        self,
        name: str,
        fan_in: int,
        fan_out: int,
        rng: np.random.Generator,
        zero: bool = False,
    ):
        if zero:
            weight = np.zeros((fan_in, fan_out))
        else:
            weight = kaiming_uniform(rng, fan_in, fan_out)
        self.weight = Parameter(f"{name}.weight", weight)
        self.bias = Parameter(f"{name}.bias", np.zeros((1, fan_out)))

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, x: Tensor2) -> Tensor2:
        return matmul_bias(x, self.weight, self.bias)


class MLP:
    """Fully connected layers with ReLU between them."""

    def __init__(
        self,
        name: str,
        widths: Sequence[int],
        rng: np.random.Generator,
        zero_last: bool = False,
    ):
        self.widths = tuple(widths)
        last = len(widths) - 2
        self.layers = [
            Linear(
                f"{name}.layer{i}", fan_in, fan_out, rng, zero=zero_last and i == last
            )
            for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def __call__(self, x: Tensor2, final: Optional[str] = None) -> Tensor2:
        for layer in self.layers[:-1]:
            x = relu(layer(x))
        x = self.layers[-1](x)
        if final == "relu":
            return relu(x)
        if final == "tanh":
            return tanh_act(x)
        return x


class GlobalSignatureNetwork:
    """Shared per-point MLP lifting N x 3 to N x F, then max-pooled to 1 x F."""

    def __init__(
        self,
        name: str,
        features: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = GSN_HIDDEN,
    ):
        self.features = features
        self.mlp = MLP(f"{name}.gsn", (3, *hidden, features), rng)

    def parameters(self) -> List[Parameter]:
        return self.mlp.parameters()

    def forward(self, points: Tensor2) -> Tensor2:
        if points.rows < 1:
            raise EmptySetError("Cannot compute the signature of an empty cloud")
        if points.cols != 3:
            ShapeMismatch("gsn_forward", points.shape, (points.rows, 3))
        return set_maxpool(self.mlp(points, final="relu"))

    __call__ = forward


def _rx(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def rotation_matrix(theta: Sequence[float]) -> np.ndarray:
    """T(theta) = Rz(theta_z) @ Ry(theta_y) @ Rx(theta_x)."""
    tx, ty, tz = (float(t) for t in np.ravel(theta))
    return _rz(tz) @ _ry(ty) @ _rx(tx)


def rotation_jacobians(theta: Sequence[float]) -> Tuple[np.ndarray, ...]:
    tx, ty, tz = (float(t) for t in np.ravel(theta))
    rx, ry, rz = _rx(tx), _ry(ty), _rz(tz)
    return rz @ ry @ _drx(tx), rz @ _dry(ty) @ rx, _drz(tz) @ ry @ rx


def euler_rotate(points: Tensor2, theta: Tensor2) -> Tensor2:
    """Rotate each row of `points` by T(theta); differentiable in both inputs."""
    if theta.shape != (1, 3):
        ShapeMismatch("euler_rotate", theta.shape, (1, 3))
    matrix = rotation_matrix(theta.value)
    jacobians = rotation_jacobians(theta.value)
    p = points.value

    def backward(g):
        grad_matrix = g.T @ p
        grad_theta = np.array([[np.sum(grad_matrix * d) for d in jacobians]])
        return g @ matrix, grad_theta

    return points.tape.record("euler_rotate", p @ matrix.T, (points, theta), backward)


class RotationNetwork:
    """Regresses Euler angles from a GSN signature and applies them to the cloud.

    The head's last layer starts at zero, so an untrained block is the identity.
    """

    def __init__(
        self,
        name: str,
        features: int,
        rng: np.random.Generator,
        hidden: int = ROTATION_HIDDEN,
        gsn_hidden: Sequence[int] = GSN_HIDDEN,
    ):
        self.gsn = GlobalSignatureNetwork(name, features, rng, gsn_hidden)
        self.head = MLP(f"{name}.head", (features, hidden, 3), rng, zero_last=True)

    def parameters(self) -> List[Parameter]:
        return self.gsn.parameters() + self.head.parameters()

    def forward(self, points: Tensor2) -> Tuple[Tensor2, Tensor2]:
        theta = self.head(self.gsn(points))
        return theta, euler_rotate(points, theta)

    __call__ = forward


def alignment_loss(
    aligned: Tensor2, reference, settings: Optional[TransportSettings] = None
) -> Tensor2:
    return transport_loss(aligned, reference, settings)


class Encoder:
    """Per-structure GSNs, concatenated signatures, MLP to (mu, log_var)."""

    def __init__(
        self,
        name: str,
        structures: int,
        features: int,
        k: int,
        rng: np.random.Generator,
        hidden: int = POSTERIOR_HIDDEN,
        gsn_hidden: Sequence[int] = GSN_HIDDEN,
    ):
        self.k = k
        self.signatures = [
            GlobalSignatureNetwork(f"{name}.{i}", features, rng, gsn_hidden)
            for i in range(structures)
        ]
        widths = (structures * features, hidden, 2 * k)
        self.posterior = MLP(f"{name}.posterior", widths, rng)

    def parameters(self) -> List[Parameter]:
        params = [p for gsn in self.signatures for p in gsn.parameters()]
        return params + self.posterior.parameters()

    def forward(self, clouds: Sequence[Tensor2]) -> Tuple[Tensor2, Tensor2]:
        if len(clouds) != len(self.signatures):
            ShapeMismatch("encoder_forward", (len(clouds),), (len(self.signatures),))
        signature = concat_many(
            [gsn(cloud) for gsn, cloud in zip(self.signatures, clouds)]
        )
        out = self.posterior(signature)
        return slice_cols(out, 0, self.k), slice_cols(out, self.k, 2 * self.k)

    __call__ = forward


def sample_latent(mu: Tensor2, log_var: Tensor2, eps) -> Tensor2:
    return reparameterize(mu, log_var, eps)


def kl_loss(mu: Tensor2, log_var: Tensor2, form: str = "standard") -> Tensor2:
    return kl_divergence(mu, log_var, form)


class Decoder:
    """[z, c] -> 3-layer MLP -> tanh -> one N x 3 cloud per structure."""

    def __init__(
        self,
        name: str,
        k: int,
        m: int,
        points: int,
        structures: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = DECODER_HIDDEN,
    ):
        self.k, self.m = k, m
        self.points, self.structures = points, structures
        self.mlp = MLP(f"{name}.mlp", (k + m, *hidden, 3 * points * structures), rng)

    def parameters(self) -> List[Parameter]:
        return self.mlp.parameters()

    def forward(self, z: Tensor2, c: Tensor2) -> List[Tensor2]:
        if z.shape != (1, self.k):
            ShapeMismatch("decoder_forward latent", z.shape, (1, self.k))
        if c.shape != (1, self.m):
            ShapeMismatch("decoder_forward condition", c.shape, (1, self.m))
        flat = self.mlp(concat_cols(z, c), final="tanh")
        stacked = reshape(flat, self.points * self.structures, 3)
        if self.structures == 1:
            return [stacked]
        return [
            slice_rows(stacked, i * self.points, (i + 1) * self.points)
            for i in range(self.structures)
        ]

    __call__ = forward


def condition_tensor(tape: Tape, condition, m: int) -> Tensor2:
    values = np.zeros((1, m)) if condition is None else np.asarray(condition, float)
    return tape.constant(values.reshape(1, m))
