from typing import Callable

import numpy as np

from pshape.autodiff import Parameter, Tape
from pshape.data.manifest import LoadedSample
from pshape.data.phantom import PhantomSpec
from pshape.models import Architecture, build_model


def tiny_architecture(kind: str = "discriminative", **overrides) -> Architecture:
    values = dict(
        kind=kind,
        structures=1,
        points=8,
        rotation_features=6,
        signature_features=6,
        classes=2,
        k=2,
        m=0,
        gsn_hidden=(5,),
        rotation_hidden=4,
        posterior_hidden=6,
        decoder_hidden=(6,),
        head_hidden=(5,),
    )
    values.update(overrides)
    return Architecture(**values)


def tiny_model(kind: str = "discriminative", **overrides):
    return build_model(tiny_architecture(kind, **overrides))


def random_cloud(seed, points: int = 8) -> np.ndarray:
    return np.random.default_rng(seed).uniform(-1.0, 1.0, size=(points, 3))


def random_samples(count: int, structures: int = 1, points: int = 8, classes: int = 2):
    samples = []
    for i in range(count):
        label = i % classes
        clouds = [random_cloud([i, s], points) for s in range(structures)]
        condition = np.eye(classes)[label]
        samples.append(LoadedSample(clouds, label, 0.1 * i, condition, f"s{i:03d}"))
    return samples


def tiny_phantom(**overrides) -> PhantomSpec:
    values = dict(points=16, count_per_class=3, jitter=0.0)
    values.update(overrides)
    return PhantomSpec(**values)


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, h: float = 1e-6):
    """Central differences of `fn` with respect to `array`, perturbed in place."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + h
        upper = fn()
        array[index] = original - h
        lower = fn()
        array[index] = original
        grad[index] = (upper - lower) / (2 * h)
    return grad


def parameter_gradient(build_loss: Callable[[Tape], object], param: Parameter):
    """Analytic and numeric gradient of a recorded scalar loss for `param`."""
    tape = Tape()
    analytic = tape.backward(build_loss(tape)).parameters()[param.name]

    def evaluate() -> float:
        return build_loss(Tape()).item()

    return analytic, numeric_gradient(evaluate, param.value)


def assert_parameter_gradients(build_loss, params, rtol=1e-4, atol=1e-6):
    for param in params:
        analytic, numeric = parameter_gradient(build_loss, param)
        np.testing.assert_allclose(
            analytic, numeric, rtol=rtol, atol=atol, err_msg=param.name
        )


def unfreeze_rotation(network, seed) -> None:
    """Give a rotation head non-zero output weights so theta depends on the cloud."""
    last = network.head.layers[-1]
    rng = np.random.default_rng(seed)
    last.weight.value = rng.uniform(-0.5, 0.5, last.weight.shape)
