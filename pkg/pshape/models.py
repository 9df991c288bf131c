"""
Discriminative and conditional generative models over K+1 structures.

A single-structure model is the `structures=1` case of the same code path.
"""

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from pshape import (
    DEFAULT_LOSS_WEIGHTS,
    DEFAULT_POINTS,
    DEFAULT_ROTATION_FEATURES,
    DEFAULT_SIGNATURE_FEATURES,
)
from pshape.autodiff import (
    Parameter,
    Tape,
    Tensor2,
    add,
    concat_many,
    mean_of,
    softmax_cross_entropy,
    squared_error,
    weighted_sum,
)
from pshape.blocks import (
    DECODER_HIDDEN,
    GSN_HIDDEN,
    MLP,
    POSTERIOR_HIDDEN,
    ROTATION_HIDDEN,
    Decoder,
    Encoder,
    GlobalSignatureNetwork,
    RotationNetwork,
    alignment_loss,
    condition_tensor,
    kl_loss,
    sample_latent,
)
from pshape.exceptions import ConfigurationError, LabelError
from pshape.transport import TransportSettings, transport_loss
from pshape.types import LatentPosterior, LossReport, PointCloud

KINDS = ("discriminative", "generative")
TASKS = ("classification", "regression")
HEAD_HIDDEN = (512, 128)


@dataclass
class Architecture:
    kind: str = "discriminative"
    structures: int = 1
    points: int = DEFAULT_POINTS
    rotation_features: int = DEFAULT_ROTATION_FEATURES
    signature_features: int = DEFAULT_SIGNATURE_FEATURES
    task: str = "classification"
    classes: int = 2
    k: int = 2
    m: int = 0
    gsn_hidden: Tuple[int, ...] = GSN_HIDDEN
    rotation_hidden: int = ROTATION_HIDDEN
    posterior_hidden: int = POSTERIOR_HIDDEN
    decoder_hidden: Tuple[int, ...] = DECODER_HIDDEN
    head_hidden: Tuple[int, ...] = HEAD_HIDDEN
    loss_weights: Tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS
    norm: str = "l1"
    kl_form: str = "standard"
    normalization: str = "unit-sphere"
    init_seed: int = 0

    def __post_init__(self):
        for name in ("gsn_hidden", "decoder_hidden", "head_hidden", "loss_weights"):
            setattr(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> Dict:
        return {
            k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()
        }

    @classmethod
    def from_dict(cls, values: Dict) -> "Architecture":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"Unknown architecture fields: {sorted(unknown)}")
        return cls(**values)


class DiscriminativeOutput(NamedTuple):
    prediction: Tensor2
    thetas: List[Tensor2]
    aligned: List[Tensor2]
    align_losses: List[Tensor2]


class GenerativeOutput(NamedTuple):
    reconstructions: List[Tensor2]
    mu: Tensor2
    log_var: Tensor2
    thetas: List[Tensor2]
    aligned: List[Tensor2]
    align_losses: List[Tensor2]


class ShapeModel:
    def __init__(
        self, architecture: Architecture, settings: Optional[TransportSettings] = None
    ):
        self.architecture = architecture
        settings = settings or TransportSettings()
        self.settings = settings._replace(norm=architecture.norm)
        self.rng = np.random.default_rng(architecture.init_seed)
        self.rotations = [
            RotationNetwork(
                f"rotation.{i}",
                architecture.rotation_features,
                self.rng,
                architecture.rotation_hidden,
                architecture.gsn_hidden,
            )
            for i in range(architecture.structures)
        ]
        self.references = [
            Parameter(
                f"reference.{i}", np.zeros((architecture.points, 3)), trainable=False
            )
            for i in range(architecture.structures)
        ]

    @property
    def kind(self) -> str:
        return self.architecture.kind

    def block_parameters(self) -> List[Parameter]:
        raise NotImplementedError

    def parameters(self) -> List[Parameter]:
        rotation = [p for block in self.rotations for p in block.parameters()]
        return rotation + self.block_parameters() + self.references

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def set_references(self, clouds: Sequence[PointCloud]) -> None:
        self._check_clouds(clouds)
        for param, cloud in zip(self.references, clouds):
            param.value = np.array(cloud, dtype=np.float64)

    def _check_clouds(self, clouds: Sequence[PointCloud]) -> None:
        arch = self.architecture
        if len(clouds) != arch.structures:
            raise ConfigurationError(
                f"Model expects {arch.structures} structure(s), got {len(clouds)}"
            )
        for i, cloud in enumerate(clouds):
            if np.shape(cloud) != (arch.points, 3):
                raise ConfigurationError(
                    f"Structure {i} has shape {np.shape(cloud)}, "
                    f"model expects ({arch.points}, 3)"
                )

    def _condition(self, tape: Tape, condition) -> Tensor2:
        m = self.architecture.m
        if condition is not None and len(np.ravel(condition)) != m:
            raise ConfigurationError(
                f"Condition vector has length {len(np.ravel(condition))}, "
                f"model expects {m}"
            )
        return condition_tensor(tape, condition, m)

    def align(self, tape: Tape, clouds: Sequence[PointCloud]):
        self._check_clouds(clouds)
        thetas, aligned, losses = [], [], []
        for rotation, reference, cloud in zip(self.rotations, self.references, clouds):
            theta, cloud_aligned = rotation(tape.constant(cloud))
            thetas.append(theta)
            aligned.append(cloud_aligned)
            losses.append(alignment_loss(cloud_aligned, reference.value, self.settings))
        return thetas, aligned, losses

    def align_clouds(
        self, clouds: Sequence[PointCloud]
    ) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        thetas, aligned, _ = self.align(Tape(), clouds)
        return [t.value[0].copy() for t in thetas], [a.numpy() for a in aligned]


class DiscriminativeModel(ShapeModel):
    def __init__(
        self, architecture: Architecture, settings: Optional[TransportSettings] = None
    ):
        super().__init__(architecture, settings)
        arch = architecture
        self.signatures = [
            GlobalSignatureNetwork(
                f"signature.{i}", arch.signature_features, self.rng, arch.gsn_hidden
            )
            for i in range(arch.structures)
        ]
        outputs = arch.classes if arch.task == "classification" else 1
        widths = (arch.structures * arch.signature_features, *arch.head_hidden, outputs)
        self.head = MLP("head", widths, self.rng)

    def block_parameters(self) -> List[Parameter]:
        params = [p for gsn in self.signatures for p in gsn.parameters()]
        return params + self.head.parameters()

    def forward(self, tape: Tape, clouds: Sequence[PointCloud]) -> DiscriminativeOutput:
        thetas, aligned, align_losses = self.align(tape, clouds)
        signature = concat_many(
            [gsn(cloud) for gsn, cloud in zip(self.signatures, aligned)]
        )
        return DiscriminativeOutput(self.head(signature), thetas, aligned, align_losses)

    def predict(self, clouds: Sequence[PointCloud]) -> np.ndarray:
        """Logits for classification, a length-1 array for regression."""
        return self.forward(Tape(), clouds).prediction.value[0].copy()


def discriminative_forward(
    model: DiscriminativeModel, tape: Tape, clouds: Sequence[PointCloud]
) -> DiscriminativeOutput:
    return model.forward(tape, clouds)


def discriminative_loss(
    prediction: Tensor2, label, align_losses: Sequence[Tensor2], task: str
) -> Tuple[Tensor2, LossReport]:
    if label is None:
        raise LabelError("Sample has no label for the discriminative task")
    if task == "classification":
        cls = softmax_cross_entropy(prediction, label)
    elif task == "regression":
        cls = squared_error(prediction, float(label))
    else:
        raise ConfigurationError(f"Unknown task '{task}', expected one of {TASKS}")
    align = mean_of(align_losses)
    total = add(align, cls)
    report = LossReport(align=align.item(), cls=cls.item(), total=total.item())
    return total, report


class GenerativeModel(ShapeModel):
    def __init__(
        self, architecture: Architecture, settings: Optional[TransportSettings] = None
    ):
        super().__init__(architecture, settings)
        arch = architecture
        if any(w < 0 for w in arch.loss_weights) or not any(arch.loss_weights):
            raise ConfigurationError(f"Invalid loss weights {arch.loss_weights}")
        self.encoder = Encoder(
            "encoder",
            arch.structures,
            arch.signature_features,
            arch.k,
            self.rng,
            arch.posterior_hidden,
            arch.gsn_hidden,
        )
        self.decoder = Decoder(
            "decoder",
            arch.k,
            arch.m,
            arch.points,
            arch.structures,
            self.rng,
            arch.decoder_hidden,
        )

    def block_parameters(self) -> List[Parameter]:
        return self.encoder.parameters() + self.decoder.parameters()

    def forward(
        self, tape: Tape, clouds: Sequence[PointCloud], condition=None, eps=None
    ) -> GenerativeOutput:
        thetas, aligned, align_losses = self.align(tape, clouds)
        c = self._condition(tape, condition)
        mu, log_var = self.encoder(aligned)
        k = self.architecture.k
        eps = np.zeros((1, k)) if eps is None else np.reshape(eps, (1, -1))
        z = sample_latent(mu, log_var, eps)
        reconstructions = self.decoder(z, c)
        return GenerativeOutput(
            reconstructions, mu, log_var, thetas, aligned, align_losses
        )

    def encode(self, clouds: Sequence[PointCloud]) -> LatentPosterior:
        tape = Tape()
        _, aligned, _ = self.align(tape, clouds)
        mu, log_var = self.encoder(aligned)
        return LatentPosterior(mu.value[0].copy(), log_var.value[0].copy())

    def reconstruct(
        self, clouds: Sequence[PointCloud], condition=None
    ) -> List[np.ndarray]:
        output = self.forward(Tape(), clouds, condition)
        return [r.numpy() for r in output.reconstructions]


def generative_forward(
    model: GenerativeModel,
    tape: Tape,
    clouds: Sequence[PointCloud],
    condition=None,
    eps=None,
) -> GenerativeOutput:
    return model.forward(tape, clouds, condition, eps)


def generative_loss(
    output: GenerativeOutput,
    weights: Sequence[float] = DEFAULT_LOSS_WEIGHTS,
    settings: Optional[TransportSettings] = None,
    kl_form: str = "standard",
) -> Tuple[Tensor2, LossReport]:
    w_align, w_rec, w_latent = (float(w) for w in weights)
    rec = mean_of(
        [
            transport_loss(target, recon, settings)
            for target, recon in zip(output.aligned, output.reconstructions)
        ]
    )
    align = mean_of(output.align_losses)
    latent = kl_loss(output.mu, output.log_var, kl_form)
    total = weighted_sum([align, rec, latent], [w_align, w_rec, w_latent])
    report = LossReport(
        align=align.item(), rec=rec.item(), latent=latent.item(), total=total.item()
    )
    return total, report


def generate(model: GenerativeModel, z, condition=None) -> List[np.ndarray]:
    k = model.architecture.k
    if len(np.ravel(z)) != k:
        raise ConfigurationError(
            f"Latent vector has length {len(np.ravel(z))}, model expects {k}"
        )
    tape = Tape()
    latent = tape.constant(np.reshape(np.asarray(z, dtype=np.float64), (1, k)))
    clouds = model.decoder(latent, model._condition(tape, condition))
    return [cloud.numpy() for cloud in clouds]


def deformation_map(model: GenerativeModel, z, c1, c2) -> List[np.ndarray]:
    first, second = generate(model, z, c1), generate(model, z, c2)
    return [np.linalg.norm(a - b, axis=1) for a, b in zip(first, second)]


def build_model(
    architecture: Architecture, settings: Optional[TransportSettings] = None
) -> ShapeModel:
    if architecture.kind == "discriminative":
        if architecture.task not in TASKS:
            raise ConfigurationError(f"Unknown task '{architecture.task}'")
        return DiscriminativeModel(architecture, settings)
    if architecture.kind == "generative":
        return GenerativeModel(architecture, settings)
    raise ConfigurationError(
        f"Unknown model kind '{architecture.kind}', expected one of {KINDS}"
    )
