"""Conditional generator, classifier zoo, forward records and checkpoints."""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from pathlib import Path
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save

from .errors import ConfigError, ContractError, DimensionError
from .losses import PresetLabelBatch, validate_distribution

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# noise sampling


@dataclass(frozen=True)
class ConditionedNoiseBatch:
    noise: torch.Tensor
    labels: PresetLabelBatch

    def __post_init__(self):
        if self.noise.dim() != 2 or self.noise.shape[1] < 1:
            raise DimensionError(f"noise must be [n x m], got {tuple(self.noise.shape)}")
        if self.noise.shape[0] != len(self.labels):
            raise DimensionError(
                f"{self.noise.shape[0]} noise rows but {len(self.labels)} labels"
            )

    def __len__(self):
        return self.noise.shape[0]


def _as_generator(seed: Union[int, torch.Generator, None]) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed))
    return g


def uniform_distribution(num_classes: int) -> torch.Tensor:
    return torch.full((num_classes,), 1.0 / num_classes, dtype=torch.float64)


def sample_conditioned_noise(
    n: int,
    m: int,
    label_distribution,
    seed: Union[int, torch.Generator, None] = None,
) -> ConditionedNoiseBatch:
    """Draw ``n`` standard-normal noise rows of size ``m`` and i.i.d. preset labels.

    ``seed`` may be an int (fresh stream) or a ``torch.Generator`` that is
    advanced in place, which is how the trainer draws successive batches.
    """
    dist = torch.as_tensor(label_distribution, dtype=torch.float64)
    validate_distribution(dist)
    if n < 1 or m < 1:
        raise ConfigError(f"need n >= 1 and m >= 1, got n={n}, m={m}")
    g = _as_generator(seed)
    noise = torch.randn(n, m, generator=g)
    labels = torch.multinomial(dist, n, replacement=True, generator=g)
    return ConditionedNoiseBatch(noise, PresetLabelBatch(labels, dist))


# ---------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class GeneratorSpec:
    """Shape and conditioning of a :class:`ConditionalGenerator`.

    ``trunk_widths`` are the channel counts of the initial grid and of the two
    upsampling blocks; ``upsample`` are the per-block scale factors, so the
    initial grid is the image size divided by their product.
    """

    noise_dim: int = 100
    num_classes: int = 10
    image_shape: Tuple[int, int, int] = (1, 32, 32)
    conditioning: str = "multiply"
    trunk_widths: Tuple[int, int, int] = (128, 128, 64)
    upsample: Tuple[int, int] = (2, 2)
    embedding_dim: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        object.__setattr__(self, "trunk_widths", tuple(int(v) for v in self.trunk_widths))
        object.__setattr__(self, "upsample", tuple(int(v) for v in self.upsample))
        if self.embedding_dim is None:
            object.__setattr__(self, "embedding_dim", self.noise_dim)
        if self.conditioning not in ("multiply", "concatenate"):
            raise ConfigError(f"unknown conditioning mode {self.conditioning!r}")
        if self.conditioning == "multiply" and self.embedding_dim != self.noise_dim:
            raise ConfigError("multiply conditioning needs embedding_dim == noise_dim")
        if self.noise_dim < 1 or self.num_classes < 2:
            raise ConfigError("noise_dim must be >= 1 and num_classes >= 2")
        if len(self.image_shape) != 3 or len(self.trunk_widths) != 3 or len(self.upsample) != 2:
            raise ConfigError("image_shape and trunk_widths take 3 values, upsample takes 2")
        scale = self.upsample[0] * self.upsample[1]
        _, h, w = self.image_shape
        if h % scale or w % scale:
            raise ConfigError(f"image size {h}x{w} is not divisible by the upsample factor {scale}")

    @property
    def init_grid(self) -> Tuple[int, int]:
        scale = self.upsample[0] * self.upsample[1]
        return self.image_shape[1] // scale, self.image_shape[2] // scale

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("image_shape", "trunk_widths", "upsample"):
            d[k] = list(d[k])
        return d


class ConditionalGenerator(nn.Module):
    """Maps (noise, label) to an image in ``[-1, 1]``.

    In ``multiply`` mode the trunk sees ``noise * embedding(label)``; in
    ``concatenate`` mode it sees ``[noise, embedding(label)]``.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w0, w1, w2 = spec.trunk_widths
        channels = spec.image_shape[0]
        gh, gw = spec.init_grid
        self.embedding = nn.Embedding(spec.num_classes, spec.embedding_dim)
        nn.init.normal_(self.embedding.weight, 0.0, 1.0)
        in_dim = spec.noise_dim if spec.conditioning == "multiply" else spec.noise_dim + spec.embedding_dim
        self.project = nn.Linear(in_dim, w0 * gh * gw)
        self.bn0 = nn.BatchNorm2d(w0)
        self.block1 = nn.Sequential(
            nn.Upsample(scale_factor=spec.upsample[0]),
            nn.Conv2d(w0, w1, 3, padding=1),
            nn.BatchNorm2d(w1),
            nn.LeakyReLU(0.2),
        )
        self.block2 = nn.Sequential(
            nn.Upsample(scale_factor=spec.upsample[1]),
            nn.Conv2d(w1, w2, 3, padding=1),
            nn.BatchNorm2d(w2),
            nn.LeakyReLU(0.2),
        )
        self.out = nn.Sequential(nn.Conv2d(w2, channels, 3, padding=1), nn.Tanh())

    def condition(self, noise: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        """Trunk input for a batch of (noise, label) pairs."""
        if noise.dim() != 2 or noise.shape[1] != self.spec.noise_dim:
            raise DimensionError(
                f"noise must be [n x {self.spec.noise_dim}], got {tuple(noise.shape)}"
            )
        labels = torch.as_tensor(labels, device=noise.device).long()
        if labels.shape != (noise.shape[0],):
            raise DimensionError(f"expected {noise.shape[0]} labels, got {tuple(labels.shape)}")
        emb = self.embedding(labels)
        if self.spec.conditioning == "multiply":
            return noise * emb
        return torch.cat([noise, emb], dim=1)

    def forward(self, noise: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        x = self.project(self.condition(noise, labels))
        x = x.view(x.shape[0], self.spec.trunk_widths[0], *self.spec.init_grid)
        x = self.block2(self.block1(self.bn0(x)))
        return self.out(x)


def generate(generator: ConditionalGenerator, batch: ConditionedNoiseBatch) -> torch.Tensor:
    param = next(generator.parameters())
    noise = batch.noise.to(device=param.device, dtype=param.dtype)
    return generator(noise, batch.labels.labels.to(param.device))


# ---------------------------------------------------------------------------
# classifiers


class Classifier(nn.Module):
    """Base class for teacher / student networks.

    Subclasses implement :meth:`forward_features`, returning logits and the
    activations at each attention tap point, in tap order.
    """

    arch_id: str = "classifier"
    input_shape: Tuple[int, int, int] = (1, 32, 32)

    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.num_classes = num_classes

    def forward_features(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        raise NotImplementedError

    def forward(self, x):
        return self.forward_features(x)[0]

    num_taps = 0

    @property
    def tap_points(self) -> Tuple[int, ...]:
        return tuple(range(1, self.num_taps + 1))

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.parameters())

    def config(self) -> dict:
        return {"num_classes": self.num_classes}


class LeNet5(Classifier):
    arch_id = "lenet5"
    input_shape = (1, 32, 32)
    num_taps = 2
    widths = (6, 16, 120, 84)

    def __init__(self, num_classes: int = 10, in_channels: int = 1):
        super().__init__(num_classes)
        c1, c2, c3, f1 = self.widths
        self.in_channels = in_channels
        self.input_shape = (in_channels, 32, 32)
        self.conv1 = nn.Conv2d(in_channels, c1, 5)
        self.conv2 = nn.Conv2d(c1, c2, 5)
        self.conv3 = nn.Conv2d(c2, c3, 5)
        self.fc1 = nn.Linear(c3, f1)
        self.fc2 = nn.Linear(f1, num_classes)

    def forward_features(self, x):
        a1 = F.max_pool2d(F.relu(self.conv1(x)), 2)
        a2 = F.max_pool2d(F.relu(self.conv2(a1)), 2)
        h = F.relu(self.conv3(a2)).flatten(1)
        logits = self.fc2(F.relu(self.fc1(h)))
        return logits, [a1, a2]

    def config(self):
        return {"num_classes": self.num_classes, "in_channels": self.in_channels}


class LeNet5Half(LeNet5):
    arch_id = "lenet5_half"
    widths = (3, 8, 60, 42)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet(Classifier):
    """CIFAR-style ResNet with one attention tap after each of the four stages."""

    num_taps = 4
    blocks: Tuple[int, int, int, int] = (2, 2, 2, 2)

    def __init__(self, num_classes: int = 10, in_channels: int = 3):
        super().__init__(num_classes)
        self.in_channels = in_channels
        self.input_shape = (in_channels, 32, 32)
        self.conv1 = nn.Conv2d(in_channels, 64, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        self._planes = 64
        self.layer1 = self._make_layer(64, self.blocks[0], 1)
        self.layer2 = self._make_layer(128, self.blocks[1], 2)
        self.layer3 = self._make_layer(256, self.blocks[2], 2)
        self.layer4 = self._make_layer(512, self.blocks[3], 2)
        self.linear = nn.Linear(512, num_classes)

    def _make_layer(self, planes, count, stride):
        layers = []
        for s in [stride] + [1] * (count - 1):
            layers.append(BasicBlock(self._planes, planes, s))
            self._planes = planes
        return nn.Sequential(*layers)

    def forward_features(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        maps = []
        for layer in (self.layer1, self.layer2, self.layer3, self.layer4):
            out = layer(out)
            maps.append(out)
        logits = self.linear(F.adaptive_avg_pool2d(out, 1).flatten(1))
        return logits, maps

    def config(self):
        return {"num_classes": self.num_classes, "in_channels": self.in_channels}


class ResNet18(ResNet):
    arch_id = "resnet18"
    blocks = (2, 2, 2, 2)


class ResNet34(ResNet):
    arch_id = "resnet34"
    blocks = (3, 4, 6, 3)


ARCHITECTURES: Dict[str, Callable[..., Classifier]] = {
    cls.arch_id: cls for cls in (LeNet5, LeNet5Half, ResNet18, ResNet34)
}


def build_classifier(arch_id: str, **kwargs) -> Classifier:
    try:
        cls = ARCHITECTURES[arch_id]
    except KeyError:
        raise ConfigError(
            f"unknown architecture {arch_id!r}; known: {sorted(ARCHITECTURES)}"
        ) from None
    return cls(**kwargs)


def freeze(model: nn.Module) -> nn.Module:
    """Put ``model`` in eval mode and stop gradients to its parameters."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def parameter_checksum(model: nn.Module, include_buffers: bool = True) -> str:
    """Hash of every parameter (and buffer) byte; equal iff the state is bit-identical."""
    h = hashlib.sha256()
    state = model.state_dict() if include_buffers else dict(model.named_parameters())
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# forward records and the batch-norm statistics penalty


@dataclass
class ForwardRecord:
    logits: torch.Tensor
    attention_maps: List[torch.Tensor]
    bn_batch_stats: Optional[List[Tuple[torch.Tensor, torch.Tensor]]] = None


def bn_layers(model: nn.Module) -> List[nn.BatchNorm2d]:
    return [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


def classify(model: Classifier, images: torch.Tensor, capture_bn: bool = False) -> ForwardRecord:
    """Run ``model`` and collect logits, attention maps and optionally BN batch statistics.

    Batch statistics are the per-channel mean and biased variance of each
    BN layer's input; they are what a train-mode BN layer would normalize with.
    """
    expected = tuple(model.input_shape)
    if images.dim() != 4 or tuple(images.shape[1:]) != expected:
        raise DimensionError(
            f"{model.arch_id} expects [n x {' x '.join(map(str, expected))}] images, "
            f"got {tuple(images.shape)}"
        )
    stats = None
    handles = []
    if capture_bn:
        stats = []

        def hook(module, inputs, output):
            x = inputs[0]
            dims = [0] + list(range(2, x.dim()))
            stats.append((x.mean(dims), x.var(dims, unbiased=False)))

        handles = [layer.register_forward_hook(hook) for layer in bn_layers(model)]
    try:
        logits, maps = model.forward_features(images)
    finally:
        for h in handles:
            h.remove()
    return ForwardRecord(logits, list(maps), stats)


class BNStatisticsWarning(UserWarning):
    pass


def bn_statistics_penalty(record: ForwardRecord, model: nn.Module) -> torch.Tensor:
    """Sum over BN layers of squared deviations of batch mean/variance from running stats.

    A model without BN layers yields 0 and emits :class:`BNStatisticsWarning`.
    """
    if record.bn_batch_stats is None:
        raise ContractError("forward record was produced without capture_bn=True")
    layers = bn_layers(model)
    if not layers:
        warnings.warn(f"{type(model).__name__} has no batch-norm layers; penalty is 0",
                      BNStatisticsWarning, stacklevel=2)
        return record.logits.new_zeros(())
    if len(layers) != len(record.bn_batch_stats):
        raise ContractError(
            f"record holds {len(record.bn_batch_stats)} BN statistics for {len(layers)} layers"
        )
    total = record.logits.new_zeros(())
    for layer, (mean, var) in zip(layers, record.bn_batch_stats):
        total = total + (mean - layer.running_mean).pow(2).sum() + (var - layer.running_var).pow(2).sum()
    return total


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: nn.Module, path, extra: Optional[dict] = None) -> None:
    """Write a self-describing safetensors file with architecture id and config."""
    if isinstance(model, ConditionalGenerator):
        kind, arch, config = "generator", "conditional_generator", model.spec.to_dict()
        num_classes = model.spec.num_classes
    elif isinstance(model, Classifier):
        kind, arch, config = "classifier", model.arch_id, model.config()
        num_classes = model.num_classes
    else:
        raise ConfigError(f"cannot checkpoint {type(model).__name__}")
    meta = {
        "format_version": str(CHECKPOINT_FORMAT_VERSION),
        "kind": kind,
        "arch_id": arch,
        "num_classes": str(num_classes),
        "config": json.dumps(config, sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    tensors = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    Path(path).write_bytes(_canonical_header(save(tensors, metadata=meta)))


def _canonical_header(blob: bytes) -> bytes:
    # safetensors writes metadata keys in hash order; re-emit the header sorted
    # so identical states always serialize to identical bytes
    n = struct.unpack("<Q", blob[:8])[0]
    header = json.loads(blob[8 : 8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return struct.pack("<Q", len(text)) + text + blob[8 + n :]


def read_checkpoint_metadata(path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as f:
        meta = dict(f.metadata() or {})
    if "format_version" not in meta:
        raise ConfigError(f"{path} is not a cgdd checkpoint (no format_version)")
    if int(meta["format_version"]) > CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"{path} uses unsupported format version {meta['format_version']}")
    meta["config"] = json.loads(meta["config"])
    meta["extra"] = json.loads(meta.get("extra", "{}"))
    meta["num_classes"] = int(meta["num_classes"])
    return meta


def load_checkpoint(path) -> nn.Module:
    meta = read_checkpoint_metadata(path)
    if meta["kind"] == "generator":
        model = ConditionalGenerator(GeneratorSpec(**meta["config"]))
    else:
        model = build_classifier(meta["arch_id"], **meta["config"])
    model.load_state_dict(load_file(str(path)))
    return model
