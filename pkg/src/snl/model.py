"""Teacher/student feature pyramids in forward- and reverse-distillation layouts.

The teacher is a frozen extractor returning ``K`` block outputs.  The student
either sees the image (``"fd"``, same architecture as the teacher) or decodes
a bottleneck built from the teacher blocks (``"rd"``).  Every student block is
followed by a :class:`~snl.cram.CRAM` layer unless CRAM is disabled.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from snl.cram import CRAM
from snl.errors import ConfigError, UsageError

logger = logging.getLogger(__name__)

TOPOLOGIES = ("fd", "rd")


@dataclass(frozen=True)
class BlockSpec:
    """Shape of block ``index`` (1-based): ``channels x height x width``."""

    index: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.index, self.channels, self.height, self.width) <= 0:
            raise ConfigError(f"invalid block spec {self}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


def toy_block_specs(input_size: int = 64, channels: Sequence[int] = (16, 32, 64)) -> list[BlockSpec]:
    specs, size = [], input_size
    for i, c in enumerate(channels, start=1):
        size //= 2
        specs.append(BlockSpec(i, c, size, size))
    return specs


def check_halving(specs: Sequence[BlockSpec], input_hw: tuple[int, int]) -> None:
    if not specs:
        raise ConfigError("at least one block is required")
    h, w = input_hw
    for spec in specs:
        if (spec.height * 2, spec.width * 2) != (h, w):
            raise ConfigError(f"block {spec.index} must halve the resolution {(h, w)}, got {spec.shape[1:]}")
        h, w = spec.height, spec.width


def _conv_bn_relu(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Stride-2 conv-norm-activation stages, one per block."""

    def __init__(self, specs: Sequence[BlockSpec], in_channels: int = 3):
        super().__init__()
        self.specs = list(specs)
        stages, c_in = [], in_channels
        for spec in self.specs:
            stages.append(_conv_bn_relu(c_in, spec.channels, stride=2))
            c_in = spec.channels
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


def build_toy_backbone(specs: Sequence[BlockSpec], seed: int, input_size: int = 64) -> ToyBackbone:
    """Toy extractor with weights drawn deterministically from ``seed``."""
    check_halving(specs, (input_size, input_size))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ToyBackbone(specs)


class WideResNetExtractor(nn.Module):
    """Stages 1-3 of torchvision's WideResNet-50-2."""

    def __init__(self, weights=None):
        super().__init__()
        from torchvision.models import wide_resnet50_2

        net = wide_resnet50_2(weights=weights)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3 = net.layer1, net.layer2, net.layer3

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(x)
        f1 = self.layer1(x)
        f2 = self.layer2(f1)
        f3 = self.layer3(f2)
        return [f1, f2, f3]


def wideresnet_block_specs(input_size: int = 256) -> list[BlockSpec]:
    return [
        BlockSpec(1, 256, input_size // 4, input_size // 4),
        BlockSpec(2, 512, input_size // 8, input_size // 8),
        BlockSpec(3, 1024, input_size // 16, input_size // 16),
    ]


class Bottleneck(nn.Module):
    """Fuses all teacher blocks into one embedding at the deepest resolution.

    Shallower blocks are average-pooled to the deepest block's size, concatenated,
    and mixed by a single conv-norm-activation layer.
    """

    def __init__(self, specs: Sequence[BlockSpec]):
        super().__init__()
        last = specs[-1]
        self.out_hw = (last.height, last.width)
        self.fuse = _conv_bn_relu(sum(s.channels for s in specs), last.channels)

    def forward(self, pyr: Sequence[torch.Tensor]) -> torch.Tensor:
        pooled = [f if f.shape[-2:] == self.out_hw else F.adaptive_avg_pool2d(f, self.out_hw) for f in pyr]
        return self.fuse(torch.cat(pooled, dim=1))


class Decoder(nn.Module):
    """Mirror of the encoder: rebuilds blocks K..1 from the bottleneck.

    Returns blocks deepest-first, as produced.
    """

    def __init__(self, specs: Sequence[BlockSpec]):
        super().__init__()
        specs = list(specs)
        layers = [nn.Sequential(_conv_bn_relu(specs[-1].channels, specs[-1].channels))]
        for deeper, spec in zip(specs[::-1], specs[-2::-1]):
            layers.append(
                nn.Sequential(
                    nn.ConvTranspose2d(deeper.channels, spec.channels, 2, stride=2, bias=False),
                    nn.BatchNorm2d(spec.channels),
                    nn.ReLU(inplace=True),
                    _conv_bn_relu(spec.channels, spec.channels),
                )
            )
        self.layers = nn.ModuleList(layers)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        for layer in self.layers:
            x = layer(x)
            out.append(x)
        return out


class TeacherStudentModel(nn.Module):
    """Frozen teacher, trainable student, one CRAM (or identity) per student block."""

    def __init__(
        self,
        teacher: nn.Module,
        student: nn.Module,
        specs: Sequence[BlockSpec],
        topology: str = "rd",
        input_size: int = 64,
        bottleneck: nn.Module | None = None,
        num_centers: int = 50,
        cram_enabled: bool = True,
        backbone: str = "toy",
    ):
        super().__init__()
        if topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}, got {topology!r}")
        if topology == "rd" and bottleneck is None:
            raise ConfigError("reverse distillation needs a bottleneck")
        self.teacher = teacher
        self.student = student
        self.bottleneck = bottleneck
        self.specs = list(specs)
        self.topology = topology
        self.input_size = input_size
        self.backbone = backbone
        self.cram_enabled = cram_enabled
        self.num_centers = num_centers
        self.crams = nn.ModuleList(
            CRAM(s.channels, num_centers) if cram_enabled else nn.Identity() for s in self.specs
        )
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.teacher.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self.teacher.eval()
        return self

    def student_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("teacher.")]

    def _check_image(self, images: torch.Tensor) -> None:
        expected = (3, self.input_size, self.input_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ConfigError(f"expected images of shape (B, {', '.join(map(str, expected))}), got {tuple(images.shape)}")

    @torch.no_grad()
    def teacher_forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        self._check_image(images)
        return list(self.teacher(images))

    def student_forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Student pyramid, ordered shallow to deep like the teacher's.

        ``x`` is the image batch for ``"fd"`` and the bottleneck embedding for ``"rd"``.
        """
        if self.topology == "fd":
            if x.dim() != 4 or tuple(x.shape[1:]) != (3, self.input_size, self.input_size):
                raise UsageError(f"forward-distillation student takes images, got shape {tuple(x.shape)}")
            blocks = list(self.student(x))
        else:
            last = self.specs[-1]
            if x.dim() != 4 or tuple(x.shape[1:]) != last.shape:
                raise UsageError(
                    f"reverse-distillation student takes a bottleneck of shape (B, {last.channels}, "
                    f"{last.height}, {last.width}), got {tuple(x.shape)}"
                )
            blocks = list(self.student(x))[::-1]
        return [cram(f) for cram, f in zip(self.crams, blocks)]

    def forward(self, images: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        pyr_t = self.teacher_forward(images)
        if self.topology == "fd":
            pyr_s = self.student_forward(images)
        else:
            pyr_s = self.student_forward(self.bottleneck(pyr_t))
        return pyr_t, pyr_s


def build_model(
    topology: str = "rd",
    backbone: str = "toy",
    input_size: int = 64,
    num_centers: int = 50,
    cram_enabled: bool = True,
    seed: int = 0,
    teacher_seed: int = 0,
    pretrained: bool = False,
    student_from_teacher: bool = False,
    toy_channels: Sequence[int] = (16, 32, 64),
) -> TeacherStudentModel:
    """Assemble a teacher/student pair.

    Args:
        backbone: ``"toy"`` or ``"wideresnet50"``.
        seed: seeds the student, bottleneck and CRAM initialization.
        teacher_seed: seeds the toy teacher (ignored for pretrained backbones).
        pretrained: load ImageNet weights for the WideResNet teacher.
        student_from_teacher: copy teacher weights into an FD student.
    """
    if backbone == "toy":
        specs = toy_block_specs(input_size, toy_channels)
        teacher = build_toy_backbone(specs, teacher_seed, input_size)
    elif backbone == "wideresnet50":
        if input_size % 16:
            raise ConfigError("WideResNet input size must be a multiple of 16")
        specs = wideresnet_block_specs(input_size)
        weights = "IMAGENET1K_V1" if pretrained else None
        teacher = WideResNetExtractor(weights)
    else:
        raise ConfigError(f"unknown backbone {backbone!r}")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        bottleneck = None
        if topology == "fd":
            student = ToyBackbone(specs) if backbone == "toy" else WideResNetExtractor(None)
            if student_from_teacher:
                student.load_state_dict(teacher.state_dict())
        elif topology == "rd":
            bottleneck = Bottleneck(specs)
            student = Decoder(specs)
        else:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}, got {topology!r}")
        model = TeacherStudentModel(
            teacher,
            student,
            specs,
            topology=topology,
            input_size=input_size,
            bottleneck=bottleneck,
            num_centers=num_centers,
            cram_enabled=cram_enabled,
            backbone=backbone,
        )
    model.build_args = dict(
        topology=topology,
        backbone=backbone,
        input_size=input_size,
        num_centers=num_centers,
        cram_enabled=cram_enabled,
        seed=seed,
        teacher_seed=teacher_seed,
        pretrained=pretrained,
        student_from_teacher=student_from_teacher,
        toy_channels=list(toy_channels),
    )
    return model


def save_checkpoint(path, model: TeacherStudentModel, config_hash: str = "", extra: dict | None = None) -> Path:
    """Write student, bottleneck and CRAM state; the teacher is stored by name only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v for k, v in model.state_dict().items() if not k.startswith("teacher.")}
    archive = {
        "format": "snl-checkpoint/1",
        "student_state": state,
        "topology": model.topology,
        "block_specs": [asdict(s) for s in model.specs],
        "teacher": {"adapter": model.backbone, **model.build_args},
        "config_hash": config_hash,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(archive, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[TeacherStudentModel, dict]:
    """Rebuild the model from a checkpoint; returns ``(model, archive)``."""
    archive = torch.load(Path(path), map_location="cpu", weights_only=False)
    if archive.get("format") != "snl-checkpoint/1":
        raise ConfigError(f"{path} is not a model checkpoint")
    args = dict(archive["teacher"])
    args.pop("adapter")
    args["student_from_teacher"] = False
    model = build_model(**args)
    specs = [BlockSpec(**s) for s in archive["block_specs"]]
    if specs != model.specs:
        raise ConfigError("checkpoint block specs do not match the rebuilt model")
    missing, unexpected = model.load_state_dict(archive["student_state"], strict=False)
    missing = [k for k in missing if not k.startswith("teacher.")]
    if missing or unexpected:
        raise ConfigError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")
    model.eval()
    return model, archive
