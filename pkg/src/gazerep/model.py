"""Micro-macro temporal-convolutional autoencoder and its supervised twin."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import DILATIONS, TCN, Conv1d, Linear, Module, destroy, gap, receptive_field

REFERENCE_PARAM_TOTALS = {"position": 652_228, "velocity": 1_964_676}
DILATIONS_250HZ = (1, 1, 2, 4, 8, 16, 16, 32)  # receptive field 161
MICRO_TAP_BLOCK = 1  # output of block 2 == conv layer 4
MACRO_TAP_BLOCK = 3  # output of block 4 == conv layer 8


@dataclass(frozen=True)
class ModelConfig:
    modality: str = "position"
    enc_filters: int = 128
    enc_layers: int = 8
    dec_spec: tuple[tuple[int, int], ...] = ((128, 4), (64, 4))
    dilations: tuple[int, ...] = DILATIONS
    z1_dim: int = 64
    z2_dim: int = 64
    destroy_p: float = 0.75
    in_channels: int = 2
    skip_projection: str = "always"

    def __post_init__(self):
        if self.modality not in ("position", "velocity"):
            raise ValueError(f"modality must be 'position' or 'velocity', got {self.modality!r}")
        if len(self.dilations) != self.enc_layers:
            raise ValueError(f"need one dilation per encoder layer: {self.dilations} vs {self.enc_layers} layers")
        if self.enc_layers != 8:
            raise ValueError("the encoder taps layers 4 and 8, so it must have exactly 8 layers")
        if sum(n for _, n in self.dec_spec) != len(self.dilations):
            raise ValueError(f"decoder spec {self.dec_spec} must total {len(self.dilations)} layers")
        if (self.z1_dim, self.z2_dim) != (64, 64):
            raise ValueError("micro and macro bottlenecks are fixed at 64 dims each")
        if not 0.0 <= self.destroy_p <= 1.0:
            raise ValueError(f"destroy_p must lie in [0, 1], got {self.destroy_p}")

    @classmethod
    def position(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def velocity(cls) -> "ModelConfig":
        return cls(modality="velocity", enc_filters=256, dec_spec=((128, 8),), destroy_p=0.66)

    @classmethod
    def velocity_250hz(cls) -> "ModelConfig":
        return dataclasses.replace(cls.velocity(), dilations=DILATIONS_250HZ)

    @classmethod
    def preset(cls, modality: str) -> "ModelConfig":
        key = {"pos": "position", "vel": "velocity"}.get(modality, modality)
        if key == "position":
            return cls.position()
        if key == "velocity":
            return cls.velocity()
        raise ValueError(f"unknown modality {modality!r}")

    def reduced(self, filters: int) -> "ModelConfig":
        """Same topology with ``filters`` encoder channels; decoder widths scale with it."""
        first = self.dec_spec[0][0]
        dec = tuple((max(1, w * filters // first), n) for w, n in self.dec_spec)
        return dataclasses.replace(self, enc_filters=filters, dec_spec=dec)

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(w for w, n in self.dec_spec for _ in range(n))

    @property
    def z_dim(self) -> int:
        return self.z1_dim + self.z2_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dec_spec"] = [list(x) for x in self.dec_spec]
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown ModelConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "dec_spec" in d:
            d["dec_spec"] = tuple(tuple(int(v) for v in x) for x in d["dec_spec"])
        if "dilations" in d:
            d["dilations"] = tuple(int(v) for v in d["dilations"])
        return cls(**d)


@dataclass(frozen=True)
class Representation:
    z1: np.ndarray
    z2: np.ndarray
    modality: str = "velocity"

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.z1, self.z2], axis=-1)


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 2:
        t = t.reshape(1, *t.shape)
    if t.ndim != 3:
        raise ValueError(f"expected a (2, T) or (B, 2, T) signal, got shape {t.shape}")
    return t


class Encoder(Module):
    """Non-causal TCN; GAP + FC at layer 4 (micro) and layer 8 (macro)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        f = config.enc_filters
        self.tcn = TCN(config.in_channels, [f] * config.enc_layers, config.dilations, rng,
                       causal=False, project=config.skip_projection)
        self.fc_micro = Linear(f, config.z1_dim, rng)
        self.fc_macro = Linear(f, config.z2_dim, rng)
        self.in_channels = config.in_channels

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"encoder expects {self.in_channels} channels, got input {x.shape}")
        outs = self.tcn(x)
        z1 = self.fc_micro(gap(outs[MICRO_TAP_BLOCK]))
        z2 = self.fc_macro(gap(outs[MACRO_TAP_BLOCK]))
        return z1, z2


class Autoencoder(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        widths = config.decoder_widths
        self.encoder = Encoder(config, rng)
        self.decoder = TCN(config.in_channels, widths, config.dilations, rng,
                           causal=True, project=config.skip_projection)
        # z2 conditions decoder layer 1, z1 conditions layer 5
        self.cond_macro = Linear(config.z2_dim, widths[0], rng)
        self.cond_micro = Linear(config.z1_dim, widths[4], rng)
        self.head = Conv1d(widths[-1], config.in_channels, rng, kernel_size=1)

    def encode(self, x) -> tuple[Tensor, Tensor]:
        return self.encoder(_as_batch(x))

    def decode(self, destroyed, z1: Tensor, z2: Tensor) -> Tensor:
        destroyed = _as_batch(destroyed)
        if z1.shape[-1] + z2.shape[-1] != self.config.z_dim:
            raise ValueError(f"decode: expected z of total size {self.config.z_dim}, got {z1.shape} and {z2.shape}")
        cond = {0: self.cond_macro(z2), 4: self.cond_micro(z1)}
        return self.head(self.decoder(destroyed, cond)[-1])

    def forward(self, x, rng: np.random.Generator | int | None = None) -> Tensor:
        x = _as_batch(x)
        z1, z2 = self.encode(x)
        p = self.config.destroy_p if self.training else 0.0
        return self.decode(destroy(x, p, 0 if rng is None else rng), z1, z2)

    def loss(self, x, rng: np.random.Generator | int) -> Tensor:
        """Summed squared reconstruction error over batch, channels and time."""
        x = _as_batch(x)
        return ad.sum_of_squares(self.forward(x, rng) - x)

    def represent(self, x) -> Representation:
        """Embed one (2, T) signal in eval mode without recording a graph."""
        was_training = self.training
        self.eval()
        try:
            with ad.no_grad():
                z1, z2 = self.encode(x)
        finally:
            self.train(was_training)
        squeeze = np.ndim(x) == 2 if not isinstance(x, Tensor) else x.ndim == 2
        z1, z2 = z1.data, z2.data
        if squeeze:
            z1, z2 = z1[0], z2[0]
        return Representation(z1.copy(), z2.copy(), self.config.modality)


def sse(x, x_hat) -> float:
    x, x_hat = np.asarray(x, np.float64), np.asarray(x_hat, np.float64)
    return float(np.sum((x - x_hat) ** 2))


class SupervisedTCN(Module):
    """The encoder with an FC + softmax head in place of the decoder."""

    def __init__(self, config: ModelConfig, n_classes: int, seed: int = 0):
        super().__init__()
        if n_classes < 2:
            raise ValueError("need at least two classes")
        rng = np.random.default_rng(seed)
        self.config = config
        self.n_classes = n_classes
        self.encoder = Encoder(config, rng)
        self.head = Linear(config.z_dim, n_classes, rng)

    def forward(self, x) -> Tensor:
        z1, z2 = self.encoder(_as_batch(x))
        return self.head(ad.concat([z1, z2], axis=1))


def supervised_forward(model: SupervisedTCN, x) -> np.ndarray:
    """Class probabilities for one (2, T) signal or a (B, 2, T) batch."""
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            probs = ad.softmax(model(x), axis=1).data
    finally:
        model.train(was_training)
    return probs[0] if np.ndim(x) == 2 else probs


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(ad.log_softmax(logits, axis=1) * onehot).sum() * (1.0 / len(labels))


# parameter audit

_COMPONENTS = (
    ("encoder.tcn", ".convs.", "encoder conv (k=3)"),
    ("encoder.tcn", ".norms.", "encoder batchnorm affine"),
    ("encoder.tcn", ".skip.", "encoder skip 1x1 conv"),
    ("encoder.fc_", "", "bottleneck FC (z1, z2)"),
    ("decoder", ".convs.", "decoder conv (k=3)"),
    ("decoder", ".norms.", "decoder batchnorm affine"),
    ("decoder", ".skip.", "decoder skip 1x1 conv"),
    ("cond_", "", "conditioning FC (z -> decoder)"),
    ("head", "", "output 1x1 conv"),
)


def param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def parameter_breakdown(model: Module) -> dict[str, int]:
    counts = {label: 0 for *_, label in _COMPONENTS}
    for name, p in model.named_parameters():
        for prefix, infix, label in _COMPONENTS:
            if name.startswith(prefix) and infix in name:
                counts[label] += p.size
                break
        else:
            counts.setdefault("other", 0)
            counts["other"] += p.size
    return counts


def audit_report(config: ModelConfig, model: Module | None = None) -> str:
    model = model or Autoencoder(config)
    lines = [f"modality: {config.modality}  encoder {config.enc_filters} filters x {config.enc_layers} layers, "
             f"decoder {' + '.join(f'{w}x{n}' for w, n in config.dec_spec)}"]
    for label, n in parameter_breakdown(model).items():
        lines.append(f"  {label:<34s}{n:>12,d}")
    total = param_count(model)
    lines.append(f"  {'total':<34s}{total:>12,d}")
    if config == ModelConfig.preset(config.modality):
        ref = REFERENCE_PARAM_TOTALS[config.modality]
        dev = (total - ref) / ref
        flag = "OK" if abs(dev) <= 0.05 else "OUTSIDE +-5%"
        lines.append(f"  {'reference total':<34s}{ref:>12,d}  deviation {dev:+.2%} [{flag}]")
    lines.append("receptive field per encoder layer: " + ", ".join(
        str(receptive_field(i + 1, config.dilations)) for i in range(len(config.dilations))))
    return "\n".join(lines)
