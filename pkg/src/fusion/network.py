"""The differentiable model, written functionally.

Parameters live in an immutable ParameterBundle (a named dict of tensors)
rather than nn.Module state, because the bilevel optimizer needs to build
updated parameter sets that stay on the autograd tape.  Three sub-networks
share the bundle, addressed by name prefix:

  fen.*   feature extraction trunk (6 convs + 2 linears)       group: theta
  att.*   attention head scoring each feature row              group: rho
  cln.*   classification head applied to features              group: W
  film.*  optional per-channel conditioning generators         group: film
  context optional conditioning input vector                   group: context

The inner loop adapts psi = {W, rho} (+ film and context when enabled); the
outer loop adapts phi = {theta, W, rho} (+ film).  The context vector is
task-specific: it is zeroed before each task and only ever moved by inner
steps.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, CorruptionError, FormatError, ValidationError

_CONV_LAYERS = 6


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 1
    image_size: int = 28
    conv_channels: int = 64
    feature_dim: int = 64
    attention_hidden: int = 0  # 0 means feature_dim // 2
    cln_hidden: int = 0  # 0 means feature_dim
    num_classes: int = 10
    strides: tuple = (2, 1, 2, 1, 2, 1)
    film: bool = False
    context_dim: int = 100

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.strides) != _CONV_LAYERS:
            raise ConfigError(f"need {_CONV_LAYERS} stride entries, got {len(self.strides)}")
        if any(s < 1 for s in self.strides):
            raise ConfigError("strides must all be >= 1")
        for name in ("in_channels", "image_size", "conv_channels", "feature_dim", "context_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.attention_hidden < 0 or self.cln_hidden < 0:
            raise ConfigError("hidden dims must be non-negative (0 selects the default)")

    @property
    def att_hidden(self) -> int:
        return self.attention_hidden or max(1, self.feature_dim // 2)

    @property
    def head_hidden(self) -> int:
        return self.cln_hidden or self.feature_dim

    @property
    def conv_output_hw(self) -> int:
        """Spatial side length after the conv stack (square inputs)."""
        side = self.image_size
        for s in self.strides:
            # 3x3 pad-1 and 1x1 pad-0 convs share this output-size formula
            side = (side - 1) // s + 1
        return side

    @property
    def flat_dim(self) -> int:
        return self.conv_channels * self.conv_output_hw ** 2


def expected_shapes(arch: ArchConfig) -> dict:
    """Canonical name -> shape table for a bundle of this architecture."""
    c = arch.conv_channels
    shapes = {}
    for i in range(_CONV_LAYERS):
        in_c = arch.in_channels if i == 0 else c
        k = 1 if i == _CONV_LAYERS - 1 else 3
        shapes[f"fen.conv{i}.weight"] = (c, in_c, k, k)
        shapes[f"fen.conv{i}.bias"] = (c,)
    f_dim = arch.feature_dim
    shapes["fen.fc0.weight"] = (f_dim, arch.flat_dim)
    shapes["fen.fc0.bias"] = (f_dim,)
    shapes["fen.fc1.weight"] = (f_dim, f_dim)
    shapes["fen.fc1.bias"] = (f_dim,)
    a = arch.att_hidden
    shapes["att.fc0.weight"] = (a, f_dim)
    shapes["att.fc0.bias"] = (a,)
    shapes["att.fc1.weight"] = (1, a)
    shapes["att.fc1.bias"] = (1,)
    h = arch.head_hidden
    shapes["cln.fc0.weight"] = (h, f_dim)
    shapes["cln.fc0.bias"] = (h,)
    shapes["cln.fc1.weight"] = (arch.num_classes, h)
    shapes["cln.fc1.bias"] = (arch.num_classes,)
    if arch.film:
        for layer in (_CONV_LAYERS - 2, _CONV_LAYERS - 1):
            shapes[f"film.gen{layer}.weight"] = (2 * c, arch.context_dim)
            shapes[f"film.gen{layer}.bias"] = (2 * c,)
        shapes["context"] = (arch.context_dim,)
    return shapes


_GROUP_PREFIX = {"theta": "fen.", "rho": "att.", "W": "cln.", "film": "film."}


class ParameterBundle:
    """Immutable named parameter set with group addressing.

    Tensors may be autograd leaves (fresh or post-outer-update bundles) or
    graph nodes (post-inner-update bundles); the container never mutates
    them.  `info` carries non-parameter metadata such as inner step counts.
    """

    def __init__(self, arch: ArchConfig, tensors: dict, info: dict | None = None):
        shapes = expected_shapes(arch)
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise ValidationError(
                f"parameter names do not match architecture; missing={missing} extra={extra}"
            )
        for name, t in tensors.items():
            if tuple(t.shape) != shapes[name]:
                raise ValidationError(
                    f"{name}: shape {tuple(t.shape)} does not match expected {shapes[name]}"
                )
            if not torch.isfinite(t).all():
                raise ValidationError(f"{name}: contains non-finite values")
        self.arch = arch
        self._tensors = dict(tensors)
        self.info = dict(info or {})

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def names(self) -> list:
        return sorted(self._tensors)

    @property
    def dtype(self) -> torch.dtype:
        return self._tensors["fen.conv0.weight"].dtype

    def group_names(self, group: str) -> list:
        """Sorted tensor names in a group; 'psi' and 'phi' are the composites."""
        if group in _GROUP_PREFIX:
            prefix = _GROUP_PREFIX[group]
            return sorted(n for n in self._tensors if n.startswith(prefix))
        if group == "context":
            return ["context"] if "context" in self._tensors else []
        if group == "psi":
            names = self.group_names("W") + self.group_names("rho")
            if self.arch.film:
                names += self.group_names("film") + self.group_names("context")
            return sorted(names)
        if group == "phi":
            names = self.group_names("theta") + self.group_names("W") + self.group_names("rho")
            if self.arch.film:
                names += self.group_names("film")
            return sorted(names)
        raise ConfigError(f"unknown parameter group {group!r}")

    def group(self, group: str) -> dict:
        return {n: self._tensors[n] for n in self.group_names(group)}

    def replace(self, updates: dict, info: dict | None = None) -> "ParameterBundle":
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise ValidationError(f"cannot replace unknown parameters {sorted(unknown)}")
        merged = dict(self._tensors)
        merged.update(updates)
        return ParameterBundle(self.arch, merged, info if info is not None else self.info)

    def detached(self, requires_grad: bool = True) -> "ParameterBundle":
        """Fresh leaf tensors sharing no graph with this bundle."""
        tensors = {
            n: t.detach().clone().requires_grad_(requires_grad)
            for n, t in self._tensors.items()
        }
        return ParameterBundle(self.arch, tensors, self.info)

    def to_dtype(self, dtype) -> "ParameterBundle":
        tensors = {
            n: t.detach().clone().to(dtype).requires_grad_(t.requires_grad)
            for n, t in self._tensors.items()
        }
        return ParameterBundle(self.arch, tensors, self.info)

    def num_parameters(self, group: str | None = None) -> int:
        names = self.group_names(group) if group else self.names()
        return sum(self._tensors[n].numel() for n in names)


# layers whose output feeds a ReLU; their weights get the He gain so the
# activation variance survives the six-conv stack instead of decaying to a
# bias-dominated constant
_RELU_FOLLOWED = ("fen.conv", "fen.fc0.", "cln.fc0.")


def _weight_bound(name: str, fan_in: int) -> float:
    if any(name.startswith(p) for p in _RELU_FOLLOWED):
        return math.sqrt(6.0 / fan_in)
    return math.sqrt(3.0 / fan_in)


def _init_named(name: str, shape, gen: torch.Generator, dtype) -> torch.Tensor:
    if name == "context":
        return torch.zeros(shape, dtype=dtype, requires_grad=True)
    if name.startswith("film.gen"):
        c2 = shape[0]
        if name.endswith("weight"):
            # zero weight + (gamma=1, beta=0) bias makes FiLM the identity at init
            return torch.zeros(shape, dtype=dtype, requires_grad=True)
        bias = torch.cat([torch.ones(c2 // 2, dtype=dtype), torch.zeros(c2 // 2, dtype=dtype)])
        return bias.requires_grad_(True)
    if name.endswith("weight"):
        fan_in = int(np.prod(shape[1:]))
        bound = _weight_bound(name, fan_in)
        t = torch.rand(shape, generator=gen, dtype=dtype) * (2 * bound) - bound
        return t.requires_grad_(True)
    # zero biases keep the constant component of every activation at zero,
    # which matters downstream: few-step heads cannot cancel a large offset
    return torch.zeros(shape, dtype=dtype, requires_grad=True)


def init_params(arch: ArchConfig, seed: int = 0, dtype=torch.float32) -> ParameterBundle:
    """Deterministically initialize a full parameter bundle."""
    gen = torch.Generator().manual_seed(int(seed))
    shapes = expected_shapes(arch)
    tensors = {}
    for name in sorted(shapes):
        tensors[name] = _init_named(name, shapes[name], gen, dtype)
    return ParameterBundle(arch, tensors)


def reinit_cln(
    params: ParameterBundle, seed: int, num_classes: int | None = None
) -> ParameterBundle:
    """Freshly initialize the classification head, optionally resizing it.

    Everything outside cln.* is carried over by reference, so graph history
    and optimizer bookkeeping for the rest of the bundle stay valid.
    """
    arch = params.arch
    if num_classes is not None and num_classes != arch.num_classes:
        arch = ArchConfig(**{**asdict(arch), "num_classes": num_classes})
    gen = torch.Generator().manual_seed(int(seed))
    shapes = expected_shapes(arch)
    tensors = {n: params[n] for n in params.names() if not n.startswith("cln.")}
    for name in sorted(n for n in shapes if n.startswith("cln.")):
        tensors[name] = _init_named(name, shapes[name], gen, params.dtype)
    return ParameterBundle(arch, tensors, params.info)


def reset_context(params: ParameterBundle) -> ParameterBundle:
    """Zero the conditioning vector (no-op for film-less bundles)."""
    if "context" not in params.names():
        return params
    z = torch.zeros_like(params["context"]).requires_grad_(True)
    return params.replace({"context": z})


@dataclass(frozen=True)
class MetaExample:
    """A pooled feature vector plus the attention weights that built it."""

    me: torch.Tensor
    alpha: torch.Tensor

    def __post_init__(self):
        if self.me.ndim != 1 or self.alpha.ndim != 1:
            raise ValidationError("meta-example fields must be vectors")


def film_transform(x: torch.Tensor, context: torch.Tensor, weight, bias) -> torch.Tensor:
    """Per-channel affine conditioning: gamma(z) * x + beta(z)."""
    gamma_beta = weight @ context + bias
    channels = gamma_beta.shape[0] // 2
    if x.shape[-3] != channels:
        raise ValidationError(
            f"conditioning is sized for {channels} channels, activations have {x.shape[-3]}"
        )
    shape = (1,) * (x.ndim - 3) + (channels, 1, 1)
    gamma = gamma_beta[:channels].reshape(shape)
    beta = gamma_beta[channels:].reshape(shape)
    return gamma * x + beta


def fen_forward(params: ParameterBundle, x: torch.Tensor) -> torch.Tensor:
    """Per-example features, shape (N, feature_dim)."""
    arch = params.arch
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ValidationError(f"expected N,C,H,W input, got shape {tuple(x.shape)}")
    if x.shape[0] < 1:
        raise ValidationError("batch must be non-empty")
    if x.shape[1] != arch.in_channels or x.shape[2] != arch.image_size or x.shape[3] != arch.image_size:
        raise ValidationError(
            f"input shape {tuple(x.shape[1:])} does not match architecture "
            f"({arch.in_channels}, {arch.image_size}, {arch.image_size})"
        )
    if not torch.isfinite(x).all():
        raise ValidationError("input batch contains non-finite values")
    h = x.to(params.dtype)
    for i in range(_CONV_LAYERS):
        pad = 0 if i == _CONV_LAYERS - 1 else 1
        h = F.conv2d(
            h,
            params[f"fen.conv{i}.weight"],
            params[f"fen.conv{i}.bias"],
            stride=arch.strides[i],
            padding=pad,
        )
        if arch.film and i >= _CONV_LAYERS - 2:
            h = film_transform(
                h, params["context"], params[f"film.gen{i}.weight"], params[f"film.gen{i}.bias"]
            )
        h = F.relu(h)
    h = h.reshape(h.shape[0], -1)
    h = F.relu(F.linear(h, params["fen.fc0.weight"], params["fen.fc0.bias"]))
    return F.linear(h, params["fen.fc1.weight"], params["fen.fc1.bias"])


def attention_logits(params: ParameterBundle, features: torch.Tensor) -> torch.Tensor:
    h = torch.tanh(F.linear(features, params["att.fc0.weight"], params["att.fc0.bias"]))
    return F.linear(h, params["att.fc1.weight"], params["att.fc1.bias"]).squeeze(-1)


def attention_pool(params: ParameterBundle, features: torch.Tensor) -> MetaExample:
    """Softmax-weighted combination of feature rows (one weight per example)."""
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValidationError("features must be a non-empty K x F matrix")
    if not torch.isfinite(features).all():
        raise ValidationError("features contain non-finite values")
    alpha = torch.softmax(attention_logits(params, features), dim=0)
    return MetaExample(me=alpha @ features, alpha=alpha)


def mean_pool(features: torch.Tensor) -> MetaExample:
    """Uniform-weight pooling; the attention-free baseline.

    Computed as attention pooling with constant-zero logits so that the two
    operators agree bit for bit when the attention stack is zeroed out.
    """
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValidationError("features must be a non-empty K x F matrix")
    k = features.shape[0]
    alpha = torch.softmax(
        torch.zeros(k, dtype=features.dtype, device=features.device), dim=0
    )
    return MetaExample(me=alpha @ features, alpha=alpha)


def cln_forward(params: ParameterBundle, feature: torch.Tensor) -> torch.Tensor:
    """Class logits for one feature vector or a batch of them."""
    if feature.shape[-1] != params.arch.feature_dim:
        raise ValidationError(
            f"feature dim {feature.shape[-1]} does not match "
            f"configured {params.arch.feature_dim}"
        )
    h = F.relu(F.linear(feature, params["cln.fc0.weight"], params["cln.fc0.bias"]))
    return F.linear(h, params["cln.fc1.weight"], params["cln.fc1.bias"])


def classify(params: ParameterBundle, x: torch.Tensor) -> torch.Tensor:
    """Full forward pass: images to per-class logits."""
    return cln_forward(params, fen_forward(params, x))


_CHECKPOINT_MAGIC = "fusion-params-v1"


def save_checkpoint(params: ParameterBundle, path) -> None:
    """Serialize a bundle: JSON index header + little-endian float32 payload."""
    entries = []
    payload = bytearray()
    for name in params.names():
        arr = params[name].detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(arr.tobytes(order="C"))
    header = json.dumps(
        {"format": _CHECKPOINT_MAGIC, "arch": asdict(params.arch), "tensors": entries}
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_checkpoint(path) -> ParameterBundle:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: too short to be a checkpoint")
    (header_len,) = struct.unpack_from("<I", raw, 0)
    if len(raw) < 4 + header_len:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(raw[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    if header.get("format") != _CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: unrecognized checkpoint format tag")
    arch_fields = dict(header["arch"])
    arch_fields["strides"] = tuple(arch_fields["strides"])
    arch = ArchConfig(**arch_fields)
    payload = raw[4 + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CorruptionError(f"{path}: payload truncated at tensor {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).requires_grad_(True)
    return ParameterBundle(arch, tensors)
