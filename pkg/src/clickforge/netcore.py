"""The differentiable model: a compact encoder-decoder backbone producing a
coarse mask, and a light refinement head of three dilated convolution blocks
plus a plain convolution block.

Parameters live in a ParamSet (ordered name -> float32 tensor, each tagged
with its partition) rather than inside module objects, so the adaptation
engine can snapshot, restore, and partially update them freely. Forward
passes are pure functions of (input, ParamSet); they return the probability
map together with a ForwardTape able to produce parameter gradients for any
upstream gradient via reverse mode.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .raster import PROB_EPS, ProbMap, _as_array

TAG_BSM = "BSM"
TAG_ADM = "ADM"
_TAGS = (TAG_BSM, TAG_ADM)

_MAGIC = b"CFCK"
_FORMAT_VERSION = 1

# encoder width multipliers per downsampling level, relative to base width
_WIDTH_MULT = (1.0, 1.5, 2.0, 3.0, 4.0)


@dataclass(frozen=True)
class ModelConfig:
    bsm_depth: int = 4            # downsampling (and upsampling) stages
    bsm_base_width: int = 16
    adm_width: int = 16
    adm_dilations: tuple = (2, 4, 8)
    bsm_in_channels: int = 5      # RGB + positive disks + negative disks
    adm_in_channels: int = 6      # BSM input + coarse mask

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.adm_dilations[1:], self.adm_dilations)):
            raise ValueError("dilation rates must be strictly increasing")
        if self.bsm_base_width < 4 or self.adm_width < 4:
            raise ValueError("widths must be >= 4")
        if self.bsm_depth < 1:
            raise ValueError("bsm_depth must be >= 1")

    def encoder_widths(self):
        base = self.bsm_base_width
        return [int(base * _WIDTH_MULT[min(k, len(_WIDTH_MULT) - 1)])
                for k in range(self.bsm_depth + 1)]


class ParamSet:
    """Ordered, partition-tagged parameter tensors with immutable shapes."""

    def __init__(self, tensors, tags):
        if set(tensors) != set(tags):
            raise ValueError("every tensor needs exactly one partition tag")
        for name, tag in tags.items():
            if tag not in _TAGS:
                raise ValueError(f"untagged or mistagged tensor {name!r}: {tag!r}")
        self.tensors = dict(tensors)
        self._tags = dict(tags)

    def names(self):
        return list(self.tensors)

    def get(self, name) -> torch.Tensor:
        return self.tensors[name]

    def tag(self, name) -> str:
        return self._tags[name]

    def set_(self, name, value: torch.Tensor):
        """Replace a tensor (copy-on-write update); shape and dtype are fixed."""
        old = self.tensors[name]
        if tuple(value.shape) != tuple(old.shape):
            raise ValueError(f"shape of {name!r} is immutable: "
                             f"{tuple(old.shape)} vs {tuple(value.shape)}")
        if value.dtype != old.dtype:
            raise ValueError(f"dtype of {name!r} is immutable")
        self.tensors[name] = value.detach()

    def scope_names(self, scope):
        """Names selected by a partition scope ("BSM", "ADM", or "all")."""
        if scope in (None, "all"):
            return self.names()
        if scope in _TAGS:
            return [n for n in self.tensors if self._tags[n] == scope]
        return list(scope)

    def clone(self) -> "ParamSet":
        return ParamSet({n: t.detach().clone() for n, t in self.tensors.items()},
                        self._tags)

    def astype(self, dtype) -> "ParamSet":
        return ParamSet({n: t.detach().clone().to(dtype)
                         for n, t in self.tensors.items()}, self._tags)

    def snapshot_bytes(self, scope=None):
        """name -> raw little-endian bytes, for bit-level comparisons."""
        return {n: self.tensors[n].detach().numpy().astype("<f4", copy=False).tobytes()
                for n in self.scope_names(scope)}

    @property
    def n_params(self):
        return sum(t.numel() for t in self.tensors.values())


def partition(params: ParamSet):
    """Split into (bsm_subset, adm_subset); disjoint and covering."""
    bsm = {n: params.get(n) for n in params.scope_names(TAG_BSM)}
    adm = {n: params.get(n) for n in params.scope_names(TAG_ADM)}
    return (ParamSet(bsm, {n: TAG_BSM for n in bsm}),
            ParamSet(adm, {n: TAG_ADM for n in adm}))


def _layer_specs(config: ModelConfig):
    """Declarative layer table: (name, out_ch, in_ch, kernel, tag)."""
    enc = config.encoder_widths()
    depth = config.bsm_depth
    layers = [("bsm.stem", enc[0], config.bsm_in_channels, 3, TAG_BSM)]
    for k in range(1, depth + 1):
        layers.append((f"bsm.down{k}", enc[k], enc[k - 1], 3, TAG_BSM))
    up_in = enc[depth]
    for k in range(depth, 0, -1):
        out = enc[max(k - 2, 0)]
        layers.append((f"bsm.dec{k}", out, up_in + enc[k - 1], 3, TAG_BSM))
        up_in = out
    layers.append(("bsm.head", 1, up_in, 3, TAG_BSM))

    w = config.adm_width
    in_ch = config.adm_in_channels
    for i, _d in enumerate(config.adm_dilations, 1):
        layers.append((f"adm.atrous{i}", w, in_ch, 3, TAG_ADM))
        layers.append((f"adm.mix{i}", w, w, 1, TAG_ADM))
        in_ch = w
    layers.append(("adm.head", 1, in_ch, 3, TAG_ADM))
    return layers


def param_shapes(config: ModelConfig):
    """name -> (shape tuple, tag) for weights and biases."""
    shapes = {}
    for name, out_ch, in_ch, k, tag in _layer_specs(config):
        shapes[name + ".weight"] = ((out_ch, in_ch, k, k), tag)
        shapes[name + ".bias"] = ((out_ch,), tag)
    return shapes


def init_params(config: ModelConfig = ModelConfig(), seed: int = 0) -> ParamSet:
    """Fan-in scaled uniform weights, zero biases, fixed seed."""
    rng = np.random.default_rng(seed)
    tensors, tags = {}, {}
    for name, (shape, tag) in param_shapes(config).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        tensors[name] = torch.from_numpy(arr)
        tags[name] = tag
    return ParamSet(tensors, tags)


def zero_params(config: ModelConfig = ModelConfig()) -> ParamSet:
    tensors = {name: torch.zeros(shape, dtype=torch.float32)
               for name, (shape, _t) in param_shapes(config).items()}
    tags = {name: tag for name, (_s, tag) in param_shapes(config).items()}
    return ParamSet(tensors, tags)


@dataclass(eq=False)
class ForwardTape:
    """Reverse-mode record of one forward pass.

    `output` keeps the autograd graph alive; `leaves` are the differentiable
    parameter copies the graph hangs from. A tape is single-use unless the
    backward call retains the graph.
    """

    output: torch.Tensor                  # (B, 1, H, W), graph attached
    leaves: dict
    batched: bool
    consumed: bool = field(default=False)

    @property
    def spatial_shape(self):
        b, _c, h, w = self.output.shape
        return (b, h, w) if self.batched else (h, w)


def backward(tape: ForwardTape, loss_gradient, retain_graph: bool = False):
    """Parameter gradients for an upstream d(loss)/d(output).

    Returns name -> ndarray matching each leaf's shape; leaves the upstream
    gradient did not reach come back as zeros.
    """
    if tape.consumed and not retain_graph:
        raise ValueError("tape already consumed; forward again or retain the graph")
    grad = np.asarray(loss_gradient)
    if grad.shape != tape.spatial_shape:
        raise ValueError(f"loss gradient shape {grad.shape} does not match "
                         f"the tape's output shape {tape.spatial_shape}")
    grad_t = torch.from_numpy(np.ascontiguousarray(grad)).to(tape.output.dtype)
    grad_t = grad_t.reshape(tape.output.shape)
    names = list(tape.leaves)
    grads = torch.autograd.grad(
        tape.output, [tape.leaves[n] for n in names], grad_outputs=grad_t,
        retain_graph=retain_graph, allow_unused=True)
    tape.consumed = not retain_graph
    out = {}
    for name, g in zip(names, grads):
        leaf = tape.leaves[name]
        out[name] = (np.zeros(tuple(leaf.shape), dtype=np.float32) if g is None
                     else g.detach().numpy())
    return out


def _conv(x, leaves, name, stride=1, dilation=1, activate=True):
    w = leaves[name + ".weight"]
    b = leaves[name + ".bias"]
    pad = dilation * (w.shape[-1] // 2)
    y = F.conv2d(x, w, b, stride=stride, padding=pad, dilation=dilation)
    # softplus keeps the loss surface smooth, which the finite-difference
    # gradient checks require at their fixed step size
    return F.softplus(y) if activate else y


def _make_leaves(params: ParamSet, scope):
    return {n: params.get(n).detach().clone().requires_grad_(True)
            for n in params.scope_names(scope)}


def _image_planes(image):
    arr = np.asarray(_as_array(image))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {arr.shape}")
    return arr


def _stack_input(image, guidance, coarse_plane=None):
    """Channel stack: RGB + positive disks + negative disks [+ coarse]."""
    arr = _image_planes(image)
    h, w = arr.shape[:2]
    pos = np.asarray(guidance.positive, dtype=arr.dtype)
    neg = np.asarray(guidance.negative, dtype=arr.dtype)
    if pos.shape != (h, w) or neg.shape != (h, w):
        raise ValueError("guidance maps must match the image dimensions")
    planes = [arr[:, :, 0], arr[:, :, 1], arr[:, :, 2], pos, neg]
    if coarse_plane is not None:
        if coarse_plane.shape != (h, w):
            raise ValueError("coarse map must match the image dimensions")
        planes.append(coarse_plane)
    return np.stack(planes, axis=0)[None]  # (1, C, H, W)


def _bsm_apply(x, leaves, config: ModelConfig):
    depth = config.bsm_depth
    mult = 1 << depth
    _b, _c, h, w = x.shape
    ph = (mult - h % mult) % mult
    pw = (mult - w % mult) % mult
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    x = _conv(x, leaves, "bsm.stem")
    skips = [x]
    for k in range(1, depth + 1):
        x = _conv(x, leaves, f"bsm.down{k}", stride=2)
        if k < depth:
            skips.append(x)
    for k in range(depth, 0, -1):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = torch.cat([x, skips[k - 1]], dim=1)
        x = _conv(x, leaves, f"bsm.dec{k}")
    logits = _conv(x, leaves, "bsm.head", activate=False)
    if ph or pw:
        logits = logits[:, :, :h, :w]
    return torch.sigmoid(logits)


def _adm_apply(x, leaves, config: ModelConfig):
    h = x
    for i, d in enumerate(config.adm_dilations, 1):
        h = _conv(h, leaves, f"adm.atrous{i}", dilation=d)
        h = _conv(h, leaves, f"adm.mix{i}", activate=False)
    logits = _conv(h, leaves, "adm.head", activate=False)
    return torch.sigmoid(logits)


def _to_probmap(out_t) -> ProbMap:
    return ProbMap(out_t.detach().squeeze(0).squeeze(0).numpy())


def bsm_forward(image, guidance, params: ParamSet,
                config: ModelConfig = ModelConfig()):
    """Coarse mask from RGB + click disks. Returns (ProbMap, ForwardTape)."""
    leaves = _make_leaves(params, TAG_BSM)
    dtype = next(iter(leaves.values())).dtype
    x = torch.from_numpy(_stack_input(image, guidance)).to(dtype)
    if x.shape[1] != config.bsm_in_channels:
        raise ValueError(f"backbone expects {config.bsm_in_channels} channels")
    out = _bsm_apply(x, leaves, config)
    return _to_probmap(out), ForwardTape(out, leaves, batched=False)


def adm_forward(image, guidance, coarse, params: ParamSet,
                config: ModelConfig = ModelConfig()):
    """Refined mask from the 6-channel stack (inputs + coarse mask).

    `coarse` may be a ProbMap/array (treated as a constant input) or the
    ForwardTape from bsm_forward, in which case gradients flow through the
    backbone as well and the returned tape covers both partitions.
    """
    leaves = _make_leaves(params, TAG_ADM)
    dtype = next(iter(leaves.values())).dtype
    if isinstance(coarse, ForwardTape):
        x5 = torch.from_numpy(_stack_input(image, guidance)).to(dtype)
        coarse_t = coarse.output.to(dtype)
        if coarse_t.shape[2:] != x5.shape[2:]:
            raise ValueError("coarse map must match the image dimensions")
        x = torch.cat([x5, coarse_t], dim=1)
        leaves = {**coarse.leaves, **leaves}
    else:
        plane = np.asarray(_as_array(coarse))
        x = torch.from_numpy(_stack_input(image, guidance, plane)).to(dtype)
    if x.shape[1] != config.adm_in_channels:
        raise ValueError(f"refiner expects {config.adm_in_channels} channels")
    out = _adm_apply(x, leaves, config)
    return _to_probmap(out), ForwardTape(out, leaves, batched=False)


def bsm_forward_batch(images, guidances, params: ParamSet,
                      config: ModelConfig = ModelConfig()):
    """Batched backbone-only pass. Returns (coarse (B,H,W), ForwardTape)."""
    stacks = [_stack_input(img, g) for img, g in zip(images, guidances)]
    x5 = torch.from_numpy(np.concatenate(stacks, axis=0)).to(torch.float32)
    leaves = _make_leaves(params, TAG_BSM)
    coarse_t = _bsm_apply(x5, leaves, config)
    return (coarse_t.detach().squeeze(1).numpy(),
            ForwardTape(coarse_t, leaves, batched=True))


def forward_batch(images, guidances, params: ParamSet,
                  config: ModelConfig = ModelConfig(),
                  chain: bool = True, bsm_grad: bool = False):
    """Batched composed pass for the trainer.

    Returns (coarse (B,H,W), refined (B,H,W), adm tape, bsm tape). With
    chain=False the coarse maps enter the refiner as constants; bsm_grad
    controls whether the backbone pass is recorded at all.
    """
    stacks = [_stack_input(img, g) for img, g in zip(images, guidances)]
    x5 = torch.from_numpy(np.concatenate(stacks, axis=0)).to(torch.float32)
    bsm_leaves = _make_leaves(params, TAG_BSM)
    if bsm_grad or chain:
        coarse_t = _bsm_apply(x5, bsm_leaves, config)
    else:
        with torch.no_grad():
            frozen = {n: t.detach() for n, t in bsm_leaves.items()}
            coarse_t = _bsm_apply(x5, frozen, config)
    bsm_tape = ForwardTape(coarse_t, bsm_leaves, batched=True) \
        if (bsm_grad or chain) else None
    adm_leaves = _make_leaves(params, TAG_ADM)
    x6 = torch.cat([x5, coarse_t if chain else coarse_t.detach()], dim=1)
    refined_t = _adm_apply(x6, adm_leaves, config)
    leaves = {**bsm_leaves, **adm_leaves} if chain else adm_leaves
    adm_tape = ForwardTape(refined_t, leaves, batched=True)
    coarse = coarse_t.detach().squeeze(1).numpy()
    refined = refined_t.detach().squeeze(1).numpy()
    return coarse, refined, adm_tape, bsm_tape


# ---------------------------------------------------------------------------
# Checkpoint format: magic "CFCK", version u16, tensor count u32, per tensor
# (name_len u16, name, tag u8, rank u8, dims u32*, float32 LE data), then
# CRC32 of everything after the magic.
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ParamSet, path):
    chunks = [struct.pack("<HI", _FORMAT_VERSION, len(params.tensors))]
    for name, tensor in params.tensors.items():
        if tensor.dtype != torch.float32:
            raise TypeError(f"checkpoints store float32 tensors; {name!r} is "
                            f"{tensor.dtype}")
        data = tensor.detach().numpy().astype("<f4", copy=False)
        nb = name.encode("utf-8")
        tag = 0 if params.tag(name) == TAG_BSM else 1
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", tag, data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    payload = b"".join(chunks)
    blob = _MAGIC + payload + struct.pack("<I", zlib.crc32(payload))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path, config: ModelConfig | None = None) -> ParamSet:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_MAGIC) + 10 or blob[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a CFCK checkpoint (bad magic)")
    payload, crc_bytes = blob[4:-4], blob[-4:]
    if zlib.crc32(payload) != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointError(f"{path}: CRC mismatch (corrupt or truncated)")
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = payload[off:off + n]
        off += n
        return out

    version, count = struct.unpack("<HI", take(6))
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    tensors, tags = {}, {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        tag_byte, rank = struct.unpack("<BB", take(2))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_vals = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n_vals), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
        tags[name] = TAG_BSM if tag_byte == 0 else TAG_ADM
    if off != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    params = ParamSet(tensors, tags)
    if config is not None:
        check_compatible(params, config)
    return params


def check_compatible(params: ParamSet, config: ModelConfig):
    """Raise if the parameters do not fit the given architecture."""
    expected = param_shapes(config)
    for name, (shape, _tag) in expected.items():
        if name not in params.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        got = tuple(params.get(name).shape)
        if got != shape:
            raise CheckpointError(f"tensor {name!r} has shape {got}, expected "
                                  f"{shape} for this model config")
    extra = set(params.tensors) - set(expected)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected tensor {sorted(extra)[0]!r}")


def clamp_probs(arr):
    return np.clip(arr, PROB_EPS, 1.0 - PROB_EPS)
