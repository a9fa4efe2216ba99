"""Functional 3-D convolutional encoder-classifier with EM insertion points.

Parameters live in a flat ``{name: tensor}`` dict so that gradients,
optimizer state and checkpoints can all be handled uniformly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .em import EMConfig, MixedStats, MixPlan, mix_stats, sample_mix_plan, em_transform
from .moments import ChannelStats, compute_channel_stats

ParameterSet = dict  # name -> torch.Tensor

BUFFER_SUFFIXES = (".running_mean", ".running_var")
CKPT_MAGIC = "EMCKPT v1"


class TrainingStepError(RuntimeError):
    """A non-finite value appeared; ``tensor_name`` says where."""

    def __init__(self, tensor_name: str, message: str = ""):
        self.tensor_name = tensor_name
        super().__init__(message or f"non-finite values in {tensor_name}")


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    in_channels: int = 1
    block_channels: tuple[int, ...] = (8, 16, 32, 64)
    hidden: int = 32
    num_classes: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    # "clean": running statistics skip batches whose input was perturbed by EM
    bn_update: str = "clean"

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        if self.bn_update not in ("clean", "all"):
            raise ValueError(f"net.bn_update must be 'clean' or 'all', got {self.bn_update!r}")
        if not self.block_channels or any(c < 1 for c in self.block_channels):
            raise ValueError(f"net.channels must be positive, got {self.block_channels}")
        if self.num_classes < 2:
            raise ValueError("net.classes must be >= 2")

    @property
    def n_blocks(self) -> int:
        return len(self.block_channels)

    @property
    def embedding_dim(self) -> int:
        return self.block_channels[-1]


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    embedding: torch.Tensor
    block_outputs: list = field(default_factory=list)


class EMTrace:
    """Records the EM plan and statistics per insertion layer, or replays them.

    Replaying turns EM into a fixed affine-plus-polynomial map of its input,
    which is exactly the function whose derivative the detached backward
    computes.
    """

    def __init__(self):
        self.records: dict[int, tuple[MixPlan, ChannelStats, MixedStats]] = {}
        self.replay = False

    def freeze(self) -> "EMTrace":
        self.replay = True
        return self


def parameter_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.block_channels, start=1):
        for j, ci in ((1, cin), (2, cout)):
            shapes[f"block{i}.conv{j}.weight"] = (cout, ci, 3, 3, 3)
            shapes[f"block{i}.conv{j}.bias"] = (cout,)
            for suffix in ("weight", "bias", "running_mean", "running_var"):
                shapes[f"block{i}.bn{j}.{suffix}"] = (cout,)
        cin = cout
    shapes["fc1.weight"] = (cfg.hidden, cfg.embedding_dim)
    shapes["fc1.bias"] = (cfg.hidden,)
    shapes["fc2.weight"] = (cfg.num_classes, cfg.hidden)
    shapes["fc2.bias"] = (cfg.num_classes,)
    return shapes


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def trainable_names(params: ParameterSet) -> list[str]:
    return [n for n in params if not is_buffer(n)]


def init_params(cfg: EncoderConfig, seed: int, dtype=torch.float32) -> ParameterSet:
    """He-normal weights, zero biases, identity batch-norm."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".weight") and len(shape) > 1:
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        elif ".bn" in name and (name.endswith(".weight") or name.endswith(".running_var")):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = torch.as_tensor(arr, dtype=dtype)
    return params


def clone_params(params: ParameterSet) -> ParameterSet:
    return {k: v.detach().clone() for k, v in params.items()}


def cast_params(params: ParameterSet, dtype) -> ParameterSet:
    return {k: v.detach().to(dtype).clone() for k, v in params.items()}


def _check_params(params: ParameterSet, cfg: EncoderConfig):
    for name, shape in parameter_shapes(cfg).items():
        if name not in params:
            raise ValueError(f"missing parameter {name}")
        if tuple(params[name].shape) != shape:
            raise ValueError(f"layer {name}: expected shape {shape}, got {tuple(params[name].shape)}")


def _batch_norm(x, params, prefix, cfg, use_batch_stats, update_running):
    rm = params[f"{prefix}.running_mean"]
    rv = params[f"{prefix}.running_var"]
    if use_batch_stats and update_running:
        # F.batch_norm updates the running buffers in place
        return F.batch_norm(x, rm, rv, params[f"{prefix}.weight"], params[f"{prefix}.bias"],
                            training=True, momentum=cfg.bn_momentum, eps=cfg.bn_eps)
    if use_batch_stats:
        return F.batch_norm(x, None, None, params[f"{prefix}.weight"], params[f"{prefix}.bias"],
                            training=True, eps=cfg.bn_eps)
    return F.batch_norm(x, rm.to(x.dtype), rv.to(x.dtype), params[f"{prefix}.weight"],
                        params[f"{prefix}.bias"], training=False, eps=cfg.bn_eps)


def _em_at_layer(h, layer, em_cfg, rng, trace):
    """Returns (output, whether a perturbation was applied)."""
    if trace is not None and trace.replay:
        if layer not in trace.records:
            return h, False
        plan, own, mixed = trace.records[layer]
        return em_transform(h, em_cfg, plan, own=own, mixed=mixed), True
    plan = sample_mix_plan(h.shape[0], em_cfg, rng)
    if not plan.active:
        return h, False
    own = compute_channel_stats(h, em_cfg.eps)
    mixed = mix_stats(own, plan)
    if trace is not None:
        trace.records[layer] = (plan, own, mixed)
    return em_transform(h, em_cfg, plan, own=own, mixed=mixed), True


def encoder_forward(batch: torch.Tensor, params: ParameterSet, cfg: EncoderConfig,
                    em_cfg: Optional[EMConfig] = None, mode: str = "eval",
                    rng: Optional[np.random.Generator] = None, norm: str = "batch",
                    trace: Optional[EMTrace] = None) -> ForwardOutput:
    """Run the encoder and classification head.

    ``mode='train'`` applies EM after every block listed in
    ``em_cfg.insertion_layers`` and, with ``norm='batch'``, normalizes with
    batch statistics while updating the running buffers in place.
    ``norm='frozen'`` normalizes with the running buffers and leaves them
    untouched, which makes the loss additive over samples. Eval mode never
    mutates anything.

    With ``cfg.bn_update='clean'`` the layers downstream of an applied EM
    perturbation still normalize with batch statistics but do not fold them
    into the running buffers, so eval-time statistics describe clean features.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if norm not in ("batch", "frozen"):
        raise ValueError(f"norm must be 'batch' or 'frozen', got {norm!r}")
    if batch.dim() != 5:
        raise ValueError(f"input: expected (B, C, D, H, W), got shape {tuple(batch.shape)}")
    if batch.shape[1] != cfg.in_channels:
        raise ValueError(f"layer block1.conv1: expected {cfg.in_channels} input channels, "
                         f"got {batch.shape[1]}")
    factor = 2 ** cfg.n_blocks
    if any(s % factor for s in batch.shape[2:]):
        raise ValueError(f"input: spatial dims {tuple(batch.shape[2:])} not divisible by {factor}")
    _check_params(params, cfg)

    train = mode == "train"
    use_em = train and em_cfg is not None and em_cfg.enabled
    if use_em:
        too_deep = [i for i in em_cfg.insertion_layers if i > cfg.n_blocks]
        if too_deep:
            raise ValueError(f"EM layer(s) {too_deep} exceed the {cfg.n_blocks} encoder block(s)")
        if rng is None and not (trace is not None and trace.replay):
            raise ValueError("train mode with EM needs an rng")
    use_batch_stats = train and norm == "batch"

    h = batch.to(params["fc1.weight"].dtype)
    blocks = []
    perturbed = False
    for i in range(1, cfg.n_blocks + 1):
        update = use_batch_stats and not (perturbed and cfg.bn_update == "clean")
        for j, stride in ((1, 1), (2, 2)):
            h = F.conv3d(h, params[f"block{i}.conv{j}.weight"], params[f"block{i}.conv{j}.bias"],
                         stride=stride, padding=1)
            h = _batch_norm(h, params, f"block{i}.bn{j}", cfg, use_batch_stats, update)
            h = F.relu(h)
        if use_em and i in em_cfg.insertion_layers:
            h, applied = _em_at_layer(h, i, em_cfg, rng, trace)
            perturbed = perturbed or applied
        blocks.append(h)

    emb = h.mean(dim=(2, 3, 4))
    z = F.relu(F.linear(emb, params["fc1.weight"], params["fc1.bias"]))
    logits = F.linear(z, params["fc2.weight"], params["fc2.bias"])
    return ForwardOutput(logits=logits, embedding=emb, block_outputs=blocks)


def weighted_cross_entropy(logits: torch.Tensor, labels, weights=None) -> torch.Tensor:
    """Batch mean of ``w[y] * (logsumexp(logits) - logits[y])``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    K = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match logits {tuple(logits.shape)}")
    if bool(((labels < 0) | (labels >= K)).any()):
        raise ValueError(f"labels must lie in 0..{K - 1}, got {labels.tolist()}")
    nll = torch.logsumexp(logits, dim=1) - logits.gather(1, labels.unsqueeze(1)).squeeze(1)
    if weights is None:
        return nll.mean()
    w = torch.as_tensor(weights, dtype=logits.dtype)
    if w.shape != (K,) or bool((w <= 0).any()):
        raise ValueError(f"class weights must be {K} positive values, got {w.tolist()}")
    return (w[labels] * nll).mean()


def loss_and_grads(batch, labels, params: ParameterSet, cfg: EncoderConfig,
                   em_cfg: Optional[EMConfig] = None, mode: str = "train",
                   rng: Optional[np.random.Generator] = None, class_weights=None,
                   norm: str = "batch", trace: Optional[EMTrace] = None,
                   scale: float = 1.0) -> tuple[float, dict]:
    """Loss (times ``scale``) and its exact gradient for every trainable tensor.

    Running buffers are shared with ``params`` and get updated when
    ``mode='train'`` and ``norm='batch'``.
    """
    leaves = {}
    for name, t in params.items():
        if is_buffer(name):
            leaves[name] = t
        else:
            leaves[name] = t.detach().clone().requires_grad_(True)
    out = encoder_forward(torch.as_tensor(batch), leaves, cfg, em_cfg, mode, rng, norm, trace)
    if not bool(torch.isfinite(out.logits).all()):
        raise TrainingStepError("logits")
    loss = weighted_cross_entropy(out.logits, labels, class_weights) * scale
    if not bool(torch.isfinite(loss)):
        raise TrainingStepError("loss", f"non-finite loss {loss.item()}")
    names = trainable_names(params)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names])
    result = {}
    for n, g in zip(names, grads):
        if not bool(torch.isfinite(g).all()):
            raise TrainingStepError(n, f"non-finite gradient for {n}")
        result[n] = g.detach()
    return float(loss.detach()), result


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(params: ParameterSet, path) -> None:
    """Text manifest followed by one little-endian float32 blob."""
    lines = [CKPT_MAGIC, f"entries {len(params)}"]
    blobs = []
    offset = 0
    for name, t in params.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name}\t{shape}\tfloat32\t{offset}")
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    lines.append(f"blob {offset}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for b in blobs:
            fh.write(b)


_ENTRY = re.compile(r"^(\S+)\t(\d+(?:x\d+)*|scalar)\tfloat32\t(\d+)$")


def load_checkpoint(path, dtype=torch.float32) -> ParameterSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = []
    pos = 0
    for _ in range(3):
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated manifest")
        lines.append(raw[pos:end].decode("utf-8", errors="replace"))
        pos = end + 1
    if lines[0] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad header line {lines[0]!r}, expected {CKPT_MAGIC!r}")
    m = re.match(r"^entries (\d+)$", lines[1])
    if not m:
        raise CheckpointError(f"{path}: bad entry count line {lines[1]!r}")
    n = int(m.group(1))
    entries = []
    line = lines[2]
    for k in range(n):
        em = _ENTRY.match(line)
        if not em:
            raise CheckpointError(f"{path}: malformed manifest entry {k}: {line!r}")
        shape = () if em.group(2) == "scalar" else tuple(int(s) for s in em.group(2).split("x"))
        entries.append((em.group(1), shape, int(em.group(3))))
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated manifest after entry {k}")
        line = raw[pos:end].decode("utf-8", errors="replace")
        pos = end + 1
    bm = re.match(r"^blob (\d+)$", line)
    if not bm:
        raise CheckpointError(f"{path}: missing blob size line, got {line!r}")
    blob = raw[pos:]
    if len(blob) != int(bm.group(1)):
        raise CheckpointError(f"{path}: blob is {len(blob)} bytes, manifest says {bm.group(1)}")
    params = {}
    for name, shape, offset in entries:
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > len(blob):
            raise CheckpointError(f"{path}: entry {name} runs past the end of the blob")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[name] = torch.as_tensor(arr.astype(np.float32), dtype=dtype)
    return params


def check_checkpoint(params: ParameterSet, cfg: EncoderConfig) -> None:
    try:
        _check_params(params, cfg)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint does not match network config: {exc}") from None
