"""VGG-style convolutional autoencoder with named encoder taps.

Encoder: five stages of 3x3 conv + ReLU (2, 2, 3, 3, 3 convs), each closed
by a 2x2 max pool.  An optional linear head flattens the bottleneck, maps it
to a latent vector and back.  The decoder mirrors the encoder with
nearest-neighbour upsampling in place of pooling; its last conv is linear.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _container
from . import ndnum as nn
from .errors import ContractError, LoadError, NumericError
from .ndnum import Param
from .pipeline import ImageRecord, NormStats, apply_norm, random_crop

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MDFSCAE1"
CKPT_FORMAT_VERSION = 1

FULL_WIDTHS = (64, 128, 256, 512, 512)
DESK_WIDTHS = (8, 16, 32, 64, 64)


class TapName(str, enum.Enum):
    """Post-ReLU output of the last conv in a stage (VGG-16 conv2_2, conv3_3, conv4_3)."""

    stage2_last = "stage2_last"
    stage3_last = "stage3_last"
    stage4_last = "stage4_last"

    @property
    def stage(self) -> int:
        return {"stage2_last": 1, "stage3_last": 2, "stage4_last": 3}[self.value]

    @property
    def pools_before(self) -> int:
        return self.stage


@dataclass
class ArchSpec:
    stage_widths: tuple = DESK_WIDTHS
    convs_per_stage: tuple = (2, 2, 3, 3, 3)
    latent_dim: int = 256
    input_channels: int = 3
    with_linear_head: bool = True
    input_size: int = 64  # spatial side the linear head is built for

    def __post_init__(self):
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.convs_per_stage = tuple(int(v) for v in self.convs_per_stage)
        if len(self.stage_widths) != 5 or len(self.convs_per_stage) != 5:
            raise ContractError("stage_widths and convs_per_stage need 5 entries each")
        if min(self.stage_widths) < 1 or min(self.convs_per_stage) < 1:
            raise ContractError("stage widths and conv counts must be positive")
        if self.latent_dim < 1:
            raise ContractError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.input_channels not in (1, 3):
            raise ContractError(f"input_channels must be 1 or 3, got {self.input_channels}")

    @property
    def bottleneck_side(self) -> int:
        return self.input_size // 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["convs_per_stage"] = list(self.convs_per_stage)
        return d


@dataclass
class TrainReport:
    epoch_losses: list
    holdout_losses: list
    steps: int
    seed: int | None
    final_loss: float | None


@dataclass(eq=False)
class AutoencoderModel:
    arch: ArchSpec
    params: dict  # name -> Param, in creation order
    norm_stats: NormStats | None = None
    train_meta: dict = field(default_factory=dict)

    # -- layer bookkeeping -------------------------------------------------

    def enc(self, stage, j):
        return self.params[f"enc.s{stage}.c{j}.w"], self.params[f"enc.s{stage}.c{j}.b"]

    def dec(self, stage, j):
        return self.params[f"dec.s{stage}.c{j}.w"], self.params[f"dec.s{stage}.c{j}.b"]

    def head(self, k):
        return self.params[f"head.fc{k}.w"], self.params[f"head.fc{k}.b"]

    def parameters(self):
        return list(self.params.values())

    def n_params(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # -- persistence helpers ----------------------------------------------

    def to_bytes(self) -> bytes:
        manifest = {
            "format_version": CKPT_FORMAT_VERSION,
            "arch": self.arch.to_dict(),
            "norm_stats": self.norm_stats.to_dict() if self.norm_stats else None,
            "train_meta": self.train_meta,
        }
        return _container.pack(CKPT_MAGIC, manifest,
                               [(k, p.value) for k, p in self.params.items()])

    @property
    def digest(self) -> str:
        return _container.digest_hex(self.to_bytes())


def _decoder_layout(arch: ArchSpec):
    """(stage, j, in_c, out_c, relu) for every decoder conv, in execution order."""
    w = arch.stage_widths
    out = []
    for s in range(4, -1, -1):
        n = arch.convs_per_stage[s]
        nxt = w[s - 1] if s > 0 else arch.input_channels
        for j in range(n):
            last = j == n - 1
            out.append((s, j, w[s], nxt if last else w[s], not (s == 0 and last)))
    return out


def build(arch: ArchSpec, rng=None) -> AutoencoderModel:
    """Fresh model with fan-in scaled uniform initialization.

    Weights are drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)), in a fixed parameter order.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if arch.with_linear_head and (arch.input_size < 32 or arch.input_size % 32):
        raise ContractError(
            f"linear head needs an input side divisible by 32 (5 pools), got {arch.input_size}")
    params = {}

    def add(name, shape, fan_in):
        wb = math.sqrt(6.0 / fan_in)
        bb = 1.0 / math.sqrt(fan_in)
        params[name + ".w"] = Param(rng.uniform(-wb, wb, size=shape).astype(nn.DTYPE))
        params[name + ".b"] = Param(rng.uniform(-bb, bb, size=shape[0]).astype(nn.DTYPE))

    c_in = arch.input_channels
    for s, (width, n) in enumerate(zip(arch.stage_widths, arch.convs_per_stage)):
        for j in range(n):
            add(f"enc.s{s}.c{j}", (width, c_in, 3, 3), c_in * 9)
            c_in = width
    if arch.with_linear_head:
        flat = arch.stage_widths[4] * arch.bottleneck_side ** 2
        add("head.fc1", (arch.latent_dim, flat), flat)
        add("head.fc2", (flat, arch.latent_dim), arch.latent_dim)
    for s, j, ci, co, _ in _decoder_layout(arch):
        add(f"dec.s{s}.c{j}", (co, ci, 3, 3), ci * 9)
    return AutoencoderModel(arch, params)


# --------------------------------------------------------------------------
# forward / backward


def _check_input(model, x):
    if x.ndim != 4 or x.shape[1] != model.arch.input_channels:
        raise ContractError(
            f"expected (n, {model.arch.input_channels}, h, w) input, got {x.shape}")


def _encode(model, x, tape, stop_stage=None):
    """Run encoder stages; with ``stop_stage`` return that stage's last activation before pooling."""
    h = x
    for s, n in enumerate(model.arch.convs_per_stage):
        for j in range(n):
            w, b = model.enc(s, j)
            if tape is not None:
                z, cols = nn.conv2d(h, w, b, return_cols=True)
                tape.append(("conv", h, w, b, cols))
                tape.append(("relu", z))
            else:
                z = nn.conv2d(h, w, b)
            h = nn.relu(z)
        if s == stop_stage:
            return h
        if tape is not None:
            h, idx = nn.maxpool2(h)
            tape.append(("pool", idx))
        else:
            h = nn.maxpool2_values(h)
    return h


def _forward(model, x, tape=None):
    _check_input(model, x)
    side = 2 ** 5
    if x.shape[2] % side or x.shape[3] % side:
        raise ContractError(f"forward pass needs spatial dims divisible by 32, got {x.shape[2:]}")
    h = _encode(model, x, tape)
    arch = model.arch
    if arch.with_linear_head:
        if x.shape[2:] != (arch.input_size, arch.input_size):
            raise ContractError(
                f"model with linear head expects {arch.input_size}x{arch.input_size} input")
        shape = h.shape
        flat = h.reshape(shape[0], -1)
        w1, b1 = model.head(1)
        w2, b2 = model.head(2)
        lat = nn.linear(flat, w1, b1)
        z = nn.linear(lat, w2, b2)
        if tape is not None:
            tape += [("reshape", shape), ("linear", flat, w1, b1), ("linear", lat, w2, b2),
                     ("relu", z)]
        h = nn.relu(z).reshape(shape)
        if tape is not None:
            tape.append(("flatten", None))
    for s, j, _, _, act in _decoder_layout(arch):
        if j == 0:
            if tape is not None:
                tape.append(("up", None))
            h = nn.upsample2(h)
        w, b = model.dec(s, j)
        if tape is not None:
            z, cols = nn.conv2d(h, w, b, return_cols=True)
            tape.append(("conv", h, w, b, cols))
        else:
            z = nn.conv2d(h, w, b)
        if act:
            if tape is not None:
                tape.append(("relu", z))
            h = nn.relu(z)
        else:
            h = z
    return h


def _backward(tape, grad):
    g = grad
    for rec in reversed(tape):
        op = rec[0]
        if op == "conv":
            g = nn.conv2d_backward(g, rec[1], rec[2], rec[3], rec[4])
        elif op == "relu":
            g = nn.relu_backward(g, rec[1])
        elif op == "pool":
            g = nn.maxpool2_backward(g, rec[1])
        elif op == "up":
            g = nn.upsample2_backward(g)
        elif op == "linear":
            g = nn.linear_backward(g, rec[1], rec[2], rec[3])
        elif op == "flatten":
            g = g.reshape(g.shape[0], -1)
        elif op == "reshape":
            g = g.reshape(rec[1])
    return g


def forward(model: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    """Reconstruction of a batch (no gradient bookkeeping)."""
    return _forward(model, x)


def loss_and_grad(model: AutoencoderModel, x: np.ndarray, target=None):
    """L2 reconstruction loss; parameter gradients are accumulated.  Returns (loss, d loss / d x)."""
    target = x if target is None else target
    tape = []
    y = _forward(model, x, tape)
    loss = nn.l2_loss(y, target)
    gx = _backward(tape, nn.l2_loss_backward(y, target))
    if target is x:
        # the input also appears as the target
        gx = gx - nn.l2_loss_backward(y, target)
    return loss, gx


def encode_tap(model: AutoencoderModel, x: np.ndarray, tap) -> np.ndarray:
    """Post-ReLU activation at ``tap``; the decoder is never evaluated."""
    tap = TapName(tap)
    _check_input(model, x)
    k = 2 ** tap.pools_before
    h, w = x.shape[2:]
    if h < k or w < k or h % k or w % k:
        raise ContractError(f"{tap.value} needs spatial dims divisible by {k}, got {h}x{w}")
    return _encode(model, x, None, stop_stage=tap.stage)


# --------------------------------------------------------------------------
# training


def train(model: AutoencoderModel, images, epochs: int, batch_size: int = 32, lr: float = 1e-4,
          patch: int = 64, rng=None, holdout: np.ndarray | None = None,
          crops_per_image: int = 1) -> TrainReport:
    """Adam on L2 reconstruction of random crops.

    One epoch visits every image ``crops_per_image`` times in shuffled order,
    one random ``patch`` x ``patch`` crop per visit.  ``images`` must already
    be normalized.  ``holdout`` (a crop batch) is evaluated after every
    epoch without touching the parameters.
    """
    images = list(images)
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if not images:
        raise ContractError("no training images")
    bad = [im.id for im in images if im.label != "normal"]
    if bad:
        raise ContractError(f"training images must be normal; got {bad[:5]}")
    if model.arch.with_linear_head and patch != model.arch.input_size:
        raise ContractError(f"crop size {patch} differs from the head's input size "
                            f"{model.arch.input_size}")
    params = model.parameters()
    for p in params:
        p.zero_grad()
    epoch_losses, holdout_losses, steps = [], [], 0
    for epoch in range(epochs):
        order = np.concatenate([rng.permutation(len(images)) for _ in range(crops_per_image)])
        total, count = 0.0, 0
        for lo in range(0, len(order), batch_size):
            batch = np.concatenate([random_crop(images[i], patch, rng) for i in order[lo:lo + batch_size]])
            loss, _ = loss_and_grad(model, batch)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch + 1}, step {steps + 1}; "
                    f"lower the learning rate (lr={lr}) or check initialization")
            nn.adam_step(params, lr)
            steps += 1
            total += loss * len(batch)
            count += len(batch)
        epoch_losses.append(total / count)
        if holdout is not None:
            holdout_losses.append(reconstruction_loss(model, holdout))
        log.info("epoch %d/%d loss %.6g", epoch + 1, epochs, epoch_losses[-1])
    final = epoch_losses[-1] if epoch_losses else None
    model.train_meta = {"seed": seed, "epochs": int(model.train_meta.get("epochs", 0)) + epochs,
                        "final_loss": final}
    return TrainReport(epoch_losses, holdout_losses, steps, seed, final)


def reconstruction_loss(model: AutoencoderModel, batch: np.ndarray, chunk: int = 64) -> float:
    total = 0.0
    for lo in range(0, batch.shape[0], chunk):
        part = batch[lo:lo + chunk]
        total += nn.l2_loss(forward(model, part), part) * part.shape[0]
    return total / batch.shape[0]


def holdout_crops(images, patch: int, per_image: int, rng) -> np.ndarray:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    return np.concatenate([random_crop(im, patch, rng) for im in images for _ in range(per_image)])


# --------------------------------------------------------------------------
# persistence


def save(model: AutoencoderModel, path) -> str:
    data = model.to_bytes()
    Path(path).write_bytes(data)
    return _container.digest_hex(data)


def load(path) -> AutoencoderModel:
    data = Path(path).read_bytes()
    manifest, tensors = _container.unpack(CKPT_MAGIC, data, source=str(path))
    if manifest.get("format_version") != CKPT_FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    try:
        arch = ArchSpec(**manifest["arch"])
    except (KeyError, TypeError, ContractError) as exc:
        raise LoadError(f"{path}: invalid architecture in manifest: {exc}") from None
    names = [e["name"] for e in manifest["tensors"]]
    template = build(arch, np.random.default_rng(0))
    if names != list(template.params):
        raise LoadError(f"{path}: tensor list does not match the architecture")
    params = {}
    for name in names:
        if tensors[name].shape != template.params[name].shape:
            raise LoadError(f"{path}: tensor {name} has shape {tensors[name].shape}, "
                            f"expected {template.params[name].shape}")
        params[name] = Param(tensors[name])
    ns = manifest.get("norm_stats")
    return AutoencoderModel(arch, params, NormStats.from_dict(ns) if ns else None,
                            manifest.get("train_meta", {}))


def prepare(model: AutoencoderModel, img: ImageRecord) -> ImageRecord:
    """Normalize ``img`` with the statistics stored in ``model``."""
    if model.norm_stats is None:
        return img
    return apply_norm(img, model.norm_stats)
