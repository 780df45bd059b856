"""Differentiable building blocks: encoder, symmetric/asymmetric pair layers,
union heads (g), containment heads (h), label embedder, and the supervised
query head.

Everything is a torch module over float32 parameters.  Evaluation-mode
forwards are deterministic given fixed parameters; training-mode batch
statistics (BatchNorm) are only ever used inside the training loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

G_VARIANTS = ("mean", "lin", "linfc", "dnn")
H_VARIANTS = ("lin", "linfc", "dnn")


@dataclass
class EncoderConfig:
    m: int = 32
    backbone: str = "small_cnn"  # or "resnet18_1ch"
    input_size: int = 64
    channels: tuple[int, ...] = (16, 32, 32, 64)
    normalize: bool = True

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("embedding dimension must be >= 2")
        if self.backbone not in ("small_cnn", "resnet18_1ch"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.input_size % (2 ** len(self.channels)) != 0:
            raise ValueError("input_size must be divisible by 2^n_blocks")


def l2_normalize(x: torch.Tensor) -> torch.Tensor:
    return F.normalize(x, p=2.0, dim=-1, eps=1e-12)


class L2Norm(nn.Module):
    def forward(self, x):
        return l2_normalize(x)


class SmallCNN(nn.Module):
    """Desk-scale encoder: n_blocks x [Conv3x3 -> BN -> ReLU -> MaxPool2] -> FC(m) -> L2Norm."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        blocks, cin = [], 1
        for cout in config.channels:
            blocks += [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(), nn.MaxPool2d(2)]
            cin = cout
        self.features = nn.Sequential(*blocks)
        spatial = config.input_size // (2 ** len(config.channels))
        self.fc = nn.Linear(cin * spatial * spatial, config.m)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != self.config.input_size or x.shape[3] != self.config.input_size:
            raise ValueError(f"expected (B,1,{self.config.input_size},{self.config.input_size}) input, got {tuple(x.shape)}")
        z = self.fc(torch.flatten(self.features(x), 1))
        return l2_normalize(z) if self.config.normalize else z


class ResNet18OneChannel(nn.Module):
    """ResNet-18 with a 1-channel stem and an m-dimensional output (full-scale option)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        from torchvision.models import resnet18

        self.config = config
        net = resnet18(weights=None, num_classes=config.m)
        net.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
        self.net = net

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B,1,H,W) input, got {tuple(x.shape)}")
        z = self.net(x)
        return l2_normalize(z) if self.config.normalize else z


def build_encoder(config: EncoderConfig) -> nn.Module:
    if config.backbone == "small_cnn":
        return SmallCNN(config)
    return ResNet18OneChannel(config)


class Symm(nn.Module):
    """Symmetric pair layer: W1(a + b) + W2(a * b).

    Swapping the arguments gives bit-identical output because both
    reductions commute elementwise.
    """

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.w1 = nn.Linear(dim_in, dim_out, bias=False)
        self.w2 = nn.Linear(dim_in, dim_out, bias=False)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError(f"pair inputs must match, got {tuple(a.shape)} vs {tuple(b.shape)}")
        return self.w1(a + b) + self.w2(a * b)


class Asymm(nn.Module):
    """Order-sensitive pair layer: W1 a + W2 b (first layer of the query heads)."""

    def __init__(self, dim_in: int, dim_out: int):
        super().__init__()
        self.w1 = nn.Linear(dim_in, dim_out, bias=False)
        self.w2 = nn.Linear(dim_in, dim_out, bias=False)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError(f"pair inputs must match, got {tuple(a.shape)} vs {tuple(b.shape)}")
        return self.w1(a) + self.w2(b)


def _fc_blocks(dim: int, n: int) -> list[nn.Module]:
    out: list[nn.Module] = []
    for _ in range(n):
        out += [nn.BatchNorm1d(dim), nn.ReLU(), nn.Linear(dim, dim)]
    return out


class GHead(nn.Module):
    """Union composition head. Maps two unit embeddings to the embedding of their union.

    Variants:
      mean   (a + b)/2 -> L2Norm                        (parameter-free)
      lin    Symm -> L2Norm
      linfc  Symm -> BN -> ReLU -> FC -> L2Norm
      dnn    Symm -> 3 x [BN -> ReLU -> FC] -> L2Norm
    """

    def __init__(self, variant: str, m: int = 32):
        super().__init__()
        if variant not in G_VARIANTS:
            raise ValueError(f"unknown g variant {variant!r}")
        self.variant = variant
        self.m = m
        if variant != "mean":
            self.symm = Symm(m, m)
            n_fc = {"lin": 0, "linfc": 1, "dnn": 3}[variant]
            self.tail = nn.Sequential(*_fc_blocks(m, n_fc))

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if self.variant == "mean":
            if a.shape != b.shape:
                raise ValueError(f"pair inputs must match, got {tuple(a.shape)} vs {tuple(b.shape)}")
            return l2_normalize((a + b) / 2.0)
        return l2_normalize(self.tail(self.symm(a, b)))


class HHead(nn.Module):
    """Containment query head: probability that the classes of ``b`` are all present in ``a``.

    Mirrors the union-head stacks but with the order-sensitive first layer
    and a 1-dim sigmoid output; not symmetric in general.
    """

    def __init__(self, variant: str, m: int = 32, hidden: int | None = None):
        super().__init__()
        if variant not in H_VARIANTS:
            raise ValueError(f"unknown h variant {variant!r}")
        self.variant = variant
        w = hidden if hidden is not None else m
        self.pair = Asymm(m, w)
        n_fc = {"lin": 0, "linfc": 1, "dnn": 3}[variant]
        self.tail = nn.Sequential(*_fc_blocks(w, n_fc))
        self.out = nn.Linear(w, 1)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        logits = self.out(self.tail(self.pair(a, b)))
        return torch.sigmoid(logits).squeeze(-1)


class LabelEmbedder(nn.Module):
    """Embedding matrix for one-hot label vectors; output is the selected row."""

    def __init__(self, n_classes: int, dim: int = 32):
        super().__init__()
        self.n_classes = n_classes
        self.weight = nn.Parameter(torch.empty(n_classes, dim))

    def forward(self, onehot: torch.Tensor) -> torch.Tensor:
        if onehot.shape[-1] != self.n_classes:
            raise ValueError(f"expected one-hot of length {self.n_classes}, got {onehot.shape[-1]}")
        flat = onehot.reshape(-1, self.n_classes)
        ones = (flat == 1.0).sum(dim=-1)
        if not torch.all((ones == 1) & ((flat == 0.0) | (flat == 1.0)).all(dim=-1)):
            raise ValueError("label vector is not one-hot")
        return (flat @ self.weight).reshape(*onehot.shape[:-1], -1)

    def embed_index(self, idx: torch.Tensor) -> torch.Tensor:
        return self.weight[idx]


@dataclass
class Model3Config:
    image_dim: int = 128
    label_dim: int = 32
    hidden: int = 136
    n_classes: int = 80

    @property
    def head_input_dim(self) -> int:
        return self.image_dim + self.label_dim


class Model3Head(nn.Module):
    """Supervised query head on [image feature ; label embedding].

    The printed stack lists the concatenated input width first; the
    parameterized layers are in->hidden, hidden->hidden, hidden->1 with a
    sigmoid output.  With hidden=136 at 80 classes this matches the
    independent-sigmoid baseline's parameter count almost exactly.
    """

    def __init__(self, config: Model3Config):
        super().__init__()
        self.config = config
        d, w = config.head_input_dim, config.hidden
        self.net = nn.Sequential(
            nn.Linear(d, w), nn.BatchNorm1d(w), nn.ReLU(),
            nn.Linear(w, w), nn.BatchNorm1d(w), nn.ReLU(),
            nn.Linear(w, 1),
        )

    def forward(self, image_emb: torch.Tensor, label_emb: torch.Tensor) -> torch.Tensor:
        if image_emb.shape[-1] != self.config.image_dim:
            raise ValueError(f"image embedding must have dim {self.config.image_dim}")
        if label_emb.shape[-1] != self.config.label_dim:
            raise ValueError(f"label embedding must have dim {self.config.label_dim}")
        x = torch.cat([image_emb, label_emb], dim=-1)
        return torch.sigmoid(self.net(x)).squeeze(-1)


class MultilabelMLP(nn.Module):
    """Independent-sigmoid head: feature -> 2 x [FC -> BN -> ReLU] -> FC(n_classes) -> sigmoid."""

    def __init__(self, feature_dim: int, n_classes: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.BatchNorm1d(hidden), nn.ReLU(),
            nn.Linear(hidden, n_classes),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(features))


class RandomEmbedder(nn.Module):
    """Null-model encoder: a deterministic random map from images to unit vectors.

    Each distinct image hashes to its own seed, so embeddings carry no
    information about image content beyond identity.  Used for chance-level
    checks of decoding protocols.
    """

    def __init__(self, config: EncoderConfig, salt: int = 0):
        super().__init__()
        self.config = config
        self.salt = salt

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        import hashlib

        out = np.empty((x.shape[0], self.config.m), dtype=np.float32)
        for i in range(x.shape[0]):
            digest = hashlib.blake2b(x[i].numpy().tobytes(), digest_size=8).digest()
            seed = int.from_bytes(digest, "little") ^ self.salt
            v = np.random.default_rng(seed).standard_normal(self.config.m)
            out[i] = v / np.linalg.norm(v)
        return torch.from_numpy(out)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def init_params(module: nn.Module, seed: int) -> None:
    """Seed-controlled init: uniform fan-in scaling for weights, zeros for biases,
    identity affine for norm layers.  Deterministic across runs."""
    gen = torch.Generator().manual_seed(seed)
    for sub in module.modules():
        if isinstance(sub, (nn.Linear, nn.Conv2d)):
            fan_in = sub.weight.shape[1] * (sub.weight[0, 0].numel() if sub.weight.dim() > 2 else 1)
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                sub.weight.uniform_(-bound, bound, generator=gen)
                if sub.bias is not None:
                    sub.bias.zero_()
        elif isinstance(sub, (nn.BatchNorm1d, nn.BatchNorm2d)):
            with torch.no_grad():
                sub.weight.fill_(1.0)
                sub.bias.zero_()
                sub.running_mean.zero_()
                sub.running_var.fill_(1.0)
                sub.num_batches_tracked.zero_()
        elif isinstance(sub, LabelEmbedder):
            with torch.no_grad():
                sub.weight.uniform_(-1.0, 1.0, generator=gen)


def to_batch_tensor(images, input_size: int) -> torch.Tensor:
    """Numpy image(s) -> float32 (B,1,H,W) tensor, resizing only if asked for elsewhere."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H,W) or (B,H,W) images, got shape {arr.shape}")
    if arr.shape[-2:] != (input_size, input_size):
        raise ValueError(f"images are {arr.shape[-2:]}, encoder expects {(input_size, input_size)}")
    return torch.from_numpy(arr).unsqueeze(1)


def encode(encoder: nn.Module, images) -> np.ndarray:
    """Evaluation-mode embeddings for one image (m,) or a batch (B, m).

    Pure and deterministic given fixed parameters: runs under no_grad in
    eval mode and restores the module's previous mode afterwards.
    """
    single = np.asarray(images).ndim == 2
    batch = to_batch_tensor(images, encoder.config.input_size)
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            emb = encoder(batch).numpy()
    finally:
        encoder.train(was_training)
    return emb[0] if single else emb


def pair_fn(head: nn.Module):
    """Wrap a pair head as a numpy (vec, vec) -> vec/scalar function (eval mode, no grad)."""

    def fn(a: np.ndarray, b: np.ndarray):
        ta = torch.from_numpy(np.asarray(a, dtype=np.float32)).unsqueeze(0)
        tb = torch.from_numpy(np.asarray(b, dtype=np.float32)).unsqueeze(0)
        was_training = head.training
        head.eval()
        try:
            with torch.no_grad():
                out = head(ta, tb)
        finally:
            head.train(was_training)
        out = out.squeeze(0).numpy()
        return float(out) if out.ndim == 0 else out

    return fn
