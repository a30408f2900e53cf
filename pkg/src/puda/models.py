"""Desk-scale networks: variational encoder G, classifier head F, decoder D,
and the independent final classifier C, plus parameter snapshots.

Vector inputs get fully-connected stacks, image inputs (C, H, W) small
convolutional ones. Architectures are driven by ``ArchConfig`` so larger
backbones can be swapped in without touching the training code.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn


@dataclass
class ArchConfig:
    input_shape: tuple
    d_z: int = 32
    encoder_hidden: tuple = (64, 64)
    head_hidden: tuple = (32,)
    final_hidden: tuple = (64, 32)
    variational: bool = True

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.encoder_hidden = tuple(int(v) for v in self.encoder_hidden)
        self.head_hidden = tuple(int(v) for v in self.head_hidden)
        self.final_hidden = tuple(int(v) for v in self.final_hidden)
        if self.d_z <= 0:
            raise ValueError("embedding dimension must be positive")
        if len(self.head_hidden) < 1:
            raise ValueError("classifier head needs at least 2 layers")

    @property
    def is_image(self) -> bool:
        return len(self.input_shape) == 3


class Encoder(nn.Module):
    """Shared embedding network G; emits per-dimension mean and log-variance
    when variational, a single embedding otherwise."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        if arch.is_image:
            c, h, w = arch.input_shape
            channels = [c, 8, 16, 32]
            convs = []
            sizes = [(h, w)]
            for cin, cout in zip(channels[:-1], channels[1:]):
                convs += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU()]
                ph, pw = sizes[-1]
                sizes.append((math.ceil(ph / 2), math.ceil(pw / 2)))
            self.trunk = nn.Sequential(*convs, nn.Flatten())
            self.spatial_sizes = sizes
            feat = channels[-1] * sizes[-1][0] * sizes[-1][1]
        else:
            (d,) = arch.input_shape
            widths = [d, *arch.encoder_hidden]
            layers = []
            for win, wout in zip(widths[:-1], widths[1:]):
                layers += [nn.Linear(win, wout), nn.ReLU()]
            self.trunk = nn.Sequential(*layers)
            feat = widths[-1]
        self.mu_head = nn.Linear(feat, arch.d_z)
        self.logvar_head = nn.Linear(feat, arch.d_z) if arch.variational else None

    def forward(self, x):
        h = self.trunk(x)
        mu = self.mu_head(h)
        logvar = None
        if self.logvar_head is not None:
            # bounded log-variance keeps the KL term and sampling finite
            logvar = self.logvar_head(h).clamp(-8.0, 8.0)
        return mu, logvar


class ClassifierHead(nn.Module):
    """Classifier F on the embedding; the first l-1 layers form the
    penultimate feature map used by the feature-norm regularizer."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        widths = [arch.d_z, *arch.head_hidden]
        layers = []
        for win, wout in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(win, wout), nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(widths[-1], 2)

    def penultimate(self, z):
        return self.body(z)

    def forward(self, z):
        return self.out(self.body(z))


class Decoder(nn.Module):
    """Decoder D mapping d_z-vectors (embeddings or prior draws) back to the
    encoder's input shape."""

    def __init__(self, arch: ArchConfig, spatial_sizes=None):
        super().__init__()
        self.arch = arch
        if arch.is_image:
            c, h, w = arch.input_shape
            sizes = spatial_sizes or _conv_sizes(h, w)
            sh, sw = sizes[-1]
            self.fc = nn.Linear(arch.d_z, 32 * sh * sw)
            self.unflatten = nn.Unflatten(1, (32, sh, sw))
            channels = [32, 16, 8, c]
            stages = []
            for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
                tin = sizes[-1 - i]
                tout = sizes[-2 - i]
                op_h = tout[0] - ((tin[0] - 1) * 2 - 2 + 3)
                op_w = tout[1] - ((tin[1] - 1) * 2 - 2 + 3)
                stages.append(nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1,
                                                 output_padding=(op_h, op_w)))
                if i < len(channels) - 2:
                    stages.append(nn.ReLU())
            stages.append(nn.Sigmoid())  # images live in [0, 1]
            self.stages = nn.Sequential(*stages)
        else:
            (d,) = arch.input_shape
            widths = [arch.d_z, *reversed(arch.encoder_hidden)]
            layers = []
            for win, wout in zip(widths[:-1], widths[1:]):
                layers += [nn.Linear(win, wout), nn.ReLU()]
            layers.append(nn.Linear(widths[-1], d))
            self.fc = None
            self.stages = nn.Sequential(*layers)

    def forward(self, z):
        if self.arch.is_image:
            return self.stages(self.unflatten(self.fc(z)))
        return self.stages(z)


class FinalClassifier(nn.Module):
    """Step-2 classifier C, parameter-independent from G/F/D."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        if arch.is_image:
            c, h, w = arch.input_shape
            sizes = _conv_sizes(h, w, stages=2)
            feat = 16 * sizes[-1][0] * sizes[-1][1]
            self.net = nn.Sequential(
                nn.Conv2d(c, 8, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU(),
                nn.Flatten(),
                nn.Linear(feat, arch.final_hidden[0]), nn.ReLU(),
                nn.Linear(arch.final_hidden[0], 2),
            )
        else:
            (d,) = arch.input_shape
            widths = [d, *arch.final_hidden]
            layers = []
            for win, wout in zip(widths[:-1], widths[1:]):
                layers += [nn.Linear(win, wout), nn.ReLU()]
            layers.append(nn.Linear(widths[-1], 2))
            self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def _conv_sizes(h, w, stages=3):
    sizes = [(h, w)]
    for _ in range(stages):
        ph, pw = sizes[-1]
        sizes.append((math.ceil(ph / 2), math.ceil(pw / 2)))
    return sizes


@dataclass
class ModelBundle:
    """Encoder G, head F, decoder D sharing one architecture config."""

    arch: ArchConfig
    encoder: Encoder
    head: ClassifierHead
    decoder: Decoder

    def step1_parameters(self):
        for m in (self.encoder, self.head, self.decoder):
            yield from m.parameters()


def build_models(arch: ArchConfig) -> ModelBundle:
    encoder = Encoder(arch)
    spatial = getattr(encoder, "spatial_sizes", None)
    return ModelBundle(arch=arch, encoder=encoder, head=ClassifierHead(arch),
                       decoder=Decoder(arch, spatial_sizes=spatial))


@dataclass
class ParameterSnapshot:
    """Frozen copy of (G, F) tagged with the step/epoch it was taken at.

    Evaluating through a snapshot never creates gradient dependencies on the
    live parameters.
    """

    encoder: Encoder
    head: ClassifierHead
    tag: int = 0


def snapshot(encoder: Encoder, head: ClassifierHead, tag: int = 0) -> ParameterSnapshot:
    enc = copy.deepcopy(encoder).eval()
    hd = copy.deepcopy(head).eval()
    for p in list(enc.parameters()) + list(hd.parameters()):
        p.requires_grad_(False)
    return ParameterSnapshot(encoder=enc, head=hd, tag=tag)


def _as_tensor(x, like: nn.Module) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = next(like.parameters()).dtype
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def predict_proba(encoder: Encoder, head: ClassifierHead, x) -> torch.Tensor:
    """Positive-class probability softmax(F(G(x)))[:, 1] on the mean embedding.

    Evaluation path: deterministic given parameters and input, no sampling,
    no gradients. Runs in float64 so batched and per-example evaluation agree
    to full double precision.
    """
    x = _as_tensor(x, encoder)
    _check_input_shape(encoder.arch, x)
    with torch.no_grad():
        enc, hd = _double_eval_copy(encoder), _double_eval_copy(head)
        mu, _ = enc(x.double())
        logits = hd(mu)
        return torch.softmax(logits, dim=1)[:, 1]


def _double_eval_copy(module: nn.Module) -> nn.Module:
    if next(module.parameters()).dtype == torch.float64:
        return module
    return copy.deepcopy(module).double().eval()


def feature_norm(encoder: Encoder, head: ClassifierHead, x,
                 snap: ParameterSnapshot | None = None) -> torch.Tensor:
    """L2 norm of the penultimate feature F_l(G(x)) per example.

    With a snapshot the norm is computed through the frozen copies under
    no_grad; otherwise it is differentiable with respect to the live
    parameters. Uses the mean embedding, so repeat calls agree exactly.
    """
    if snap is not None:
        with torch.no_grad():
            x = _as_tensor(x, snap.encoder)
            mu, _ = snap.encoder(x)
            return snap.head.penultimate(mu).norm(dim=1)
    x = _as_tensor(x, encoder)
    mu, _ = encoder(x)
    return head.penultimate(mu).norm(dim=1)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """Sample z = mu + sigma * eps with eps ~ N(0, I)."""
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * logvar) * eps


def sample_prior(n: int, d_z: int, seed: int | torch.Generator = 0,
                 dtype=torch.float32) -> torch.Tensor:
    """n i.i.d. standard-normal d_z-vectors, deterministic given the seed."""
    if n <= 0 or d_z <= 0:
        raise ValueError("sample_prior: n and d_z must be positive")
    if isinstance(seed, torch.Generator):
        gen = seed
    else:
        gen = torch.Generator()
        gen.manual_seed(int(seed))
    return torch.randn(n, d_z, generator=gen, dtype=dtype)


def _check_input_shape(arch: ArchConfig, x: torch.Tensor):
    if tuple(x.shape[1:]) != arch.input_shape:
        raise ValueError(
            f"input shape {tuple(x.shape[1:])} does not match "
            f"model input shape {arch.input_shape}")


def save_model(path, modules: dict, arch: ArchConfig):
    """Checkpoint named modules with their architecture descriptor."""
    torch.save({
        "arch": asdict(arch),
        "states": {name: m.state_dict() for name, m in modules.items()},
    }, path)


def load_model(path) -> tuple[dict, ArchConfig]:
    """Rebuild checkpointed modules; outputs match the saved model bit-for-bit."""
    payload = torch.load(path, weights_only=False)
    arch = ArchConfig(**payload["arch"])
    built = {}
    for name, state in payload["states"].items():
        if name == "encoder":
            module = Encoder(arch)
        elif name == "head":
            module = ClassifierHead(arch)
        elif name == "decoder":
            module = Decoder(arch)
        elif name == "final":
            module = FinalClassifier(arch)
        else:
            raise ValueError(f"unknown module name {name!r} in checkpoint")
        module.load_state_dict(state)
        built[name] = module
    return built, arch
