"""Encoders, decoder, embedding classifiers and quality controller.

Sequences enter the networks as (B, J, T, 3). The frame axis becomes the
channel axis, so the convolutional stacks see a (T, J, 3) image per sample.

Resolved shapes for the default config (J=25, T=75):

    encoder   (75, 25, 3) -> 4 x [reflect-pad, conv3x3, lrelu, maxpool(2,1)]
              -> (256, 2, 3) -> flatten (256, 6) -> linear -> (256, 32)
    decoder   (512, 32) -> linear -> (512, 2, 3)
              -> 4 x [upsample(2,1), reflect-pad, convT3x3] -> (75, 32, 3)
              -> crop joints -> (75, 25, 3)
    classifier (256, 32) -> 3 x [convT1d k3, bn, relu] -> avgpool -> 512
              -> 1024 -> 512 -> Y -> softmax
    quality   (75, 75) -> 4 x [convT1d k3, lrelu, resample, reflect-pad]
              lengths 75 -> 40 -> 24 -> 16 -> 10 -> flatten 8*10=80 -> 32 -> 1 -> sigmoid
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .errors import InvalidConfig, ShapeMismatch

LEAK = 0.2
INIT_GAIN = 1.0
GROUPS = ("autoencoder", "motion_cls", "privacy_cls", "quality")


@dataclass
class NetworkConfig:
    num_joints: int = 25
    num_frames: int = 75
    encoder_channels: list = field(default_factory=lambda: [75, 12, 24, 32, 256])
    decoder_channels: list = field(default_factory=lambda: [512, 256, 128, 96, 75])
    classifier_channels: list = field(default_factory=lambda: [256, 128, 256, 512])
    classifier_dense: list = field(default_factory=lambda: [512, 1024, 512])
    qc_channels: list = field(default_factory=lambda: [75, 64, 32, 16, 8])
    qc_lengths: list = field(default_factory=lambda: [40, 24, 16, 10])
    qc_dense: list = field(default_factory=lambda: [80, 32, 1])
    embed_length: int = 32
    y_action: int = 6
    y_actor: int = 4

    @property
    def embed_channels(self):
        return self.encoder_channels[-1]

    @property
    def bottleneck_joints(self):
        n = self.num_joints
        for _ in self.encoder_channels[1:]:
            n = -(-n // 2)
        return n

    def validate(self):
        ec, dc = self.encoder_channels, self.decoder_channels
        if ec[0] != self.num_frames:
            raise InvalidConfig("encoder input channels must equal the frame count")
        if dc[0] != 2 * ec[-1]:
            raise InvalidConfig(f"decoder input {dc[0]} != 2 x embedding channels {ec[-1]}")
        if dc[-1] != self.num_frames:
            raise InvalidConfig("decoder output channels must equal the frame count")
        if self.bottleneck_joints * 2 ** (len(dc) - 1) < self.num_joints:
            raise InvalidConfig("decoder cannot upsample back to the joint count")
        if self.classifier_channels[0] != ec[-1]:
            raise InvalidConfig("classifier input channels must equal embedding channels")
        if self.classifier_dense[0] != self.classifier_channels[-1]:
            raise InvalidConfig("classifier dense input must equal its last conv width")
        if self.qc_channels[0] != self.num_frames:
            raise InvalidConfig("quality controller input channels must equal the frame count")
        if len(self.qc_lengths) != len(self.qc_channels) - 1:
            raise InvalidConfig("one resample length per quality-controller stage")
        if self.qc_dense[0] != self.qc_channels[-1] * self.qc_lengths[-1]:
            raise InvalidConfig(f"quality dense input {self.qc_dense[0]} != "
                                f"{self.qc_channels[-1]} x {self.qc_lengths[-1]}")
        if self.y_action < 2 or self.y_actor < 2:
            raise InvalidConfig("need at least two classes per head")
        return self

    def to_dict(self):
        return asdict(self)


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        layers = []
        ch = cfg.encoder_channels
        for cin, cout in zip(ch[:-1], ch[1:]):
            layers += [
                nn.ReflectionPad2d(1),
                nn.Conv2d(cin, cout, 3),
                nn.LeakyReLU(LEAK),
                nn.MaxPool2d((2, 1), ceil_mode=True),
            ]
        self.conv = nn.Sequential(*layers)
        self.project = nn.Linear(cfg.bottleneck_joints * 3, cfg.embed_length)

    def forward(self, x):
        # x: (B, T, J, 3)
        h = self.conv(x)
        return self.project(h.flatten(2))


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.decoder_channels
        self.expand = nn.Linear(cfg.embed_length, cfg.bottleneck_joints * 3)
        blocks = []
        for i, (cin, cout) in enumerate(zip(ch[:-1], ch[1:])):
            layers = [
                nn.Upsample(scale_factor=(2, 1), mode="nearest"),
                nn.ReflectionPad2d(1),
                nn.ConvTranspose2d(cin, cout, 3, stride=1, padding=2),
            ]
            if i < len(ch) - 2:
                layers.append(nn.LeakyReLU(LEAK))
            blocks += layers
        self.deconv = nn.Sequential(*blocks)

    def forward(self, z):
        # z: (B, 2*C_e, L_e)
        h = self.expand(z).unflatten(2, (self.cfg.bottleneck_joints, 3))
        out = self.deconv(h)
        return out[:, :, : self.cfg.num_joints]


class EmbeddingClassifier(nn.Module):
    def __init__(self, cfg: NetworkConfig, n_classes: int):
        super().__init__()
        ch = cfg.classifier_channels
        layers = []
        for cin, cout in zip(ch[:-1], ch[1:]):
            # batch statistics in every mode: the classifier sees two embedding
            # distributions, so running averages would describe neither
            layers += [nn.ConvTranspose1d(cin, cout, 3, stride=1, padding=1),
                       nn.BatchNorm1d(cout, track_running_stats=False), nn.ReLU()]
        layers += [nn.AdaptiveAvgPool1d(1), nn.Flatten()]
        d = cfg.classifier_dense
        for din, dout in zip(d[:-1], d[1:]):
            layers += [nn.Linear(din, dout), nn.ReLU()]
        layers.append(nn.Linear(d[-1], n_classes))
        self.net = nn.Sequential(*layers)

    def forward(self, emb):
        return torch.softmax(self.net(emb), dim=-1)


class QualityController(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.qc_channels
        stages = []
        for (cin, cout), n in zip(zip(ch[:-1], ch[1:]), cfg.qc_lengths):
            stages += [
                nn.ConvTranspose1d(cin, cout, 3, stride=1, padding=1),
                nn.LeakyReLU(LEAK),
                nn.Upsample(size=n - 2, mode="linear", align_corners=False),
                nn.ReflectionPad1d(1),
            ]
        self.conv = nn.Sequential(*stages)
        d = cfg.qc_dense
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(d[0], d[1]), nn.ReLU(), nn.Linear(d[1], d[2]))

    def forward(self, x):
        # x: (B, T, J*3)
        return torch.sigmoid(self.head(self.conv(x))).squeeze(-1)


class PMRNet(nn.Module):
    """All trainable components; the parameter groups are disjoint submodules."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_motion = Encoder(cfg)
        self.enc_privacy = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.cls_motion = EmbeddingClassifier(cfg, cfg.y_action)
        self.cls_privacy = EmbeddingClassifier(cfg, cfg.y_actor)
        self.quality = QualityController(cfg)
        # per-joint pose statistics; inputs are standardized, decoder output mapped back to meters
        self.register_buffer("pose_mean", torch.zeros(cfg.num_joints, 3))
        self.register_buffer("pose_std", torch.ones(cfg.num_joints, 3))

    def set_pose_statistics(self, sequences, min_std=1e-2):
        """Fit the standardization buffers on a (N, J, T, 3) training tensor."""
        x = torch.as_tensor(sequences, dtype=self.pose_mean.dtype)
        with torch.no_grad():
            self.pose_mean.copy_(x.mean(dim=(0, 2)))
            self.pose_std.copy_(x.std(dim=(0, 2)).clamp_min(min_std))

    def _standardize(self, x):
        return (x - self.pose_mean[:, None]) / self.pose_std[:, None]

    def group_modules(self, group):
        return {
            "autoencoder": [self.enc_motion, self.enc_privacy, self.decoder],
            "motion_cls": [self.cls_motion],
            "privacy_cls": [self.cls_privacy],
            "quality": [self.quality],
        }[group]

    def group_parameters(self, group):
        return [p for m in self.group_modules(group) for p in m.parameters()]

    def group_state(self, group):
        """name -> tensor for every parameter and buffer of a group (for freeze audits)."""
        out = {}
        prefix = {id(m): n for n, m in self.named_children()}
        for m in self.group_modules(group):
            for k, v in m.state_dict().items():
                out[f"{prefix[id(m)]}.{k}"] = v
        return out

    def _check_seq(self, x):
        J, T = self.cfg.num_joints, self.cfg.num_frames
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or tuple(x.shape[1:]) != (J, T, 3):
            raise ShapeMismatch(f"expected (B, {J}, {T}, 3), got {tuple(x.shape)}")
        return x

    def _check_emb(self, e):
        shape = (self.cfg.embed_channels, self.cfg.embed_length)
        if e.dim() == 2:
            e = e.unsqueeze(0)
        if e.dim() != 3 or tuple(e.shape[1:]) != shape:
            raise ShapeMismatch(f"expected (B, {shape[0]}, {shape[1]}), got {tuple(e.shape)}")
        return e

    def encode(self, seq):
        x = self._standardize(self._check_seq(seq)).permute(0, 2, 1, 3)
        return self.enc_motion(x), self.enc_privacy(x)

    def decode(self, motion_emb, privacy_emb):
        z = torch.cat([self._check_emb(motion_emb), self._check_emb(privacy_emb)], dim=1)
        out = self.decoder(z).permute(0, 2, 1, 3)
        return out * self.pose_std[:, None] + self.pose_mean[:, None]

    def classify(self, head, emb):
        net = {"M": self.cls_motion, "P": self.cls_privacy}[head]
        return net(self._check_emb(emb))

    def discriminate(self, seq):
        x = self._standardize(self._check_seq(seq)).permute(0, 2, 1, 3)
        return self.quality(x.flatten(2))

    def forward(self, seq):
        m, p = self.encode(seq)
        return self.decode(m, p)


def init_parameters(cfg: NetworkConfig, rng_seed: int, dtype=torch.float32) -> PMRNet:
    """Build the network with deterministic fan-in-scaled (Kaiming-uniform) weights."""
    cfg.validate()
    gen = torch.Generator().manual_seed(int(rng_seed))
    net = PMRNet(cfg)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("weight") and p.dim() > 1:
                fan_in = p.shape[1] * (p[0, 0].numel() if p.dim() > 2 else 1)
                if isinstance(_owner(net, name), (nn.ConvTranspose1d, nn.ConvTranspose2d)):
                    fan_in = p.shape[0] * p[0, 0].numel()
                bound = INIT_GAIN * (3.0 / fan_in) ** 0.5
                p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))
            elif name.endswith("bias"):
                p.zero_()
    return net.to(dtype)


def _owner(net, param_name):
    mod = net
    for part in param_name.split(".")[:-1]:
        mod = getattr(mod, part)
    return mod


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
