"""Stem, stages, heads and the W-net / U-net assemblies."""
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ablations import KnnMlpAggregate, fps_sample, interpolate_up, random_sample
from .dta import DTA
from .errors import ConfigError, ShapeError
from .gfe import GFE
from .itr import reconstruct
from .lts import LTS, TokenSet, keep_count, sparsify
from .numerics import LBR, make_generator

LTS_MODES = ("learned", "fps", "random")
DTA_MODES = ("wca", "none", "knn_mlp", "vca")
ITR_MODES = ("wca_map", "trilinear", "nearest")
ARCHS = ("wnet", "unet")


@dataclass
class StageConfig:
    width: int = 64
    ratio: float = 0.25
    temperature: float = 1.0

    def __post_init__(self):
        if self.width < 2 or self.width % 2:
            raise ConfigError(f"stage width must be even and >= 2, got {self.width}")
        if not 0 < self.ratio <= 1:
            raise ConfigError(f"sparsify ratio must be in (0, 1], got {self.ratio}")
        if self.temperature <= 0:
            raise ConfigError("gumbel temperature must be positive")


@dataclass
class ModelConfig:
    in_channels: int = 6
    num_classes: int = 6
    stages: list = field(default_factory=lambda: [StageConfig(64), StageConfig(128)])
    arch: str = "wnet"
    lts: str = "learned"
    dta: str = "wca"
    gfe: bool = True
    gfe_point: bool = True
    gfe_channel: bool = True
    itr: str = "wca_map"
    knn_k: int = 16

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.in_channels < 3:
            raise ConfigError("input needs at least XYZ channels")
        if not self.stages:
            raise ConfigError("need at least one stage")
        for name, value, allowed in (("arch", self.arch, ARCHS), ("lts", self.lts, LTS_MODES),
                                     ("dta", self.dta, DTA_MODES), ("itr", self.itr, ITR_MODES)):
            if value not in allowed:
                raise ConfigError(f"model.{name} must be one of {allowed}, got {value!r}",
                                  key=f"model.{name}")

    @property
    def stem_width(self):
        return self.stages[0].width

    @property
    def effective_itr(self):
        # without a WCA map there is nothing for ITR to consume
        if self.dta in ("none", "knn_mlp") and self.itr == "wca_map":
            return "nearest"
        return self.itr


@dataclass
class StageTrace:
    scores: object
    selection: object
    dta_map: object = None
    itr_map: object = None
    enhanced: torch.Tensor = None


@dataclass
class SegmentationOutput:
    logits: list
    traces: list

    @property
    def prediction(self):
        return self.logits[-1].argmax(-1)


class Stage(nn.Module):
    """LTS -> DTA -> GFE, with ITR available separately so U-net can defer it."""

    def __init__(self, sc, cfg):
        super().__init__()
        self.ratio = sc.ratio
        self.sampler = cfg.lts
        self.mode = cfg.dta
        self.itr_mode = cfg.effective_itr
        self.lts = LTS(sc.width, sc.temperature)
        if cfg.dta in ("wca", "vca"):
            self.dta = DTA(sc.width, use_pi=cfg.dta == "wca")
        elif cfg.dta == "knn_mlp":
            self.dta = KnnMlpAggregate(sc.width, cfg.knn_k)
        else:
            self.dta = None
        self.gfe = GFE(sc.width, cfg.gfe_point, cfg.gfe_channel) if cfg.gfe else None

    def encode(self, tokens, generator=None, relaxed=False):
        h = keep_count(self.ratio, tokens.count)
        scores = self.lts.scores(tokens)
        if self.sampler == "learned":
            sel = sparsify(tokens, scores, h, generator, self.training,
                           self.lts.temperature, relaxed)
        elif self.sampler == "fps":
            sel = fps_sample(tokens, h)
        else:
            # without a caller stream (eval), draw from a fixed one so predictions repeat
            sel = random_sample(tokens, h, generator if generator is not None else make_generator(0))

        trace = StageTrace(scores=scores, selection=sel)
        s = sel.features
        if self.mode in ("wca", "vca"):
            s, trace.dta_map = self.dta(sel.features, sel.coords, tokens.features,
                                        tokens.coords, scores.pi)
        elif self.mode == "knn_mlp":
            s = self.dta(sel.coords, tokens.features, tokens.coords)
        if self.gfe is not None:
            s = self.gfe(s, sel.coords)
        trace.enhanced = s
        return trace

    def decode(self, s, s_coords, tokens, wca=None):
        mode = self.itr_mode
        if mode == "wca_map":
            return reconstruct(s, tokens.features, wca)
        up = interpolate_up(s, s_coords, tokens.coords, mode)
        return up + tokens.features

    def forward(self, tokens, generator=None, relaxed=False):
        trace = self.encode(tokens, generator, relaxed)
        trace.itr_map = trace.dta_map if self.itr_mode == "wca_map" else None
        out = self.decode(trace.enhanced, trace.selection.coords, tokens, trace.itr_map)
        if out.shape[-2] != tokens.count:
            raise ShapeError("stage changed the token count")
        return TokenSet(out, tokens.coords), trace


class Stem(nn.Module):
    def __init__(self, in_channels, width):
        super().__init__()
        self.in_channels = in_channels
        self.layers = nn.Sequential(LBR(in_channels, width // 2), LBR(width // 2, width))

    def forward(self, points):
        if points.shape[-1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {points.shape[-1]}")
        return self.layers(points)


class Head(nn.Module):
    """Global max-pool, concatenated to every token, then FC-BN-ReLU and FC."""

    def __init__(self, width, num_classes):
        super().__init__()
        self.fc1 = LBR(2 * width, width)
        self.fc2 = nn.Linear(width, num_classes)

    def forward(self, x):
        g = x.amax(dim=-2, keepdim=True).expand_as(x)
        return self.fc2(self.fc1(torch.cat([x, g], dim=-1)))


class DTAFormer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        widths = [s.width for s in cfg.stages]
        self.stem = Stem(cfg.in_channels, widths[0])
        self.stages = nn.ModuleList(Stage(sc, cfg) for sc in cfg.stages)
        self.transitions = nn.ModuleList(LBR(a, b) for a, b in zip(widths, widths[1:]))
        if cfg.arch == "wnet":
            self.heads = nn.ModuleList(Head(w, cfg.num_classes) for w in widths)
        else:
            self.heads = nn.ModuleList([Head(widths[0], cfg.num_classes)])
            self.back = nn.ModuleList(LBR(b, a) for a, b in zip(widths, widths[1:]))

    def forward(self, points, generator=None, relaxed=False):
        if points.dim() == 2:
            points = points.unsqueeze(0)
        tokens = TokenSet(self.stem(points), points[..., :3])
        if self.cfg.arch == "wnet":
            return self._wnet(tokens, generator, relaxed)
        return self._unet(tokens, generator, relaxed)

    def _wnet(self, tokens, generator, relaxed):
        logits, traces = [], []
        for i, stage in enumerate(self.stages):
            if i:
                tokens = TokenSet(self.transitions[i - 1](tokens.features), tokens.coords)
            tokens, trace = stage(tokens, generator, relaxed)
            traces.append(trace)
            logits.append(self.heads[i](tokens.features))
        return SegmentationOutput(logits, traces)

    def _unet(self, tokens, generator, relaxed):
        # encoder: each stage sparsifies the previous stage's sparsified set
        inputs, traces = [], []
        cur = tokens
        for i, stage in enumerate(self.stages):
            if i:
                cur = TokenSet(self.transitions[i - 1](cur.features), cur.coords)
            inputs.append(cur)
            trace = stage.encode(cur, generator, relaxed)
            traces.append(trace)
            cur = TokenSet(trace.enhanced, trace.selection.coords)
        # decoder: reconstruct in reverse with the stored encoder maps
        x = cur.features
        for i in reversed(range(len(self.stages))):
            stage, trace = self.stages[i], traces[i]
            if stage.itr_mode == "wca_map":
                trace.itr_map = trace.dta_map
            x = stage.decode(x, trace.selection.coords, inputs[i], trace.itr_map)
            if i:
                x = self.back[i - 1](x)
        return SegmentationOutput([self.heads[0](x)], traces)


def multi_loss(output, labels):
    """Mean over stages of per-point cross-entropy."""
    k = output.logits[0].shape[-1]
    labels = labels.reshape(-1).long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    losses = [F.cross_entropy(lg.reshape(-1, k), labels) for lg in output.logits]
    return torch.stack(losses).mean()
