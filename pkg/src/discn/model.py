"""The full network and its ablation variants."""
from dataclasses import replace
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn

from .errors import ConfigurationError
from .fusion import (HeatmapStack, SaliencyMaps, StimulusSet, fuse_normals_iterative,
                     fuse_subjects, pre_saliency)
from .head import ComparisonHead, HeadConfig
from .saa import SAA, SaaConfig

VARIANTS = ("DISCN", "noDEP", "noNOR", "noRES", "noSEA")


def variant_head(head: HeadConfig, variant: str) -> HeadConfig:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "noRES":
        head = replace(head, residual=False)
    if variant == "noSEA":
        head = replace(head, fuser="MLP")
    return head


class DISCNModel(nn.Module):
    """RGB-D saliency, normal-control consensus and subject comparison.

    ``noDEP`` drops the depth SAA (raw RGB stands in for the preliminary
    maps), ``noNOR`` skips the normal-control recurrence, ``noRES`` swaps the
    residual trunk for plain conv blocks and ``noSEA`` fuses with an MLP.
    """

    def __init__(self, saa_cfg: SaaConfig, head_cfg: HeadConfig, variant: str = "DISCN"):
        super().__init__()
        head_cfg = variant_head(head_cfg, variant)
        if (head_cfg.image_size, head_cfg.in_channels) != (saa_cfg.image_size, saa_cfg.channels):
            raise ConfigurationError("head and SAA disagree on image size / channels")
        self.variant = variant
        self.saa_cfg, self.head_cfg = saa_cfg, head_cfg
        self.saa_depth = SAA(saa_cfg) if variant != "noDEP" else None
        self.saa_gaze = SAA(saa_cfg)
        self.head = ComparisonHead(head_cfg)

    def preliminary(self, stimuli: StimulusSet) -> SaliencyMaps:
        if self.saa_depth is None:
            return SaliencyMaps(stimuli.rgb, "preliminary")
        return pre_saliency(stimuli, self.saa_depth)

    def comprehensive(self, pre: SaliencyMaps, normals: Union[torch.Tensor, Sequence[HeatmapStack]]) -> SaliencyMaps:
        if self.variant == "noNOR":
            return SaliencyMaps(pre.maps, "comprehensive(0)")
        if isinstance(normals, torch.Tensor):
            normals = [HeatmapStack(h, f"normal_{i}") for i, h in enumerate(normals)]
        return fuse_normals_iterative(pre, normals, self.saa_gaze)

    def reference(self, stimuli: StimulusSet, normals) -> tuple:
        """Preliminary and comprehensive maps; shared by every subject in a batch."""
        pre = self.preliminary(stimuli)
        return pre, self.comprehensive(pre, normals)

    def classify_subjects(self, pre: SaliencyMaps, com: SaliencyMaps, heat: torch.Tensor,
                          logits: bool = False) -> torch.Tensor:
        sub = fuse_subjects(pre, heat, self.saa_gaze)
        return self.head(com.maps, sub, logits=logits)

    def forward(self, stimuli: StimulusSet, normals, heat: torch.Tensor) -> torch.Tensor:
        """``heat``: B x N x C x H x W subject heatmaps -> B x 2 probabilities."""
        pre, com = self.reference(stimuli, normals)
        return self.classify_subjects(pre, com, heat)
