"""Saliency fusion: RGB-D preliminary maps, per-subject fusion with a heatmap
stack, and the recurrent consensus over the normal-control heatmaps."""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from .errors import DimensionError
from .saa import SAA
from .tensorio import save_tensor


@dataclass
class StimulusSet:
    rgb: torch.Tensor
    depth: torch.Tensor
    stimulus_ids: List[str]

    def __post_init__(self):
        if self.rgb.shape != self.depth.shape:
            raise DimensionError(f"rgb {tuple(self.rgb.shape)} and depth {tuple(self.depth.shape)} differ")
        if self.rgb.dim() != 4 or self.rgb.shape[0] < 1 or self.rgb.shape[0] != len(self.stimulus_ids):
            raise DimensionError(
                f"expected N x C x H x W stimuli matching {len(self.stimulus_ids)} ids, got {tuple(self.rgb.shape)}"
            )

    @property
    def shape(self):
        return tuple(self.rgb.shape)


@dataclass
class HeatmapStack:
    maps: torch.Tensor
    owner_id: str


@dataclass
class SaliencyMaps:
    maps: torch.Tensor
    provenance: str
    iterations: int = 0


def pre_saliency(stimuli: StimulusSet, saa_depth: SAA) -> SaliencyMaps:
    return SaliencyMaps(saa_depth(stimuli.rgb, stimuli.depth), "preliminary")


def fuse_subject(pre: SaliencyMaps, h: HeatmapStack, saa_gaze: SAA) -> SaliencyMaps:
    if pre.maps.shape != h.maps.shape:
        raise DimensionError(f"heatmaps of {h.owner_id} {tuple(h.maps.shape)} vs saliency {tuple(pre.maps.shape)}")
    return SaliencyMaps(saa_gaze(pre.maps, h.maps), f"subject({h.owner_id})")


def fuse_subjects(pre: SaliencyMaps, heat: torch.Tensor, saa_gaze: SAA) -> torch.Tensor:
    """Batched :func:`fuse_subject` for a ``B x N x C x H x W`` heatmap batch."""
    B = heat.shape[0]
    if heat.shape[1:] != pre.maps.shape:
        raise DimensionError(f"heatmap batch {tuple(heat.shape)} vs saliency {tuple(pre.maps.shape)}")
    a = pre.maps.unsqueeze(0).expand(B, *pre.maps.shape).reshape(-1, *pre.maps.shape[1:])
    out = saa_gaze(a, heat.reshape(-1, *heat.shape[2:]))
    return out.view(heat.shape)


def fuse_normals_iterative(pre: SaliencyMaps, normals: Sequence[HeatmapStack], saa_gaze: SAA,
                           dump_dir: Optional[Path] = None) -> SaliencyMaps:
    """I_0 = pre, I_{i+1} = SAA(I_i, H_{i+1}); returns I_n.

    With ``dump_dir`` every intermediate I_i is written as a DSCN-T1 tensor.
    """
    cur = pre.maps
    if dump_dir is not None:
        save_tensor(Path(dump_dir) / "iter_000.dscnt", cur)
    for i, h in enumerate(normals, start=1):
        if h.maps.shape != cur.shape:
            raise DimensionError(f"normal {h.owner_id} heatmaps {tuple(h.maps.shape)} vs {tuple(cur.shape)}")
        cur = saa_gaze(cur, h.maps)
        if dump_dir is not None:
            save_tensor(Path(dump_dir) / f"iter_{i:03d}.dscnt", cur)
    return SaliencyMaps(cur, f"comprehensive({len(normals)})", len(normals))
