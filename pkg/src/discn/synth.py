"""Synthetic stand-in for the clinical data: RGB-D scenes with known objects,
fixation sequences for normal-control and AD-like viewers, and
duration-weighted gaze heatmaps.

Depth values are normalised disparities, so larger means nearer.
"""
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import DatasetIOError, IntegrityError
from .fusion import HeatmapStack, StimulusSet
from .tensorio import load_tensor, save_tensor

SCHEMA = "discn-ds/1"
AD, NC = 0, 1
CROP_SIZE = 224
DIVERGENCE_LEVELS = {"none": 0.0, "low": 0.35, "medium": 0.65, "high": 1.0}


@dataclass
class SceneObject:
    cx: float
    cy: float
    radius: float
    color: Tuple[float, float, float]
    depth: float


@dataclass
class SceneSpec:
    objects: List[SceneObject]
    background_depth: float
    size: int

    def __post_init__(self):
        for o in self.objects:
            if not (0 <= o.cx < self.size and 0 <= o.cy < self.size):
                raise ValueError(f"object centre ({o.cx}, {o.cy}) outside {self.size}px image")
            if o.radius <= 0 or not 0 <= o.depth <= 1:
                raise ValueError(f"bad object radius {o.radius} / depth {o.depth}")
        if not 0 <= self.background_depth <= 1:
            raise ValueError("background depth must lie in [0, 1]")

    def object_mask(self, index: int) -> np.ndarray:
        o = self.objects[index]
        yy, xx = np.mgrid[0:self.size, 0:self.size]
        return (xx - o.cx) ** 2 + (yy - o.cy) ** 2 <= o.radius ** 2


@dataclass
class GazeProfile:
    group: str
    sigma_fix: float
    salient_bias: float
    duration_mean: float = 250.0
    duration_std: float = 80.0
    n_fixations: int = 12
    # object choice weight ~ depth ** depth_preference (0 = any object alike)
    depth_preference: float = 0.0

    def __post_init__(self):
        if not 0 <= self.salient_bias <= 1:
            raise ValueError(f"salient_bias must be in [0, 1], got {self.salient_bias}")
        if self.duration_mean <= 0 or self.duration_std < 0 or self.sigma_fix < 0 or self.n_fixations < 0:
            raise ValueError("durations must be positive and dispersion non-negative")

    def params(self):
        d = asdict(self)
        d.pop("group")
        return d


@dataclass
class Fixation:
    x: float
    y: float
    duration: float
    target: Optional[int] = None


DURATION_CLIP = (80.0, 800.0)


def nc_profile(size: int = 64) -> GazeProfile:
    return GazeProfile("NC", sigma_fix=size / 32, salient_bias=0.9, depth_preference=4.0)


def ad_profile(divergence: float, size: int = 64) -> GazeProfile:
    """AD-like viewer; ``divergence`` 0 reproduces :func:`nc_profile` exactly."""
    if not 0 <= divergence <= 1:
        raise ValueError(f"divergence must be in [0, 1], got {divergence}")
    nc = nc_profile(size)
    return replace(
        nc,
        group="AD",
        salient_bias=nc.salient_bias - 0.6 * divergence,
        sigma_fix=nc.sigma_fix * (1 + 3 * divergence),
        depth_preference=nc.depth_preference * (1 - divergence),
    )


def parse_divergence(value) -> float:
    if isinstance(value, str):
        if value in DIVERGENCE_LEVELS:
            return DIVERGENCE_LEVELS[value]
        value = float(value)
    return float(value)


# stimuli ---------------------------------------------------------------------

def _smooth_noise(rng, size, cells=4):
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0, cells, size)
    i = np.minimum(t.astype(int), cells - 1)
    f = t - i
    rows = coarse[i] * (1 - f)[:, None] + coarse[i + 1] * f[:, None]
    return rows[:, i] * (1 - f)[None, :] + rows[:, i + 1] * f[None, :]


def draw_scene(rng, size: int, n_objects: int = 4) -> SceneSpec:
    objects = []
    radius_lo, radius_hi = size / 14, size / 8
    margin = radius_hi
    for _ in range(n_objects):
        cx, cy = rng.uniform(margin, size - margin, size=2)
        objects.append(SceneObject(
            float(cx), float(cy), float(rng.uniform(radius_lo, radius_hi)),
            tuple(float(c) for c in rng.uniform(0.2, 1.0, size=3)),
            float(rng.uniform(0.3, 1.0)),
        ))
    return SceneSpec(objects, background_depth=float(rng.uniform(0.05, 0.2)), size=size)


def render_scene(scene: SceneSpec, rng, channels: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    size = scene.size
    base = rng.uniform(0.2, 0.6, size=channels)
    rgb = np.stack([np.clip(b + 0.25 * (_smooth_noise(rng, size) - 0.5), 0, 1) for b in base])
    depth = np.full((size, size), scene.background_depth)
    # far objects first so nearer ones occlude them
    order = sorted(range(len(scene.objects)), key=lambda i: scene.objects[i].depth)
    for i in order:
        o = scene.objects[i]
        m = scene.object_mask(i)
        for c in range(channels):
            rgb[c][m] = o.color[c % 3]
        depth[m] = o.depth
    return rgb.astype(np.float32), np.broadcast_to(depth, (channels, size, size)).astype(np.float32)


def gen_stimuli(seed: int, size: int = 64, n: int = 5, channels: int = 3,
                n_objects: int = 4) -> Tuple[StimulusSet, List[SceneSpec]]:
    if n < 1:
        raise ValueError("need at least one stimulus")
    rng = np.random.default_rng([seed, 0])
    scenes, rgbs, depths = [], [], []
    for _ in range(n):
        scene = draw_scene(rng, size, n_objects)
        rgb, depth = render_scene(scene, rng, channels)
        scenes.append(scene)
        rgbs.append(rgb)
        depths.append(depth)
    stim = StimulusSet(torch.from_numpy(np.stack(rgbs)), torch.from_numpy(np.stack(depths)),
                       [f"stim_{i:03d}" for i in range(n)])
    return stim, scenes


# gaze -------------------------------------------------------------------------

def simulate_fixations(profile: GazeProfile, scene: SceneSpec, rng) -> List[Fixation]:
    size = scene.size
    weights = np.array([o.depth for o in scene.objects]) ** profile.depth_preference
    weights = weights / weights.sum() if len(weights) else weights
    out = []
    for _ in range(profile.n_fixations):
        if scene.objects and rng.random() < profile.salient_bias:
            j = int(rng.choice(len(scene.objects), p=weights))
            o = scene.objects[j]
            x, y = rng.normal((o.cx, o.cy), profile.sigma_fix) if profile.sigma_fix > 0 else (o.cx, o.cy)
            target = j
        else:
            x, y = rng.uniform(0, size - 1, size=2)
            target = None
        dur = float(np.clip(rng.normal(profile.duration_mean, profile.duration_std), *DURATION_CLIP))
        out.append(Fixation(float(np.clip(x, 0, size - 1)), float(np.clip(y, 0, size - 1)), dur, target))
    return out


def fixations_to_heatmap(fixes: Sequence[Fixation], size: int, channels: int = 3,
                         sigma: Optional[float] = None) -> torch.Tensor:
    """Duration-weighted sum of isotropic Gaussians, max-normalised to [0, 1].

    An empty fixation list yields an all-zero map (with a warning); callers
    that persist data record it via :func:`heatmap_is_empty`.
    """
    sigma = size / 22 if sigma is None else sigma
    if not fixes:
        warnings.warn("empty fixation list; heatmap is all zeros", stacklevel=2)
        return torch.zeros(channels, size, size)
    grid = np.arange(size, dtype=np.float64)
    xs = np.array([f.x for f in fixes])
    ys = np.array([f.y for f in fixes])
    w = np.array([f.duration for f in fixes])
    gx = np.exp(-((grid[None, :] - xs[:, None]) ** 2) / (2 * sigma ** 2))
    gy = np.exp(-((grid[None, :] - ys[:, None]) ** 2) / (2 * sigma ** 2))
    heat = (gy * w[:, None]).T @ gx  # H x W
    heat = heat / heat.max()
    return torch.from_numpy(np.broadcast_to(heat, (channels, size, size)).astype(np.float32).copy())


def heatmap_is_empty(h: torch.Tensor) -> bool:
    return bool((h == 0).all())


def center_crop(x: torch.Tensor, size: int = CROP_SIZE) -> torch.Tensor:
    H, W = x.shape[-2:]
    if H <= size and W <= size:
        return x
    top, left = (H - size) // 2, (W - size) // 2
    return x[..., top:top + size, left:left + size]


# datasets ---------------------------------------------------------------------

@dataclass
class DatasetManifest:
    n_stimuli: int
    size: int
    channels: int
    seed: int
    divergence: float
    stimulus_ids: List[str]
    subjects: List[Dict]           # {"id": str, "label": 0 (AD) | 1 (NC)}
    normal_ids: List[str]
    empty_heatmaps: List[str] = field(default_factory=list)
    schema: str = SCHEMA

    def __post_init__(self):
        labels = [s["label"] for s in self.subjects]
        if labels.count(AD) != labels.count(NC):
            raise IntegrityError(f"subject set must be 1:1 AD:NC, got {labels.count(AD)}:{labels.count(NC)}")

    def to_json(self):
        d = asdict(self)
        d["n_subjects"] = len(self.subjects)
        d["n_normals"] = len(self.normal_ids)
        return d

    @classmethod
    def from_json(cls, d, source="manifest.json"):
        if d.get("schema") != SCHEMA:
            raise IntegrityError(f"{source}: unsupported schema {d.get('schema')!r}")
        if d.get("n_subjects", len(d["subjects"])) != len(d["subjects"]):
            raise IntegrityError(f"{source}: n_subjects={d['n_subjects']} but {len(d['subjects'])} listed")
        if d.get("n_normals", len(d["normal_ids"])) != len(d["normal_ids"]):
            raise IntegrityError(f"{source}: n_normals={d['n_normals']} but {len(d['normal_ids'])} listed")
        if len(d["stimulus_ids"]) != d["n_stimuli"]:
            raise IntegrityError(f"{source}: n_stimuli={d['n_stimuli']} but {len(d['stimulus_ids'])} ids")
        keys = {k: d[k] for k in ("n_stimuli", "size", "channels", "seed", "divergence", "stimulus_ids",
                                  "subjects", "normal_ids", "empty_heatmaps", "schema") if k in d}
        return cls(**keys)

    @property
    def subject_ids(self):
        return [s["id"] for s in self.subjects]

    @property
    def labels(self):
        return {s["id"]: int(s["label"]) for s in self.subjects}


@dataclass
class Dataset:
    manifest: DatasetManifest
    stimuli: StimulusSet
    subject_heat: Dict[str, torch.Tensor]     # id -> N x C x H x W
    normal_heat: Dict[str, torch.Tensor]
    scenes: Optional[List[SceneSpec]] = None

    def normals_tensor(self) -> torch.Tensor:
        return torch.stack([self.normal_heat[i] for i in self.manifest.normal_ids])

    def normal_stacks(self) -> List[HeatmapStack]:
        return [HeatmapStack(self.normal_heat[i], i) for i in self.manifest.normal_ids]

    def heat_batch(self, ids: Sequence[str]) -> torch.Tensor:
        return torch.stack([self.subject_heat[i] for i in ids])

    def labels_of(self, ids: Sequence[str]) -> torch.Tensor:
        lab = self.manifest.labels
        return torch.tensor([lab[i] for i in ids])


def _subject_heatmaps(profile, scenes, rng, channels, empty_flags, owner):
    maps = []
    for j, scene in enumerate(scenes):
        fixes = simulate_fixations(profile, scene, rng)
        if not fixes:
            empty_flags.append(f"{owner}/{j:03d}")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                maps.append(fixations_to_heatmap(fixes, scene.size, channels))
        else:
            maps.append(fixations_to_heatmap(fixes, scene.size, channels))
    return center_crop(torch.stack(maps))


def generate_dataset(seed: int = 0, size: int = 64, n_stimuli: int = 5, n_subjects: int = 40,
                     n_normals: int = 8, divergence=1.0, channels: int = 3,
                     n_objects: int = 4) -> Dataset:
    """Seeded dataset; every viewer draws from its own (seed, role, index) stream."""
    divergence = parse_divergence(divergence)
    if n_subjects % 2:
        raise ValueError("subject count must be even (1:1 AD:NC)")
    stim, scenes = gen_stimuli(seed, size, n_stimuli, channels, n_objects)
    stim = StimulusSet(center_crop(stim.rgb), center_crop(stim.depth), stim.stimulus_ids)
    nc, ad = nc_profile(size), ad_profile(divergence, size)
    empty: List[str] = []
    normal_ids = [f"nc_{i:03d}" for i in range(n_normals)]
    normal_heat = {
        nid: _subject_heatmaps(nc, scenes, np.random.default_rng([seed, 1, i]), channels, empty, nid)
        for i, nid in enumerate(normal_ids)
    }
    subjects, subject_heat = [], {}
    half = n_subjects // 2
    for i in range(n_subjects):
        label = AD if i < half else NC
        sid = f"sub_{i:03d}"
        prof = ad if label == AD else nc
        subject_heat[sid] = _subject_heatmaps(prof, scenes, np.random.default_rng([seed, 2, i]),
                                              channels, empty, sid)
        subjects.append({"id": sid, "label": label})
    manifest = DatasetManifest(n_stimuli, min(size, CROP_SIZE), channels, seed, divergence,
                               stim.stimulus_ids, subjects, normal_ids, empty)
    return Dataset(manifest, stim, subject_heat, normal_heat, scenes)


def _heat_files(root: Path, group: str, owner: str, n: int):
    return [root / group / owner / f"heat_{j:03d}.dscnt" for j in range(n)]


def write_dataset(ds: Dataset, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    m = ds.manifest
    for j in range(m.n_stimuli):
        save_tensor(root / "stimuli" / f"rgb_{j:03d}.dscnt", ds.stimuli.rgb[j])
        save_tensor(root / "stimuli" / f"depth_{j:03d}.dscnt", ds.stimuli.depth[j])
    for group, heat in (("subjects", ds.subject_heat), ("normals", ds.normal_heat)):
        for owner, maps in heat.items():
            for j, path in enumerate(_heat_files(root, group, owner, m.n_stimuli)):
                save_tensor(path, maps[j])
    (root / "manifest.json").write_text(json.dumps(m.to_json(), indent=2, sort_keys=True))
    return root


def _load_checked(path: Path, shape) -> torch.Tensor:
    t = load_tensor(path)
    if tuple(t.shape) != tuple(shape):
        raise IntegrityError(f"{path}: shape {tuple(t.shape)} does not match manifest {tuple(shape)}")
    return t


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    mpath = root / "manifest.json"
    try:
        raw = json.loads(mpath.read_text())
    except OSError as exc:
        raise DatasetIOError(mpath, exc.strerror or str(exc)) from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{mpath}: {exc}") from None
    m = DatasetManifest.from_json(raw, str(mpath))
    shape = (m.channels, m.size, m.size)
    for group, ids in (("subjects", m.subject_ids), ("normals", m.normal_ids)):
        gdir = root / group
        on_disk = sorted(p.name for p in gdir.iterdir() if p.is_dir()) if gdir.is_dir() else []
        if on_disk != sorted(ids):
            raise IntegrityError(f"{gdir}: {len(on_disk)} directories on disk, manifest lists {len(ids)}")
    rgb = torch.stack([_load_checked(root / "stimuli" / f"rgb_{j:03d}.dscnt", shape) for j in range(m.n_stimuli)])
    depth = torch.stack([_load_checked(root / "stimuli" / f"depth_{j:03d}.dscnt", shape) for j in range(m.n_stimuli)])

    def heat(group, owner):
        return torch.stack([_load_checked(p, shape) for p in _heat_files(root, group, owner, m.n_stimuli)])

    return Dataset(
        m, StimulusSet(rgb, depth, list(m.stimulus_ids)),
        {i: heat("subjects", i) for i in m.subject_ids},
        {i: heat("normals", i) for i in m.normal_ids},
    )


def dataset_hash(directory) -> str:
    """sha256 over every file of a dataset directory, in sorted path order."""
    root = Path(directory)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def memory_hash(ds: Dataset) -> str:
    """Content hash of an in-memory dataset (same bytes as its DSCN-T1 files)."""
    from .tensorio import encode_tensor
    h = hashlib.sha256(json.dumps(ds.manifest.to_json(), sort_keys=True).encode())
    for t in [ds.stimuli.rgb, ds.stimuli.depth] + [ds.subject_heat[i] for i in ds.manifest.subject_ids] \
            + [ds.normal_heat[i] for i in ds.manifest.normal_ids]:
        h.update(encode_tensor(t))
    return h.hexdigest()
