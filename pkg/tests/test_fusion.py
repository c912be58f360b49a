import pytest
import torch

from discn.errors import DimensionError
from discn.fusion import (HeatmapStack, SaliencyMaps, StimulusSet, fuse_normals_iterative, fuse_subject,
                          fuse_subjects, pre_saliency)
from discn.saa import SAA
from discn.tensorio import load_tensor

from conftest import tiny_saa


@pytest.fixture(scope="module")
def parts():
    torch.manual_seed(0)
    cfg = tiny_saa()
    g = torch.Generator().manual_seed(1)
    stim = StimulusSet(torch.rand(3, 3, 16, 16, generator=g), torch.rand(3, 3, 16, 16, generator=g),
                       ["s0", "s1", "s2"])
    normals = [HeatmapStack(torch.rand(3, 3, 16, 16, generator=g), f"n{i}") for i in range(3)]
    return SAA(cfg), SAA(cfg), stim, normals


class CallCounter:
    def __init__(self, module):
        self.calls = 0
        self.handle = module.register_forward_hook(self)

    def __call__(self, *_):
        self.calls += 1


def test_stimulus_set_contract():
    with pytest.raises(DimensionError):
        StimulusSet(torch.zeros(2, 3, 8, 8), torch.zeros(2, 3, 4, 4), ["a", "b"])
    with pytest.raises(DimensionError):
        StimulusSet(torch.zeros(2, 3, 8, 8), torch.zeros(2, 3, 8, 8), ["a"])


def test_pre_saliency(parts):
    saa_depth, _, stim, _ = parts
    pre = pre_saliency(stim, saa_depth)
    assert pre.maps.shape == stim.shape and pre.provenance == "preliminary"
    assert torch.equal(pre.maps, pre_saliency(stim, saa_depth).maps)
    flat = StimulusSet(stim.rgb, torch.zeros_like(stim.depth), stim.stimulus_ids)
    assert not torch.allclose(pre_saliency(flat, saa_depth).maps, pre.maps)


def test_pre_saliency_rows_follow_stimuli(parts):
    saa_depth, _, stim, _ = parts
    pre = pre_saliency(stim, saa_depth).maps
    one = StimulusSet(stim.rgb[2:], stim.depth[2:], ["s2"])
    assert torch.allclose(pre_saliency(one, saa_depth).maps[0], pre[2], atol=1e-5)


def test_fuse_subject(parts):
    saa_depth, saa_gaze, stim, normals = parts
    pre = pre_saliency(stim, saa_depth)
    a = fuse_subject(pre, normals[0], saa_gaze)
    b = fuse_subject(pre, normals[1], saa_gaze)
    assert a.maps.shape == pre.maps.shape and a.provenance == "subject(n0)"
    assert not torch.allclose(a.maps, b.maps)
    with pytest.raises(DimensionError):
        fuse_subject(pre, HeatmapStack(torch.zeros(2, 3, 16, 16), "bad"), saa_gaze)


def test_batched_subjects_match_single(parts):
    saa_depth, saa_gaze, stim, normals = parts
    pre = pre_saliency(stim, saa_depth)
    heat = torch.stack([h.maps for h in normals[:2]])
    batched = fuse_subjects(pre, heat, saa_gaze)
    for i in range(2):
        assert torch.allclose(batched[i], fuse_subject(pre, normals[i], saa_gaze).maps, atol=1e-5)
    with pytest.raises(DimensionError):
        fuse_subjects(pre, heat[:, :2], saa_gaze)


def test_gradient_reaches_gaze_weights(parts):
    saa_depth, saa_gaze, stim, normals = parts
    saa_gaze.zero_grad()
    pre = pre_saliency(stim, saa_depth)
    fuse_subject(pre, normals[0], saa_gaze).maps.square().sum().backward()
    grads = [p.grad for p in saa_gaze.parameters()]
    assert all(g is not None for g in grads)
    assert sum(g.abs().sum() for g in grads) > 0
    saa_gaze.zero_grad()
    saa_depth.zero_grad()


def test_normals_empty_and_call_count(parts):
    saa_depth, saa_gaze, stim, normals = parts
    pre = pre_saliency(stim, saa_depth)
    same = fuse_normals_iterative(pre, [], saa_gaze)
    assert torch.equal(same.maps, pre.maps) and same.iterations == 0
    for n in (1, 2, 3):
        counter = CallCounter(saa_gaze)
        out = fuse_normals_iterative(pre, normals[:n], saa_gaze)
        counter.handle.remove()
        assert counter.calls == n
        assert out.iterations == n and out.provenance == f"comprehensive({n})"


def test_normals_compose_and_order(parts):
    saa_depth, saa_gaze, stim, normals = parts
    with torch.no_grad():
        pre = pre_saliency(stim, saa_depth)
        twice = fuse_normals_iterative(pre, normals[:2], saa_gaze).maps
        manual = saa_gaze(saa_gaze(pre.maps, normals[0].maps), normals[1].maps)
        assert torch.equal(twice, manual)
        swapped = fuse_normals_iterative(pre, normals[:2][::-1], saa_gaze).maps
        assert not torch.allclose(twice, swapped)


def test_normals_dump(parts, tmp_path):
    saa_depth, saa_gaze, stim, normals = parts
    with torch.no_grad():
        pre = pre_saliency(stim, saa_depth)
        out = fuse_normals_iterative(pre, normals[:2], saa_gaze, dump_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["iter_000.dscnt", "iter_001.dscnt", "iter_002.dscnt"]
    assert torch.equal(load_tensor(tmp_path / "iter_002.dscnt"), out.maps)


def test_normals_shape_mismatch(parts):
    saa_depth, saa_gaze, stim, _ = parts
    pre = SaliencyMaps(stim.rgb, "preliminary")
    with pytest.raises(DimensionError):
        fuse_normals_iterative(pre, [HeatmapStack(torch.zeros(1, 3, 16, 16), "x")], saa_gaze)
