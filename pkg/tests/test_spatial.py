import math

import numpy as np
import pytest
import torch
from conftest import grad_check

from qualia.errors import ValidationError
from qualia.spatial import (ConvHead, FragmentSpec, StubBackbone, TinyBackbone,
                            backbone_features, build_backbone, flatten_features,
                            fragment_cache_meta, sample_fragments, video_seed)


def gelu(x: float) -> float:
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def coordinate_clip(t: int, h: int, w: int) -> np.ndarray:
    """Channel 0 encodes x, channel 1 encodes y, channel 2 encodes frame index."""
    clip = np.empty((t, h, w, 3), dtype=np.float32)
    ys = np.linspace(0.0, 1.0, h, dtype=np.float32)[:, None]
    xs = np.linspace(0.0, 1.0, w, dtype=np.float32)[None, :]
    for i in range(t):
        clip[i, :, :, 0] = xs
        clip[i, :, :, 1] = ys
        clip[i, :, :, 2] = i / max(t - 1, 1)
    return clip


class TestFragmentSampling:
    def test_exact_tiling_identity(self):
        # 224x224 frame with 7x32 geometry: every region equals its patch,
        # so offsets are forced to the region origin and sampling is the identity
        clip = coordinate_clip(4, 224, 224)
        spec = FragmentSpec(grid_f=7, patch=32, frames_out=4, seed=123)
        out = sample_fragments(clip, spec)
        np.testing.assert_array_equal(out, clip)

    def test_output_side_is_grid_times_patch(self):
        clip = coordinate_clip(6, 360, 640)
        out = sample_fragments(clip, FragmentSpec(grid_f=7, patch=32, frames_out=4, seed=1))
        assert out.shape == (4, 224, 224, 3)

    def test_fixed_seed_deterministic(self):
        clip = coordinate_clip(8, 300, 400)
        spec = FragmentSpec(grid_f=7, patch=32, frames_out=4, seed=99)
        a = sample_fragments(clip, spec)
        b = sample_fragments(clip, spec)
        assert a.tobytes() == b.tobytes()

    def test_different_seeds_change_offsets(self):
        clip = coordinate_clip(8, 300, 400)
        a = sample_fragments(clip, FragmentSpec(grid_f=7, patch=32, frames_out=4, seed=1))
        b = sample_fragments(clip, FragmentSpec(grid_f=7, patch=32, frames_out=4, seed=2))
        assert not np.array_equal(a, b)

    def test_temporal_alignment_same_offsets_every_frame(self):
        clip = coordinate_clip(6, 448, 512)
        out = sample_fragments(clip, FragmentSpec(grid_f=7, patch=32, frames_out=6, seed=5))
        # x/y channels must be identical across output frames; only the
        # frame-index channel may differ
        for t in range(1, 6):
            np.testing.assert_array_equal(out[t, :, :, 0], out[0, :, :, 0])
            np.testing.assert_array_equal(out[t, :, :, 1], out[0, :, :, 1])

    def test_contiguous_frame_run(self):
        t_total = 10
        clip = coordinate_clip(t_total, 224, 224)
        out = sample_fragments(clip, FragmentSpec(grid_f=7, patch=32, frames_out=4, seed=3))
        codes = [float(out[t, 0, 0, 2]) for t in range(4)]
        steps = np.diff(codes)
        np.testing.assert_allclose(steps, 1.0 / (t_total - 1), atol=1e-6)

    def test_pixel_exact_provenance(self):
        t, h, w = 3, 288, 352
        clip = coordinate_clip(t, h, w)
        out = sample_fragments(clip, FragmentSpec(grid_f=7, patch=32, frames_out=3, seed=11))
        # decode source coordinates from the output values themselves and
        # confirm each output pixel is a verbatim input pixel
        xs = np.rint(out[0, :, :, 0] * (w - 1)).astype(int)
        ys = np.rint(out[0, :, :, 1] * (h - 1)).astype(int)
        start = int(np.rint(out[0, 0, 0, 2] * (t - 1)))
        for ti in range(3):
            np.testing.assert_array_equal(out[ti], clip[start + ti, ys, xs])

    def test_repeat_pad_when_clip_too_short(self):
        clip = coordinate_clip(2, 224, 224)
        with pytest.warns(UserWarning, match="repeating"):
            out = sample_fragments(clip, FragmentSpec(grid_f=7, patch=32, frames_out=5, seed=0))
        assert out.shape[0] == 5
        np.testing.assert_array_equal(out[2], out[4])

    def test_degenerate_frames_rejected(self):
        clip = coordinate_clip(2, 16, 16)
        with pytest.raises(ValidationError, match="smaller than patch"):
            sample_fragments(clip, FragmentSpec(grid_f=7, patch=32, frames_out=2, seed=0))

    def test_regions_narrower_than_patch_stay_in_bounds(self):
        # 200px / 7 regions ~ 28px < patch 32: offsets clamp to the frame
        clip = coordinate_clip(2, 200, 200)
        out = sample_fragments(clip, FragmentSpec(grid_f=7, patch=32, frames_out=2, seed=4))
        assert out.shape == (2, 224, 224, 3)
        values = set(np.unique(clip[0, :, :, 0]))
        assert set(np.unique(out[0, :, :, 0])) <= values

    def test_video_seed_stable(self):
        assert video_seed(7, "clip1") == video_seed(7, "clip1")
        assert video_seed(7, "clip1") != video_seed(7, "clip2")
        assert video_seed(8, "clip1") != video_seed(7, "clip1")

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            FragmentSpec(grid_f=0)
        with pytest.raises(ValidationError):
            FragmentSpec(frames_out=0)

    def test_meta_has_empty_prompt_digest(self):
        meta = fragment_cache_meta(FragmentSpec(), "0.1.0", "src")
        assert meta["prompt_digest"] == ""


class TestStubBackbone:
    def test_deterministic_and_frozen(self):
        stub = StubBackbone(seed=3)
        clip = torch.rand(2, 3, 8, 224, 224, generator=torch.Generator().manual_seed(0))
        a = stub(clip)
        b = stub(clip)
        assert torch.equal(a, b)
        assert list(stub.parameters()) == []

    def test_output_contract(self):
        stub = StubBackbone(seed=1)
        clip = torch.rand(1, 3, 16, 224, 224)
        out = backbone_features(clip, stub)
        assert out.shape == (1, 64, 8, 7, 7)
        assert StubBackbone.t_out(16) == 8
        assert StubBackbone.t_out(1) == 1

    def test_input_sensitive(self):
        stub = StubBackbone(seed=1)
        a = stub(torch.zeros(1, 3, 4, 224, 224))
        b = stub(torch.ones(1, 3, 4, 224, 224))
        assert not torch.equal(a, b)


class TestTinyBackbone:
    def test_zero_clip_zero_output(self):
        tiny = TinyBackbone(seed=0)
        out = tiny(torch.zeros(2, 3, 8, 224, 224))
        assert torch.equal(out, torch.zeros_like(out))

    def test_shape_contract_various_lengths(self):
        tiny = TinyBackbone(seed=0)
        for frames in (4, 8, 16):
            clip = torch.rand(1, 3, frames, 224, 224)
            out = backbone_features(clip, tiny)
            assert out.shape == (1, 64, TinyBackbone.t_out(frames), 7, 7)

    def test_seed_controls_init(self):
        a = TinyBackbone(seed=1)
        b = TinyBackbone(seed=1)
        c = TinyBackbone(seed=2)
        assert torch.equal(a.conv1.weight, b.conv1.weight)
        assert not torch.equal(a.conv1.weight, c.conv1.weight)


class TestBackboneFactory:
    def test_known_kinds(self):
        assert isinstance(build_backbone("stub"), StubBackbone)
        assert isinstance(build_backbone("tiny"), TinyBackbone)

    def test_unknown_kind(self):
        with pytest.raises(ValidationError, match="unknown backbone"):
            build_backbone("resnet")

    def test_external_requires_weights(self):
        with pytest.raises(ValidationError, match="weights_path"):
            build_backbone("external")

    def test_contract_violation_detected(self):
        class Bad(torch.nn.Module):
            def forward(self, clip):
                return clip.mean(dim=(1, 2))

        with pytest.raises(ValidationError, match="contract"):
            backbone_features(torch.rand(1, 3, 4, 224, 224), Bad())

    def test_external_torchscript_backbone(self, tmp_path):
        class Scripted(torch.nn.Module):
            def forward(self, clip):
                return torch.nn.functional.adaptive_avg_pool3d(clip, (2, 7, 7))

        path = tmp_path / "bb.pt"
        torch.jit.script(Scripted()).save(str(path))
        backbone = build_backbone("external", weights_path=str(path), frames_in=4)
        assert backbone.out_channels == 3
        assert backbone.t_out(4) == 2
        out = backbone_features(torch.rand(2, 3, 4, 224, 224), backbone)
        assert out.shape == (2, 3, 2, 7, 7)

    def test_external_backbone_with_bad_rank_rejected(self, tmp_path):
        class Flat(torch.nn.Module):
            def forward(self, clip):
                return clip.mean(dim=(2, 3, 4))

        path = tmp_path / "flat.pt"
        torch.jit.script(Flat()).save(str(path))
        with pytest.raises(ValidationError, match="external backbone"):
            build_backbone("external", weights_path=str(path), frames_in=4)


class TestConvHead:
    def test_zero_parameters_zero_output(self):
        head = ConvHead(in_channels=8, seed=0)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
        out = head(torch.rand(1, 8, 2, 7, 7))
        assert torch.equal(out, torch.zeros_like(out))

    def test_channel_reduction_c_to_half_to_one(self):
        head = ConvHead(in_channels=64, seed=0)
        assert head.conv1.out_channels == 32
        assert head.conv2.out_channels == 1
        out = head(torch.rand(2, 64, 8, 7, 7))
        assert out.shape == (2, 1, 8, 7, 7)

    def test_constant_input_closed_form(self):
        head = ConvHead(in_channels=2, seed=0).double()
        w1, w2, b1 = 0.3, -0.2, 0.1
        w3, b3 = 1.7, 0.05
        c1, c2 = 0.6, -0.4
        with torch.no_grad():
            head.conv1.weight.copy_(torch.tensor([[[[[w1]]], [[[w2]]]]], dtype=torch.float64))
            head.conv1.bias.fill_(b1)
            head.conv2.weight.fill_(w3)
            head.conv2.bias.fill_(b3)
        x = torch.empty(1, 2, 2, 3, 3, dtype=torch.float64)
        x[:, 0] = c1
        x[:, 1] = c2
        out = head(x).detach().numpy()
        expected = w3 * gelu(w1 * c1 + w2 * c2 + b1) + b3
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_channel_mismatch_raises(self):
        head = ConvHead(in_channels=8)
        with pytest.raises(RuntimeError):
            head(torch.rand(1, 4, 2, 7, 7))

    def test_gradients_match_finite_differences(self):
        head = ConvHead(in_channels=4, seed=5).double()
        x = torch.rand(1, 4, 2, 3, 3, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(1))

        def loss_fn():
            return head(x).square().sum()

        checked = grad_check(head.parameters(), loss_fn)
        assert checked == sum(p.numel() for p in head.parameters())


class TestFlatten:
    def test_tiny_tensor(self):
        x = torch.tensor([[[[1.0]], [[2.0]]]]).reshape(1, 2, 1, 1)
        flat = flatten_features(x)
        np.testing.assert_array_equal(flat.numpy(), [1.0, 2.0])

    def test_reshape_round_trip(self):
        x = torch.rand(2, 3, 4, 5, generator=torch.Generator().manual_seed(2))
        flat = flatten_features(x)
        assert torch.equal(flat.reshape(2, 3, 4, 5), x)

    def test_length_is_dim_product(self):
        rng = np.random.Generator(np.random.PCG64(7))
        for _ in range(20):
            shape = tuple(int(rng.integers(1, 5)) for _ in range(4))
            x = torch.rand(shape)
            assert flatten_features(x).numel() == int(np.prod(shape))

    def test_batched_keeps_leading_dim(self):
        x = torch.rand(3, 1, 2, 7, 7)
        assert flatten_features(x).shape == (3, 98)
