import numpy as np
import pytest
import torch

from dakd.models import (Discriminator, DiscriminatorConfig, ParamSnapshot,
                         STUDENT_PRESET, SegNetConfig, TEACHER_PRESET,
                         build_discriminator, build_segnet, freeze,
                         load_checkpoint, save_checkpoint, snapshot)


def conv_out(h, kernel, stride, padding):
    return (h + 2 * padding - kernel) // stride + 1


def test_depth_must_leave_room_for_tap():
    with pytest.raises(ValueError):
        SegNetConfig(depth=1)


def test_build_is_deterministic():
    a = snapshot(build_segnet(STUDENT_PRESET, seed=3))
    b = snapshot(build_segnet(STUDENT_PRESET, seed=3))
    c = snapshot(build_segnet(STUDENT_PRESET, seed=4))
    assert a == b
    assert a != c


def test_teacher_has_more_parameters_than_student():
    t = build_segnet(TEACHER_PRESET, seed=0)
    s = build_segnet(STUDENT_PRESET, seed=0)
    assert t.param_count() > s.param_count()


def test_presets_share_tap_width_and_output_shape():
    assert TEACHER_PRESET.feature_tap_width == STUDENT_PRESET.feature_tap_width
    assert TEACHER_PRESET.num_classes == STUDENT_PRESET.num_classes
    t = build_segnet(TEACHER_PRESET, seed=0)
    s = build_segnet(STUDENT_PRESET, seed=0)
    x = torch.rand(1, 64, 64, 3)
    assert t(x).feature.shape[-1] == s(x).feature.shape[-1]
    assert t(x).main_logits.shape == s(x).main_logits.shape


def test_forward_shapes():
    net = build_segnet(STUDENT_PRESET, seed=0)
    out = net(torch.rand(2, 64, 64, 3))
    assert out.aux_logits.shape == (2, 64, 64, 6)
    assert out.main_logits.shape == (2, 64, 64, 6)


def test_forward_determinism():
    net = build_segnet(STUDENT_PRESET, seed=0)
    net.eval()
    x = torch.rand(1, 64, 64, 3, generator=torch.Generator().manual_seed(5))
    a = net(x)
    b = net(x)
    assert torch.equal(a.main_logits, b.main_logits)
    assert torch.equal(a.feature, b.feature)


def test_head_softmax_is_valid_probability():
    net = build_segnet(STUDENT_PRESET, seed=1)
    out = net(torch.rand(1, 32, 32, 3))
    for logits in (out.aux_logits, out.main_logits):
        p = torch.softmax(logits, dim=-1)
        assert torch.all(p >= 0)
        assert torch.allclose(p.sum(dim=-1), torch.ones(1), atol=1e-5)


class TestDiscriminator:
    def test_deterministic_init(self):
        a = snapshot(build_discriminator(DiscriminatorConfig(), seed=7))
        b = snapshot(build_discriminator(DiscriminatorConfig(), seed=7))
        assert a == b

    def test_output_in_open_unit_interval(self):
        d = build_discriminator(DiscriminatorConfig(), seed=0)
        out = d(torch.softmax(torch.randn(2, 64, 64, 6), dim=-1))
        assert torch.all(out > 0) and torch.all(out < 1)

    def test_output_spatial_dims_match_conv_arithmetic(self):
        cfg = DiscriminatorConfig(in_channels=6, width=16, depth=4)
        d = build_discriminator(cfg, seed=0)
        for size in (64, 48, 32):
            out = d(torch.softmax(torch.randn(1, size, size, 6), dim=-1))
            h = size
            for _ in range(cfg.depth):
                h = conv_out(h, kernel=4, stride=2, padding=1)
            h = conv_out(h, kernel=3, stride=1, padding=1)
            assert out.shape == (1, h, h)

    def test_channel_mismatch_rejected(self):
        d = build_discriminator(DiscriminatorConfig(in_channels=6), seed=0)
        with pytest.raises(ValueError):
            d(torch.rand(1, 16, 16, 4))


class TestFreeze:
    def test_frozen_params_have_no_grad(self):
        net = freeze(build_segnet(STUDENT_PRESET, seed=0))
        out = net(torch.rand(1, 32, 32, 3))
        loss = out.main_logits.sum()
        assert not loss.requires_grad

    def test_student_updates_while_teacher_does_not(self):
        teacher = freeze(build_segnet(STUDENT_PRESET, seed=0))
        student = build_segnet(STUDENT_PRESET, seed=1)
        opt = torch.optim.SGD(student.parameters(), lr=0.1)
        before_t = snapshot(teacher)
        before_s = snapshot(student)
        x = torch.rand(1, 32, 32, 3)
        for _ in range(3):
            opt.zero_grad()
            s_out = student(x)
            with torch.no_grad():
                t_out = teacher(x)
            loss = ((torch.softmax(s_out.main_logits, -1)
                     - torch.softmax(t_out.main_logits, -1)) ** 2).sum()
            loss.backward()
            opt.step()
        assert snapshot(teacher) == before_t
        assert snapshot(student) != before_s


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        net = build_segnet(STUDENT_PRESET, seed=9)
        stem = tmp_path / "ckpt"
        save_checkpoint(stem, net, iteration=123)
        loaded, iteration = load_checkpoint(stem)
        assert iteration == 123
        assert snapshot(loaded) == snapshot(net)

    def test_header_lists_all_tensors(self, tmp_path):
        import json
        net = build_discriminator(DiscriminatorConfig(), seed=0)
        stem = tmp_path / "d"
        save_checkpoint(stem, net, iteration=0)
        header = json.loads((tmp_path / "d.json").read_text())
        names = {e["name"] for e in header["tensors"]}
        assert names == set(net.state_dict().keys())
        blob = (tmp_path / "d.bin").read_bytes()
        total = sum(int(np.prod(e["shape"])) for e in header["tensors"])
        assert len(blob) == 4 * total

    def test_rebuild_from_stored_config(self, tmp_path):
        cfg = SegNetConfig(num_classes=4, base_width=8, depth=3,
                           feature_tap_width=8, input_size=(32, 32))
        net = build_segnet(cfg, seed=2)
        stem = tmp_path / "c"
        save_checkpoint(stem, net, iteration=7)
        loaded, _ = load_checkpoint(stem)
        assert loaded.cfg == cfg
        x = torch.rand(1, 32, 32, 3)
        net.eval(), loaded.eval()
        assert torch.equal(net(x).main_logits, loaded(x).main_logits)

    def test_snapshot_equality_semantics(self):
        a = ParamSnapshot({"w": np.arange(3.0)}, iteration=1)
        b = ParamSnapshot({"w": np.arange(3.0)}, iteration=1)
        c = ParamSnapshot({"w": np.arange(3.0) + 1}, iteration=1)
        assert a == b
        assert a != c
