"""Model specs, presets, building and the two execution paths."""

from math import ceil

import numpy as np
import pytest

from sdbnn import autograd as ag
from sdbnn import models as M
from sdbnn.models import BinPolicy, ModelSpec, SpecError, UnsupportedModeError


class TestModelSpec:
    def test_text_round_trip(self):
        for preset in (M.lenet(), M.vgg_small_lite(), M.resnet20(), M.micro2()):
            text = preset.to_text()
            again = ModelSpec.from_text(text)
            assert again.to_text() == text

    def test_unknown_kind_rejected(self):
        with pytest.raises(SpecError):
            ModelSpec.from_text("a warp inputs=input\n")

    def test_forward_reference_rejected(self):
        text = "a add inputs=input,b\nb gap inputs=input\n"
        with pytest.raises(SpecError):
            ModelSpec.from_text(text)

    def test_duplicate_name_rejected(self):
        text = "a gap inputs=input\na gap inputs=input\n"
        with pytest.raises(SpecError):
            ModelSpec.from_text(text)

    def test_bad_policy_value_rejected(self):
        with pytest.raises(SpecError):
            ModelSpec.from_text("a binconv in=2 out=2 k=1 stride=1 pad=0 asd=bogus inputs=input\n")


class TestPaperPolicy:
    @pytest.mark.parametrize("spec_fn", [M.lenet, M.vgg_small_lite, M.resnet20])
    def test_presets_keep_first_and_last_full_precision(self, spec_fn):
        spec = spec_fn()
        M.assert_paper_policy(spec)
        convs = spec.conv_layers()
        # exactly the first conv and the classifier hold 32-bit weights
        assert convs[0].kind == "conv"
        assert all(l.kind == "binconv" for l in convs[1:])
        assert spec.layers[-1].kind == "linear"

    def test_policy_violation_detected(self):
        spec = ModelSpec.from_text(
            "c1 binconv in=1 out=2 k=3 stride=1 pad=1 asd=off wsd=off inputs=input\n"
            "g gap inputs=c1\n"
            "fc linear in=2 out=10 inputs=g\n")
        with pytest.raises(SpecError):
            M.assert_paper_policy(spec)


class TestBuild:
    def test_same_seed_is_bit_identical(self):
        a = M.build(M.lenet(), seed=5)
        b = M.build(M.lenet(), seed=5)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        a = M.build(M.lenet(), seed=5)
        b = M.build(M.lenet(), seed=6)
        assert any(not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)

    def test_lenet_logits_shape(self):
        m = M.build(M.lenet(), seed=0)
        assert M.logits_shape_trace(m, (4, 1, 28, 28)) == (4, 10)

    def test_resnet20_structure(self):
        spec = M.resnet20()
        m = M.build(spec, seed=0)
        assert M.logits_shape_trace(m, (2, 3, 32, 32)) == (2, 10)
        binary = [l for l in spec.conv_layers() if l.kind == "binconv"]
        assert len(binary) == 18  # 3 stages x 3 blocks x 2 convs
        widths = sorted({m.geoms[l.name].out_channels for l in binary})
        assert widths == [16, 32, 64]

    def test_vgg_small_lite_width_flag(self):
        lite = M.build(M.vgg_small_lite(), seed=0)
        full = M.build(M.vgg_small_lite(full_width=True), seed=0)
        assert lite.geoms["b5"].out_channels * 2 == full.geoms["b5"].out_channels

    def test_dasd_parameter_count_formula(self):
        policy = BinPolicy(dasd=True, re=3, wsd=False)
        spec = M.micro2(policy)
        m = M.build(spec, seed=0)
        for name, head in m.dasd_heads.items():
            c = m.geoms[name].in_channels
            hidden = max(1, ceil(c / 3))
            assert head.param_count() == c * hidden * 2 + hidden + c

    def test_bireal_variant_builds_and_runs(self):
        m = M.build(M.resnet20(bireal_shortcuts=True), seed=0)
        assert M.logits_shape_trace(m, (1, 3, 32, 32)) == (1, 10)


class TestForwardPaths:
    @pytest.mark.parametrize("preset,shape", [
        (M.micro2, (3, 2, 6, 6)),
        (M.lenet, (2, 1, 28, 28)),
    ])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_packed_equals_surrogate_eval(self, preset, shape, seed):
        m = M.build(preset(), seed=seed)
        x = np.random.default_rng(seed + 100).standard_normal(shape).astype(np.float32)
        s = M.forward(m, x, mode="eval", path="surrogate").data
        p = M.forward(m, x, mode="eval", path="packed")
        np.testing.assert_allclose(s, p, atol=1e-4)

    def test_resnet20_packed_equals_surrogate(self):
        m = M.build(M.resnet20(), seed=0)
        x = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32)
        s = M.forward(m, x, mode="eval", path="surrogate").data
        p = M.forward(m, x, mode="eval", path="packed")
        np.testing.assert_allclose(s, p, atol=1e-4)

    def test_packed_train_mode_rejected(self):
        m = M.build(M.micro2(), seed=0)
        with pytest.raises(UnsupportedModeError):
            M.forward(m, np.zeros((1, 2, 6, 6), np.float32), mode="train", path="packed")

    def test_all_zero_input_stays_finite(self):
        m = M.build(M.lenet(), seed=0)
        out = M.forward(m, np.zeros((2, 1, 28, 28), np.float32), mode="eval")
        assert np.all(np.isfinite(out.data))

    def test_stats_collection_covers_binary_layers(self):
        m = M.build(M.micro2(), seed=0)
        x = np.random.default_rng(1).standard_normal((2, 2, 6, 6)).astype(np.float32)
        _, stats = M.forward(m, x, mode="eval", collect_stats=True)
        assert set(stats) == {"b1", "b2"}

    def test_scale_modes_run_both_paths(self):
        for scale in ("analytic", "learned"):
            policy = BinPolicy(asd="sigmoid", wsd=True, scale=scale)
            m = M.build(M.micro2(policy), seed=0)
            x = np.random.default_rng(2).standard_normal((2, 2, 6, 6)).astype(np.float32)
            s = M.forward(m, x, mode="eval", path="surrogate").data
            p = M.forward(m, x, mode="eval", path="packed")
            assert np.all(np.isfinite(s)) and np.all(np.isfinite(p))

    def test_train_forward_gradients_reach_every_parameter(self):
        m = M.build(M.micro2(), seed=0)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 2, 6, 6)).astype(np.float32)
        y = rng.integers(0, 4, 5)
        with ag.Tape() as tape:
            logits = M.forward(m, x, mode="train")
            loss = ag.softmax_cross_entropy(logits, y)
            tape.backward(loss)
        for name, p in m.params.items():
            assert p.grad is not None, f"{name} missing gradient"

    def test_train_mode_updates_bn_running_stats(self):
        m = M.build(M.micro2(), seed=0)
        before = m.bn_states["n1"].running_mean.copy()
        x = np.random.default_rng(4).standard_normal((8, 2, 6, 6)).astype(np.float32) + 3.0
        with ag.Tape():
            M.forward(m, x, mode="train")
        assert not np.array_equal(before, m.bn_states["n1"].running_mean)
