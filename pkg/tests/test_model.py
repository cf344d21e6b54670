import math

import numpy as np
import pytest

from vcp import tensorcore as tc
from vcp.errors import CheckpointError, DimensionError, ValidationError
from vcp.model import (BackboneConfig, Checkpoint, ClozeNetwork, StageConfig, decode_checkpoint,
                       encode_checkpoint, gradcheck_suite, init_parameters, load_checkpoint,
                       network_from_checkpoint, save_checkpoint)
from vcp.model import INPUT_SCALE

from reference import naive_conv3d, naive_maxpool3d

SMALL = BackboneConfig(stages=(StageConfig(3, pool=(1, 2, 2)), StageConfig(4, pool=None)), input_shape=(2, 4, 6, 6))


def clips(rng, b, m=3, shape=(3, 8, 16, 16), dtype=np.float32):
    return rng.uniform(0, 1, size=(b, m) + shape).astype(dtype)


class TestConfig:
    def test_desk_defaults(self):
        c = BackboneConfig()
        assert [s.out_channels for s in c.stages] == [8, 16, 32, 64]
        assert c.input_shape == (3, 8, 16, 16) and c.feature_dim == 64
        assert all(s.kernel == (3, 3, 3) for s in c.stages)

    def test_dict_round_trip(self):
        c = BackboneConfig()
        assert BackboneConfig.from_dict(c.to_dict()) == c

    def test_pool_too_large(self):
        with pytest.raises(ValidationError, match="pool"):
            BackboneConfig(stages=(StageConfig(2, pool=(2, 2, 2)),) * 5, input_shape=(1, 8, 8, 8))

    def test_even_kernel_rejected(self):
        with pytest.raises(ValidationError):
            StageConfig(4, kernel=(2, 3, 3))


class TestInit:
    def test_same_seed_same_params(self):
        a, b = init_parameters(BackboneConfig(), 3), init_parameters(BackboneConfig(), 3)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        c = init_parameters(BackboneConfig(), 4)
        assert a["backbone.conv0.weight"].tobytes() != c["backbone.conv0.weight"].tobytes()

    def test_he_variance(self):
        p = init_parameters(BackboneConfig(), 0)
        w = p["backbone.conv3.weight"]  # 64 x 32 x 27 >= 10^4 samples
        assert w.size >= 10_000
        fan_in = 32 * 27
        assert abs(w.astype(np.float64).var() / (2 / fan_in) - 1) < 0.10

    def test_biases_zero(self):
        p = init_parameters(BackboneConfig(), 0)
        assert all(not p[k].any() for k in p if k.endswith(".bias"))

    def test_head_shapes(self):
        p = init_parameters(BackboneConfig(), 0, clips_per_item=3, num_action_classes=10)
        assert p["head_vcp.weight"].shape == (5, 192)
        assert p["head_probe.weight"].shape == (5, 192)
        assert p["head_action.weight"].shape == (10, 64)


class TestBackbone:
    def test_zero_input_zero_features(self):
        net = ClozeNetwork(BackboneConfig(), seed=1)
        feats = net.extract_conv5(np.zeros((2, 3, 8, 16, 16), np.float32))
        assert feats.shape == (2, 64) and not feats.any()

    def test_constant_input_is_bias_propagation(self, rng):
        net = ClozeNetwork(BackboneConfig(), seed=1)
        for k in net.backbone_names():
            if k.endswith(".bias"):
                net.params[k] = rng.uniform(-0.5, 0.5, net.params[k].shape).astype(np.float32)
        zero = net.extract_conv5(np.zeros((2, 3, 8, 16, 16), np.float32))
        for c in (0.25, 1.0):
            const = net.extract_conv5(np.full((2, 3, 8, 16, 16), c, np.float32))
            assert const[0].tobytes() == const[1].tobytes() == zero[0].tobytes()
        assert zero.any()

    def test_channel_offsets_survive_centring(self):
        net = ClozeNetwork(BackboneConfig(), seed=1)
        x = np.zeros((1, 3, 8, 16, 16), np.float32)
        x[:, 2] = 0.5
        assert net.extract_conv5(x).any()

    def test_identical_rows(self, rng):
        net = ClozeNetwork(BackboneConfig(), seed=1)
        x = np.repeat(clips(rng, 1, 1)[:, 0], 3, axis=0)
        f = net.extract_conv5(x)
        assert f[0].tobytes() == f[1].tobytes() == f[2].tobytes()

    def test_matches_naive_forward(self, rng):
        net = ClozeNetwork(SMALL, seed=2).astype(np.float64)
        for k in net.params:
            if k.endswith(".bias"):
                net.params[k] = rng.standard_normal(net.params[k].shape)
        for x in (np.zeros((2,) + SMALL.input_shape), rng.uniform(0, 1, (2,) + SMALL.input_shape)):
            h = (x - x.mean(axis=(1, 2, 3, 4), keepdims=True)) * INPUT_SCALE
            for i, (spec, st) in enumerate(zip(net.specs, SMALL.stages)):
                h = np.maximum(naive_conv3d(h, net.params[f"backbone.conv{i}.weight"],
                                            net.params[f"backbone.conv{i}.bias"], spec), 0)
                if st.pool:
                    h = naive_maxpool3d(h, st.pool, st.pool)
            np.testing.assert_allclose(net.extract_conv5(x), h.mean(axis=(2, 3, 4)), rtol=1e-10, atol=1e-12)

    def test_extract_equals_forward_and_normalizes(self, rng):
        net = ClozeNetwork(BackboneConfig(), seed=1)
        x = clips(rng, 4, 1)[:, 0]
        f, _ = net.backbone_forward(x)
        assert net.extract_conv5(x).tobytes() == f.tobytes()
        unit = net.extract_conv5(x, normalize=True)
        np.testing.assert_allclose(np.linalg.norm(unit.astype(np.float64), axis=1), 1.0, atol=1e-6)

    def test_extent_mismatch(self):
        net = ClozeNetwork(BackboneConfig())
        with pytest.raises(DimensionError):
            net.backbone_forward(np.zeros((1, 3, 8, 16, 15), np.float32))
        with pytest.raises(DimensionError):
            net.cloze_forward(np.zeros((1, 2, 3, 8, 16, 16), np.float32))

    def test_finite_and_deterministic(self, rng):
        net = ClozeNetwork(BackboneConfig(), seed=3)
        x = clips(rng, 2, 1)[:, 0]
        a, b = net.extract_conv5(x), net.extract_conv5(x.copy())
        assert np.all(np.isfinite(a)) and a.tobytes() == b.tobytes()


class TestClozeNetwork:
    def test_head_input_width(self, rng):
        net = ClozeNetwork(BackboneConfig())
        feats, _ = net.cloze_features(clips(rng, 2))
        assert feats.shape == (2, 192)
        logits, _ = net.cloze_forward(clips(rng, 2))
        assert logits.shape == (2, 5)

    def test_concatenation_follows_clip_order(self, rng):
        net = ClozeNetwork(BackboneConfig(), seed=5)
        x = clips(rng, 1)
        feats, _ = net.cloze_features(x)
        for i in range(3):
            np.testing.assert_allclose(feats[0, 64 * i : 64 * (i + 1)], net.extract_conv5(x[:, i])[0], rtol=1e-5)
        swapped = x[:, [1, 0, 2]]
        fs, _ = net.cloze_features(swapped)
        np.testing.assert_array_equal(fs[0, :64], feats[0, 64:128])
        np.testing.assert_array_equal(fs[0, 64:128], feats[0, :64])

    def test_order_changes_logits(self, rng):
        net = ClozeNetwork(BackboneConfig(), seed=5)
        x = clips(rng, 1)
        a, _ = net.cloze_forward(x)
        b, _ = net.cloze_forward(x[:, [2, 1, 0]])
        assert not np.allclose(a, b)

    def test_towers_stay_shared_after_step(self, rng):
        net = ClozeNetwork(BackboneConfig(), seed=5)
        one = clips(rng, 1, 1)
        x = np.repeat(one, 3, axis=1)
        logits, cache = net.cloze_forward(x)
        _, g = tc.softmax_cross_entropy(logits, np.array([2]))
        grads = net.cloze_backward(g, cache)
        state = tc.OptimState()
        for k, v in grads.items():
            tc.sgd_momentum_step(net.params[k], v, state, k)
        feats, _ = net.cloze_features(x)
        assert feats[0, :64].tobytes() == feats[0, 64:128].tobytes() == feats[0, 128:].tobytes()
        assert len(net.backbone_names()) == 8

    def test_action_head(self, rng):
        net = ClozeNetwork(BackboneConfig(), num_action_classes=10)
        x = clips(rng, 3, 1)[:, 0]
        x[1] = x[0]
        logits, _ = net.action_forward(x)
        assert logits.shape == (3, 10)
        assert logits[0].tobytes() == logits[1].tobytes()
        np.testing.assert_allclose(tc.softmax(logits).sum(axis=1), 1.0, atol=1e-6)

    def test_initial_loss_near_chance(self, rng):
        net = ClozeNetwork(BackboneConfig(), seed=0)
        logits, _ = net.cloze_forward(clips(rng, 40))
        loss, _ = tc.softmax_cross_entropy(logits, np.arange(40) % 5)
        assert abs(loss - math.log(5)) / math.log(5) < 0.01


class TestGradients:
    def test_suite_passes(self):
        report = gradcheck_suite(0)
        assert max(report["layers"].values()) <= 1e-5
        assert max(report["end_to_end"].values()) <= 1e-4

    @pytest.mark.parametrize("seed", [1, 2])
    def test_action_path(self, seed):
        rng = np.random.default_rng(seed)
        net = ClozeNetwork(SMALL, num_action_classes=3, seed=seed).astype(np.float64)
        net.params["head_action.weight"] = rng.standard_normal(net.params["head_action.weight"].shape)
        x = rng.uniform(0, 1, (2,) + SMALL.input_shape)
        y = np.array([0, 2])

        def loss():
            return tc.softmax_cross_entropy(net.action_forward(x)[0], y)[0]

        logits, cache = net.action_forward(x)
        grads = net.action_backward(tc.softmax_cross_entropy(logits, y)[1], cache)
        for name in net.backbone_names() + net.head_names("head_action"):
            assert tc.finite_diff_gradcheck(lambda p: loss(), net.params[name], grads[name], 1e-6) <= 1e-4

    def test_input_gradient(self, rng):
        net = ClozeNetwork(SMALL, seed=3).astype(np.float64)
        x = rng.uniform(0, 1, (2,) + SMALL.input_shape)
        probe = rng.standard_normal((2, SMALL.feature_dim))
        feats, cache = net.backbone_forward(x)
        gx = net.backbone_backward(probe, cache, need_input_grad=True)["input"]
        err = tc.finite_diff_gradcheck(lambda p: (net.backbone_forward(p)[0] * probe).sum(), x, gx, 1e-6)
        assert err <= 1e-4

    def test_frozen_backbone_gets_no_grads(self, rng):
        net = ClozeNetwork(BackboneConfig())
        logits, cache = net.cloze_forward(clips(rng, 2), "head_probe")
        grads = net.cloze_backward(np.ones_like(logits), cache, train_backbone=False)
        assert set(grads) == {"head_probe.weight", "head_probe.bias"}


class TestCheckpoint:
    def _ckpt(self, rng):
        net = ClozeNetwork(BackboneConfig(), seed=7)
        vel = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in list(net.params.items())[:3]}
        return Checkpoint(net.params, vel, epoch=4, config={"network": net.snapshot(), "seed": 42},
                          rng_state={"state": {"state": 123, "inc": 5}}, optimizer={"learning_rate": 0.01})

    def test_round_trip_bitwise(self, rng, tmp_path):
        ck = self._ckpt(rng)
        save_checkpoint(tmp_path / "a.vcpc", ck)
        back = load_checkpoint(tmp_path / "a.vcpc")
        assert set(back.params) == set(ck.params)
        assert all(back.params[k].tobytes() == ck.params[k].tobytes() for k in ck.params)
        assert all(back.velocity[k].tobytes() == ck.velocity[k].tobytes() for k in ck.velocity)
        assert (back.epoch, back.config, back.rng_state, back.optimizer) == (4, ck.config, ck.rng_state,
                                                                             ck.optimizer)
        save_checkpoint(tmp_path / "b.vcpc", back)
        assert (tmp_path / "a.vcpc").read_bytes() == (tmp_path / "b.vcpc").read_bytes()

    def test_magic_and_layout(self, rng):
        buf = encode_checkpoint(self._ckpt(rng))
        assert buf[:4] == b"VCPC"
        assert int.from_bytes(buf[4:8], "little") == 1

    def test_truncation_names_section(self, rng):
        buf = encode_checkpoint(self._ckpt(rng))
        hlen = int.from_bytes(buf[8:16], "little")
        cases = {2: "magic", 10: "version", 16 + hlen // 2: "header", 16 + hlen + 10: "tensor param/",
                 len(buf) - 1: "tensor velocity/"}
        for cut, section in cases.items():
            with pytest.raises(CheckpointError) as e:
                decode_checkpoint(buf[:cut])
            assert e.value.section.startswith(section.rstrip()), (cut, e.value.section)
            assert f"[{e.value.section}]" in str(e.value)

    def test_bad_magic_version_trailing(self, rng):
        buf = encode_checkpoint(self._ckpt(rng))
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"NOPE" + buf[4:])
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
        with pytest.raises(CheckpointError, match="trailing"):
            decode_checkpoint(buf + b"x")

    def test_network_restore(self, rng):
        ck = self._ckpt(rng)
        net = network_from_checkpoint(ck)
        x = clips(rng, 1)
        a, _ = net.cloze_forward(x)
        b, _ = ClozeNetwork(BackboneConfig(), seed=7).cloze_forward(x)
        assert a.tobytes() == b.tobytes()

    def test_shape_mismatch(self, rng):
        ck = self._ckpt(rng)
        ck.params["backbone.conv0.weight"] = np.zeros((2, 3, 3, 3, 3), np.float32)
        with pytest.raises(CheckpointError, match="conv0"):
            network_from_checkpoint(decode_checkpoint(encode_checkpoint(ck)))

    def test_missing_snapshot(self, rng):
        ck = self._ckpt(rng)
        ck.config = {}
        with pytest.raises(CheckpointError):
            network_from_checkpoint(ck)
