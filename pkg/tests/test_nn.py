import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unrolled_lrp import nn
from unrolled_lrp.nn import Conv, EncoderSpec, GlobalAvgPool, Linear, MaxPool, ReLU, SpecError


def central_fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def tiny_spec(bias=False):
    return EncoderSpec((Conv(3, 4, 3, 1, 1, bias), ReLU(), MaxPool(), Conv(4, 5, 3, 1, 1, bias), ReLU(),
                        GlobalAvgPool(), Linear(5, 3, bias)))


class TestSpec:
    def test_presets_validate(self):
        for name in nn.PRESETS:
            spec = nn.preset(name, 5)
            assert spec.num_classes == 5
            assert isinstance(spec.layers[-2], GlobalAvgPool)

    def test_unknown_preset(self):
        with pytest.raises(SpecError):
            nn.preset("resnet", 3)

    def test_missing_head(self):
        with pytest.raises(SpecError):
            EncoderSpec((Conv(3, 4), ReLU()))

    def test_channel_mismatch(self):
        with pytest.raises(SpecError):
            EncoderSpec((Conv(3, 4), ReLU(), Conv(5, 4), GlobalAvgPool(), Linear(4, 2)))

    def test_head_mismatch(self):
        with pytest.raises(SpecError):
            EncoderSpec((Conv(3, 4), ReLU(), GlobalAvgPool(), Linear(6, 2)))

    def test_pool_in_body_rejected(self):
        with pytest.raises(SpecError):
            EncoderSpec((Conv(3, 4), GlobalAvgPool(), ReLU(), GlobalAvgPool(), Linear(4, 2)))

    def test_json_round_trip(self):
        spec = nn.preset("vgg-deep", 4, width=4, bias=True)
        assert EncoderSpec.from_json(spec.to_json()) == spec

    def test_param_shapes(self):
        shapes = tiny_spec(bias=True).param_shapes()
        assert shapes == {"0.weight": (4, 3, 3, 3), "0.bias": (4,), "3.weight": (5, 4, 3, 3), "3.bias": (5,),
                          "6.weight": (3, 5), "6.bias": (3,)}

    def test_init_deterministic(self):
        spec = tiny_spec()
        a, b, c = nn.init_params(spec, 1), nn.init_params(spec, 1), nn.init_params(spec, 2)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["0.weight"], c["0.weight"])

    def test_check_params(self):
        spec = tiny_spec()
        p = nn.init_params(spec, 0)
        nn.check_params(spec, p)
        p["3.weight"] = p["3.weight"][:2]
        with pytest.raises(SpecError):
            nn.check_params(spec, p)


class TestForward:
    def test_zero_image(self):
        spec = tiny_spec()
        scores, _ = nn.forward(spec, nn.init_params(spec, 0), np.zeros((3, 8, 8)))
        np.testing.assert_array_equal(scores, 0.0)

    def test_identity_conv_trace(self):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        spec = EncoderSpec((Conv(1, 1), ReLU(), GlobalAvgPool(), Linear(1, 1)), in_ch=1)
        img = np.random.default_rng(0).normal(size=(1, 5, 5))
        _, trace = nn.forward(spec, {"0.weight": w, "3.weight": np.ones((1, 1))}, img)
        np.testing.assert_array_equal(trace.z(0)[0], img)

    def test_hand_stepped(self):
        spec = nn.preset("vgg-micro", 3, width=2)
        params = nn.init_params(spec, 7)
        img = np.random.default_rng(7).normal(size=(3, 8, 8))

        def conv(x, w):
            xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
            out = np.zeros((w.shape[0],) + x.shape[1:])
            for o in range(w.shape[0]):
                for i in range(x.shape[1]):
                    for j in range(x.shape[2]):
                        out[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * w[o])
            return out

        a = np.maximum(conv(img, params["0.weight"]), 0)
        a = a.reshape(a.shape[0], 4, 2, 4, 2).max(axis=(2, 4))
        a = np.maximum(conv(a, params["3.weight"]), 0)
        expected = params["6.weight"] @ a.mean(axis=(1, 2))
        scores, _ = nn.forward(spec, params, img)
        np.testing.assert_allclose(scores[0], expected, rtol=1e-12)

    def test_deterministic_and_relu_invariant(self):
        spec = nn.preset("vgg-mini", 4, width=3)
        params = nn.init_params(spec, 3)
        img = np.random.default_rng(3).normal(size=(2, 3, 16, 16))
        _, t1 = nn.forward(spec, params, img)
        _, t2 = nn.forward(spec, params, img)
        for a, b in zip(t1.acts, t2.acts):
            np.testing.assert_array_equal(a, b)
        for i, layer in enumerate(spec.layers):
            if isinstance(layer, ReLU):
                z = t1.acts[i]
                np.testing.assert_array_equal(t1.acts[i + 1], (z > 0) * z)

    def test_batched_and_single_agree(self):
        spec = tiny_spec()
        params = nn.init_params(spec, 0)
        img = np.random.default_rng(1).normal(size=(2, 3, 6, 6))
        batch, _ = nn.forward(spec, params, img)
        single, _ = nn.forward(spec, params, img[1])
        np.testing.assert_allclose(batch[1], single[0], rtol=1e-14)

    def test_bad_image(self):
        spec = tiny_spec()
        with pytest.raises(ValueError):
            nn.forward(spec, nn.init_params(spec, 0), np.zeros((8, 8)))
        with pytest.raises(ValueError):
            nn.forward(spec, nn.init_params(spec, 0), np.zeros((1, 8, 8)))


class TestBackward:
    def test_linear_model(self):
        spec = EncoderSpec((Conv(1, 1, 1, 1, 0), GlobalAvgPool(), Linear(1, 1)), in_ch=1)
        params = {"0.weight": np.full((1, 1, 1, 1), 3.0), "2.weight": np.full((1, 1), 2.0)}
        img = np.random.default_rng(0).normal(size=(1, 1, 2, 2))
        _, trace = nn.forward(spec, params, img)
        g = nn.backward(spec, params, trace, [1.0])
        np.testing.assert_allclose(g.input, np.full((1, 1, 2, 2), 6.0 / 4))

    def test_zero_score_grad(self):
        spec = tiny_spec()
        params = nn.init_params(spec, 0)
        _, trace = nn.forward(spec, params, np.random.default_rng(0).normal(size=(3, 6, 6)))
        g = nn.backward(spec, params, trace, np.zeros(3))
        assert not np.any(g.input)
        assert all(not np.any(v) for v in g.params.values())

    def test_shape_checks(self):
        spec = tiny_spec()
        params = nn.init_params(spec, 0)
        _, trace = nn.forward(spec, params, np.ones((3, 6, 6)))
        with pytest.raises(ValueError):
            nn.backward(spec, params, trace, np.zeros(4))

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_finite_differences(self, seed):
        spec = tiny_spec(bias=True)
        params = nn.init_params(spec, seed)
        rng = np.random.default_rng(seed)
        for k in params:
            if k.endswith(".bias"):
                params[k] = rng.normal(scale=0.1, size=params[k].shape)
        img = rng.normal(size=(2, 3, 6, 6))
        sg = rng.normal(size=(2, 3))

        def f():
            return float(np.sum(sg * nn.forward(spec, params, img)[0]))

        _, trace = nn.forward(spec, params, img)
        g = nn.backward(spec, params, trace, sg)
        for k in params:
            assert rel_err(g.params[k], central_fd(f, params[k])) < 1e-4, k
        assert rel_err(g.input, central_fd(f, img)) < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = tiny_spec()
        params = nn.init_params(spec, 0)
        nn.save_checkpoint(tmp_path / "c.ckpt", {"kind": "x", "spec": spec.to_json()}, params)
        header, tensors = nn.load_checkpoint(tmp_path / "c.ckpt")
        assert header["kind"] == "x"
        assert EncoderSpec.from_json(header["spec"]) == spec
        assert all(np.array_equal(tensors[k], params[k]) for k in params)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"nope" + bytes(16))
        with pytest.raises(ValueError):
            nn.load_checkpoint(tmp_path / "bad")
