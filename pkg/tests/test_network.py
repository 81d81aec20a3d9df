"""Network assembly, embedding extraction and checkpoints."""

import hashlib

import numpy as np
import pytest

from gatedxvec import tensor as T
from gatedxvec.layers import GcnnParams
from gatedxvec.network import (SYSTEMS, CheckpointError, NetworkSpec, SpecError, build_network,
                               checkpoint_bytes, extract_embedding, forward, forward_all, load_checkpoint,
                               save_checkpoint, system_spec)
from gatedxvec.selftest import tiny_spec
from gatedxvec.tensor import DimensionError, Tensor

EPS = 1e-5


def randomise_buffers(model, rng):
    """Give batch-norm layers non-trivial running statistics and affine terms."""
    for _, t in model.named_parameters():
        if t.data.ndim == 1:
            t.data[...] = rng.normal(scale=0.5, size=t.shape) + (1.0 if t.data.mean() == 1.0 else 0.0)
    for name, buf in model.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, size=buf.shape) if "var" in name else rng.normal(size=buf.shape)


# --- a plain-numpy reimplementation used as an oracle -----------------------

def np_bn(x, bn):
    return (x - bn.running_mean) / np.sqrt(bn.running_var + EPS) * bn.gamma.data + bn.beta.data


def np_context(x, w, d):
    t = x.shape[0] - (w - 1) * d
    return np.concatenate([x[k * d:k * d + t] for k in range(w)], axis=1)


def np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_frame_stack(x, layers):
    h, c, last_input = x, None, x
    for p in layers:
        last_input = h
        if isinstance(p, GcnnParams):
            w, d = p.w_o.shape[0], p.dilation
            ctx = np_context(h, w, d)
            flat = lambda k: k.data.reshape(-1, k.shape[2])  # noqa: E731
            o = np_sigmoid(ctx @ flat(p.w_o) + p.b_o.data)
            f = np_sigmoid(ctx @ flat(p.w_f) + p.b_f.data)
            g = np.tanh(ctx @ flat(p.w_g) + p.b_g.data)
            off, n = (w - 1) * d // 2, ctx.shape[0]
            proj = (lambda v: v) if p.cell_projection is None else (lambda v: v @ p.cell_projection.data)
            c_new = (1 - f) * proj(h[off:off + n])
            if c is not None:
                c_new = c_new + f * proj(c[off:off + n])
            h, c = np_bn(o * g + c_new, p.bn), c_new
        else:
            w = p.kernel.shape[0]
            h = np_bn(np.maximum(np_context(h, w, p.dilation) @ p.kernel.data.reshape(-1, p.kernel.shape[2])
                                 + p.bias.data, 0), p.bn)
            c = None
    return h, last_input


def np_pool(model, h, last_input):
    kind = model.spec.pooling
    n = h.shape[0]
    z, alpha = h, np.full(n, 1.0 / n)
    if kind == "attentive":
        e = np.maximum(h @ model.pooling.w1.data, 0) @ model.pooling.w2.data
        alpha = np.exp(e - e.max()) / np.exp(e - e.max()).sum()
    elif kind != "stats":
        p = model.pooling
        pre = np_context(last_input, p.w_s.shape[0], p.dilation) @ p.w_s.data.reshape(-1, p.w_s.shape[2]) + p.b_s.data
        if kind in ("gated", "gate_only"):
            z = np_sigmoid(pre) * h
        if kind in ("gated", "attention_only"):
            e = pre.mean(axis=1)
            alpha = np.exp(e - e.max()) / np.exp(e - e.max()).sum()
    u = alpha @ z
    return np.concatenate([u, np.sqrt(alpha @ (z - u) ** 2)])


def np_forward(model, x):
    h, last_input = np_frame_stack(x, model.frame_layers)
    pooled = np_pool(model, h, last_input)
    a6 = pooled @ model.l6.weight.data + model.l6.bias.data
    h6 = np_bn(np.maximum(a6, 0), model.bn6)
    a7 = h6 @ model.l7.weight.data + model.l7.bias.data
    h7 = np_bn(np.maximum(a7, 0), model.bn7)
    return a6, h6, h7 @ model.output.weight.data + model.output.bias.data


class TestSpec:
    def test_reference_system_widths(self):
        assert build_network(system_spec("x_tdnn", num_speakers=2)).spec.layer_widths == (512, 512, 512, 512, 1500)
        assert system_spec("x_gcnn").layer_widths == (256, 256, 256, 256, 1500)

    def test_reference_schedules(self):
        spec = system_spec("x_gcnn_gatt")
        assert spec.kernel_widths == (5, 3, 3, 1, 1) and spec.dilations == (1, 2, 4, 1, 1)
        assert spec.segment_widths == (512, 512) and spec.embedding_dim == 512
        assert spec.receptive_field == 17

    def test_all_named_systems(self):
        assert set(SYSTEMS) == {"x_tdnn", "x_gcnn", "x_tdnn_att", "x_gcnn_att", "x_gcnn_gatt",
                                "x_gcnn_gonly", "x_gcnn_aonly"}

    def test_unknown_system(self):
        with pytest.raises(SpecError, match="unknown system"):
            system_spec("x_lstm")

    @pytest.mark.parametrize("bad", [
        dict(frame_layer_kind="rnn"), dict(pooling="max"), dict(layer_widths=(4, 4)),
        dict(dilations=(1, 0, 1, 1, 1)), dict(num_speakers=1), dict(dropout=1.0), dict(embedding_tap="x"),
    ])
    def test_invalid_specs(self, bad):
        with pytest.raises(SpecError):
            NetworkSpec(**bad).validate()

    def test_json_round_trip(self):
        spec = tiny_spec("x_gcnn_gatt")
        assert NetworkSpec.from_json(spec.to_json()) == spec

    def test_gcnn_stack_ends_with_tdnn_layer(self):
        model = build_network(tiny_spec("x_gcnn"))
        kinds = [type(p).__name__ for p in model.frame_layers]
        assert kinds == ["GcnnParams"] * 4 + ["TdnnParams"]


class TestForward:
    @pytest.mark.parametrize("system", list(SYSTEMS))
    def test_logits_shape_and_finite(self, system):
        model = build_network(tiny_spec(system, speakers=5), seed=1)
        rng = np.random.default_rng(0)
        logits = forward(model, Tensor(rng.normal(size=(30, 3))))
        assert logits.shape == (5,) and np.all(np.isfinite(logits.data))
        batch = forward(model, Tensor(rng.normal(size=(3, 25, 3))), train=True)
        assert batch.shape == (3, 5) and np.all(np.isfinite(batch.data))

    def test_eval_is_repeatable(self):
        model = build_network(tiny_spec("x_gcnn_gatt", speakers=2), seed=2)
        model.spec.dropout = 0.5
        x = Tensor(np.random.default_rng(1).normal(size=(30, 3)))
        assert forward(model, x).data.tobytes() == forward(model, x).data.tobytes()

    @pytest.mark.parametrize("system", list(SYSTEMS))
    def test_matches_numpy_composition(self, system):
        rng = np.random.default_rng(3)
        model = build_network(tiny_spec(system, width=4, speakers=2), seed=4)
        randomise_buffers(model, rng)
        x = rng.normal(size=(26, 3))
        out = forward_all(model, Tensor(x), train=False)
        a6, h6, logits = np_forward(model, x)
        np.testing.assert_allclose(out["logits"].data, logits, rtol=0, atol=1e-11)
        np.testing.assert_allclose(out["a6"].data, a6, rtol=0, atol=1e-11)
        np.testing.assert_allclose(out["h6"].data, h6, rtol=0, atol=1e-11)

    def test_wrong_feature_dim(self):
        model = build_network(tiny_spec("x_tdnn"))
        with pytest.raises(DimensionError):
            forward(model, Tensor(np.zeros((30, 4))))


class TestEmbedding:
    def test_reference_dimension(self):
        model = build_network(system_spec("x_tdnn", layer_widths=(8,) * 4 + (16,), num_speakers=2, feat_dim=3))
        assert extract_embedding(model, np.zeros((20, 3))).shape == (512,)

    def test_repeatable_and_dropout_free(self):
        model = build_network(tiny_spec("x_gcnn_gatt", speakers=2), seed=5)
        model.spec.dropout = 0.5
        x = np.random.default_rng(2).normal(size=(40, 3))
        assert extract_embedding(model, x).tobytes() == extract_embedding(model, x).tobytes()

    @pytest.mark.parametrize("tap,key", [("affine", 0), ("bn", 1)])
    def test_equals_instrumented_tap(self, tap, key):
        rng = np.random.default_rng(6)
        model = build_network(tiny_spec("x_gcnn_att", speakers=2), seed=6)
        model.spec.embedding_tap = tap
        randomise_buffers(model, rng)
        x = rng.normal(size=(30, 3))
        np.testing.assert_allclose(extract_embedding(model, x), np_forward(model, x)[key], atol=1e-11)

    def test_leaves_no_gradient_state(self):
        model = build_network(tiny_spec("x_tdnn", speakers=2))
        with T.Tape() as tape:
            extract_embedding(model, np.zeros((20, 3)))
        assert len(tape) == 0


class TestCheckpoint:
    def _model(self):
        model = build_network(tiny_spec("x_gcnn_gatt", speakers=3), seed=7)
        randomise_buffers(model, np.random.default_rng(7))
        return model

    def test_same_seed_same_parameters(self):
        a, b = build_network(tiny_spec("x_gcnn"), 3), build_network(tiny_spec("x_gcnn"), 3)
        assert checkpoint_bytes(a) == checkpoint_bytes(b)
        assert checkpoint_bytes(a) != checkpoint_bytes(build_network(tiny_spec("x_gcnn"), 4))

    def test_round_trip(self, tmp_path):
        model = self._model()
        save_checkpoint(model, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert loaded.spec == model.spec
        a, b = model.state_arrays(), loaded.state_arrays()
        assert max(np.abs(a[k] - b[k]).max() for k in a) == 0
        x = Tensor(np.random.default_rng(8).normal(size=(30, 3)))
        assert forward(model, x).data.tobytes() == forward(loaded, x).data.tobytes()

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(checkpoint_bytes(self._model())[:-100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"XXXX" + checkpoint_bytes(self._model())[4:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_checksum_covers_payload(self, tmp_path):
        blob = bytearray(checkpoint_bytes(self._model()))
        assert hashlib.sha256(bytes(blob[:-32])).digest() == bytes(blob[-32:])
        blob[len(blob) // 2] ^= 0x01
        path = tmp_path / "m.ckpt"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)
