# Unit Tests for the assembled model, its parameter sets and checkpoint files

import struct

import numpy as np
import pytest

from ugt_rec import tensor as T
from ugt_rec.encoder import EncoderConfig, ItemInputs
from ugt_rec.errors import ConfigurationError, DataFormatError
from ugt_rec.fusion import FusionConfig, build_graph
from ugt_rec.model import (
    CHECKPOINT_MAGIC,
    AblationSwitches,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from ugt_rec.train import build_model

pytestmark = pytest.mark.unit


@pytest.fixture
def toy_inputs(toy_dataset, small_config):
    return ItemInputs.from_dataset(toy_dataset, small_config.patch_size)


def _model(toy_split, small_config, toy_inputs, *ablation):
    config = small_config.with_updates(ablation=list(ablation))
    return build_model(toy_split, config, toy_inputs, np.random.default_rng(0))


# =============================================================================
# FORWARD PASS
# =============================================================================

class TestForward:
    def test_shapes(self, toy_split, small_config, toy_inputs, toy_graph):
        out = _model(toy_split, small_config, toy_inputs).forward(toy_graph, toy_inputs)
        assert out.X_user.shape == (toy_split.num_users, 8)
        assert out.X_item.shape == (toy_split.num_items, 8)
        assert out.H_v.shape == out.H_t.shape == (toy_split.num_items, 8)
        np.testing.assert_allclose(np.linalg.norm(out.Z_v.data, axis=1), 1.0, atol=1e-12)

    def test_same_seed_same_output(self, toy_split, small_config, toy_inputs, toy_graph):
        a = _model(toy_split, small_config, toy_inputs).forward(toy_graph, toy_inputs)
        b = _model(toy_split, small_config, toy_inputs).forward(toy_graph, toy_inputs)
        np.testing.assert_array_equal(a.X_user.data, b.X_user.data)

    def test_separate_streams_change_readout(self, toy_split, small_config, toy_inputs, toy_graph):
        full = _model(toy_split, small_config, toy_inputs).forward(toy_graph, toy_inputs)
        split_streams = _model(toy_split, small_config, toy_inputs, "ugnn").forward(toy_graph, toy_inputs)
        assert full.X_item.shape == split_streams.X_item.shape
        assert not np.allclose(full.X_item.data, split_streams.X_item.data)

    def test_raw_encoder_outputs_are_constant(self, toy_split, small_config, toy_inputs, toy_graph):
        model = _model(toy_split, small_config, toy_inputs, "trans")
        out = model.forward(toy_graph, toy_inputs)
        assert model.raw_encoder is not None
        assert not out.H_v.requires_grad
        assert out.Z_v.requires_grad

    def test_fixed_gate(self, toy_split, small_config, toy_inputs, toy_graph):
        model = _model(toy_split, small_config, toy_inputs, "attn_fuse")
        model.fusion.alpha_logit.data[...] = 3.0
        assert model.alpha == 0.5
        out = model.forward(toy_graph, toy_inputs)
        T.backward(T.sum_(out.X_item * out.X_item))
        assert model.fusion.alpha_logit.grad is None

    def test_width_mismatch(self, toy_split, toy_inputs, rng):
        with pytest.raises(ConfigurationError):
            init_model(EncoderConfig(d=8, n_heads=2), FusionConfig(d=4), AblationSwitches(),
                       toy_split.num_users, toy_split.num_items, toy_inputs, 16, 6, rng)


# =============================================================================
# PARAMETER SETS
# =============================================================================

class TestParameterSets:
    def test_full_model_trains_everything(self, toy_split, small_config, toy_inputs):
        model = _model(toy_split, small_config, toy_inputs)
        assert set(model.trainable_parameters()) == {name for name, _ in model.named_parameters()}

    def test_raw_encoder_leaves_only_itc_heads(self, toy_split, small_config, toy_inputs):
        names = set(_model(toy_split, small_config, toy_inputs, "trans").trainable_parameters())
        encoder_names = {n for n in names if n.startswith("encoder.")}
        assert encoder_names == {"encoder.itc.visual", "encoder.itc.textual"}
        assert "fusion.id_embeddings" in names

    def test_fixed_gate_not_trained(self, toy_split, small_config, toy_inputs):
        names = set(_model(toy_split, small_config, toy_inputs, "attn_fuse").trainable_parameters())
        assert "fusion.alpha_logit" not in names

    def test_regularised_set(self, toy_split, small_config, toy_inputs):
        names = set(_model(toy_split, small_config, toy_inputs).regularized_parameters())
        assert "fusion.id_embeddings" in names
        assert "encoder.layers.0.w_q" in names
        assert "encoder.layers.0.ffn.visual.w1" in names
        for excluded in ("encoder.patch_bias", "encoder.layers.0.ffn.textual.b2",
                         "encoder.layers.0.ln.gamma", "fusion.alpha_logit"):
            assert excluded not in names


# =============================================================================
# STATE AND CHECKPOINTS
# =============================================================================

class TestStateDict:
    def test_round_trip_through_file(self, tmp_path, toy_split, small_config, toy_inputs, toy_graph):
        model = _model(toy_split, small_config, toy_inputs, "trans")
        path = save_checkpoint(model.state_dict(), tmp_path / "ckpt.bin", metadata={"seed": 0})
        arrays, metadata = load_checkpoint(path)
        assert metadata == {"seed": 0}
        assert {"raw.patch_map", "raw.token_table"} <= set(arrays)

        other = build_model(toy_split, small_config.with_updates(ablation=["trans"]), toy_inputs,
                            np.random.default_rng(99))
        other.load_state_dict(arrays)
        np.testing.assert_array_equal(
            other.forward(toy_graph, toy_inputs).X_user.data,
            model.forward(toy_graph, toy_inputs).X_user.data,
        )

    def test_mismatched_state(self, toy_split, small_config, toy_inputs):
        model = _model(toy_split, small_config, toy_inputs)
        state = model.state_dict()
        state.pop("fusion.alpha_logit")
        with pytest.raises(DataFormatError):
            model.load_state_dict(state)

    def test_wrong_shape(self, toy_split, small_config, toy_inputs):
        model = _model(toy_split, small_config, toy_inputs)
        state = model.state_dict()
        state["fusion.id_embeddings"] = np.zeros((2, 2))
        with pytest.raises(DataFormatError, match="fusion.id_embeddings"):
            model.load_state_dict(state)


class TestCheckpointFile:
    """
    Magic, little-endian header length, JSON index, f64 payload
    """

    @pytest.fixture
    def saved(self, tmp_path, rng):
        arrays = {"b": rng.standard_normal(5), "a": rng.standard_normal((2, 3)), "s": np.array(1.5)}
        return save_checkpoint(arrays, tmp_path / "c.bin"), arrays

    def test_bit_exact(self, saved):
        path, arrays = saved
        loaded, _ = load_checkpoint(path)
        for name, value in arrays.items():
            assert loaded[name].shape == value.shape
            assert loaded[name].tobytes() == value.astype("<f8").tobytes()

    def test_layout(self, saved):
        path, _ = saved
        blob = path.read_bytes()
        assert blob.startswith(CHECKPOINT_MAGIC)
        (header_len,) = struct.unpack("<Q", blob[8:16])
        assert b'"arrays"' in blob[16:16 + header_len]
        assert len(blob) == 16 + header_len + 8 * (5 + 6 + 1)

    def test_bad_magic(self, saved):
        path, _ = saved
        path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
        with pytest.raises(DataFormatError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload(self, saved):
        path, _ = saved
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_trailing_bytes(self, saved):
        path, _ = saved
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(DataFormatError, match="trailing"):
            load_checkpoint(path)

    def test_truncated_header(self, saved):
        path, _ = saved
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_non_finite_values(self, tmp_path):
        path = save_checkpoint({"x": np.array([1.0, np.nan])}, tmp_path / "nan.bin")
        with pytest.raises(DataFormatError, match="non-finite"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_checkpoint(tmp_path / "nothing.bin")
