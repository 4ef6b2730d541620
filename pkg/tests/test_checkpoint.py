import numpy as np
import pytest

from nodeformer.checkpoint import (
    CheckpointError,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)
from nodeformer.model import ModelConfig, TransformerClassifier


@pytest.fixture
def trained_like_model(rng):
    model = TransformerClassifier(ModelConfig(d=4, n_blocks=2, architecture="node"), seed=3)
    for p in model.params.tensors():
        p.data[:] = rng.normal(size=p.data.shape)
    return model


class TestRoundtrip:
    def test_weights_and_config_survive(self, tmp_path, trained_like_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, trained_like_model, metadata={"lr": 0.003, "seed": 3})
        loaded, meta = load_checkpoint(path)
        assert meta == {"lr": 0.003, "seed": 3}
        assert loaded.cfg == trained_like_model.cfg
        for name in trained_like_model.params.names():
            np.testing.assert_array_equal(
                loaded.params[name].data, trained_like_model.params[name].data
            )

    def test_loaded_model_predicts_identically(self, tmp_path, trained_like_model):
        from nodeformer.model import TOKEN_SOS

        path = tmp_path / "m.ckpt"
        save_checkpoint(path, trained_like_model)
        loaded, _ = load_checkpoint(path)
        toks = [(TOKEN_SOS, 1, 0, 1)]
        np.testing.assert_array_equal(
            loaded.predict(toks), trained_like_model.predict(toks)
        )

    def test_payload_is_64bit_little_endian(self, tmp_path, trained_like_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, trained_like_model)
        raw = path.read_bytes()
        total_params = trained_like_model.params.count()
        assert raw.endswith(
            np.ascontiguousarray(
                trained_like_model.params[trained_like_model.params.names()[-1]].data,
                dtype="<f8",
            ).tobytes()
        )
        # payload length accounts for every parameter at 8 bytes
        assert len(raw) > 8 * total_params


class TestValidation:
    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path, trained_like_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, trained_like_model)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(CheckpointError, match="truncated|trailing"):
            load_checkpoint(path)

    def test_config_hash_changes_with_architecture(self):
        a = ModelConfig(d=4, architecture="node")
        b = ModelConfig(d=4, architecture="vanilla")
        assert config_hash(a) != config_hash(b)

    def test_tampered_config_rejected(self, tmp_path, trained_like_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, trained_like_model)
        raw = bytearray(path.read_bytes())
        # flip the stored embedding dimension inside the manifest JSON
        idx = raw.find(b'"d": 4')
        assert idx != -1
        raw[idx:idx + 6] = b'"d": 6'
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
