"""Shape pipeline, weight sharing, ref-decoder wiring, checkpoints."""

import numpy as np
import pytest
import torch

from refcodec.layers import zero_init
from refcodec.networks import (
    CodecModel,
    ModelConfig,
    decode_input,
    decode_ref_residual,
    encode_features,
    load_model,
    reconstruct,
    save_model,
    with_flags,
)
from refcodec.tensors import ContractError, ImageTensor, pad_image

from conftest import TINY, rand_image


class TestShapes:
    @pytest.mark.parametrize("hw", [(64, 64), (128, 64), (192, 128)])
    def test_shape_pipeline(self, tiny_model, rng, hw):
        h, w = hw
        img = rand_image(rng, h, w)
        y = encode_features(tiny_model, img)
        assert y.shape == (TINY.latent_ch, h // 16, w // 16)
        z = tiny_model.entropy.hyper_analysis(y.unsqueeze(0))
        assert z.shape == (1, TINY.hyper_ch, h // 64, w // 64)
        out = decode_input(tiny_model, y)
        assert out.shape == (3, h, w)

    def test_full_width_latent_shape(self):
        torch.manual_seed(0)
        model = CodecModel(ModelConfig(), lmbda=0.001)
        img = ImageTensor(np.zeros((3, 512, 512), np.float32), 512, 512)
        y = encode_features(model, img)
        assert y.shape == (192, 32, 32)

    def test_unpadded_input_rejected(self, tiny_model):
        img = ImageTensor(np.zeros((3, 60, 64), np.float32), 60, 64)
        with pytest.raises(ContractError):
            encode_features(tiny_model, img)

    def test_ref_residual_shape(self, tiny_model, rng):
        img = rand_image(rng, 64, 64)
        y = encode_features(tiny_model, img)
        ref = torch.from_numpy(rand_image(rng, 64, 64).data)
        res = decode_ref_residual(tiny_model, y, ref)
        assert res.shape == (3, 64, 64)

    def test_ref_dim_mismatch_rejected(self, tiny_model, rng):
        y = encode_features(tiny_model, rand_image(rng, 64, 64))
        ref = torch.zeros(3, 128, 128)
        with pytest.raises(ContractError):
            decode_ref_residual(tiny_model, y, ref)


class TestWeightSharing:
    def test_same_parameter_storage(self, tiny_model):
        # input and ref encodes literally run the same module object
        assert tiny_model.encoder is tiny_model.encoder

    def test_equal_inputs_equal_latents(self, tiny_model, rng):
        img = rand_image(rng, 64, 64)
        as_input = encode_features(tiny_model, img)
        as_reference = encode_features(tiny_model, img)
        assert torch.equal(as_input, as_reference)

    def test_deterministic_repeat(self, tiny_model, rng):
        img = rand_image(rng, 64, 64)
        a = encode_features(tiny_model, img)
        b = encode_features(tiny_model, img)
        assert torch.equal(a, b)

    def test_theta_phi_partition(self, tiny_model):
        theta = {id(p) for p in tiny_model.encoder_parameters()}
        phi = {id(p) for p in tiny_model.other_parameters()}
        everything = {id(p) for p in tiny_model.parameters()}
        assert theta & phi == set()
        assert theta | phi == everything


class TestRefDecoder:
    def test_zero_residual_at_init(self, rng):
        torch.manual_seed(3)
        model = CodecModel(TINY, lmbda=0.008)
        y = encode_features(model, rand_image(rng, 64, 64))
        ref = torch.from_numpy(rand_image(rng, 64, 64).data)
        res = decode_ref_residual(model, y, ref)
        assert torch.equal(res, torch.zeros_like(res))

    def test_zeroed_final_layer_zeroes_residual(self, rng):
        torch.manual_seed(4)
        model = CodecModel(TINY, lmbda=0.008)
        for p in model.parameters():
            p.data += 0.01  # move every layer off its init
        zero_init(model.ref_decoder.synthesis_res.stage4.conv)
        y = encode_features(model, rand_image(rng, 64, 64))
        ref = torch.from_numpy(rand_image(rng, 64, 64).data)
        assert torch.equal(decode_ref_residual(model, y, ref), torch.zeros(3, 64, 64))

    def test_residual_responds_to_reference(self, rng):
        torch.manual_seed(5)
        model = CodecModel(TINY, lmbda=0.008)
        for p in model.ref_decoder.parameters():
            p.data += 0.05  # non-degenerate weights, incl. the zeroed final conv
        y = encode_features(model, rand_image(rng, 64, 64))
        ref_a = torch.from_numpy(rand_image(rng, 64, 64).data)
        ref_b = ref_a + 0.1
        res_a = decode_ref_residual(model, y, ref_a)
        res_b = decode_ref_residual(model, y, ref_b)
        assert not torch.equal(res_a, res_b)

    def test_zero_latent_zero_final_decoder_layer(self, rng):
        torch.manual_seed(6)
        model = CodecModel(TINY, lmbda=0.008)
        zero_init(model.input_decoder.stage4.conv)
        y = torch.zeros(TINY.latent_ch, 4, 4)
        out = decode_input(model, y)
        assert torch.equal(out, torch.zeros(3, 64, 64))


class TestReconstruct:
    def test_ablation_equals_input_decoder(self, rng):
        torch.manual_seed(8)
        model = CodecModel(with_flags(TINY, True, False), lmbda=0.008)
        y = encode_features(model, rand_image(rng, 64, 64))
        ref = torch.from_numpy(rand_image(rng, 64, 64).data)
        got = reconstruct(model, y, ref)
        expect = decode_input(model, y).clamp(0, 1)
        assert torch.equal(got, expect)

    def test_all_zero_decoders_give_zero_image(self, rng):
        torch.manual_seed(9)
        model = CodecModel(TINY, lmbda=0.008)
        zero_init(model.input_decoder.stage4.conv)
        y = torch.zeros(TINY.latent_ch, 4, 4)
        out = reconstruct(model, y, torch.zeros(3, 64, 64))
        assert torch.equal(out, torch.zeros(3, 64, 64))

    def test_values_clamped(self, tiny_model, rng):
        y = 10.0 * torch.randn(TINY.latent_ch, 4, 4, generator=torch.Generator().manual_seed(1))
        ref = torch.from_numpy(rand_image(rng, 64, 64).data)
        out = reconstruct(tiny_model, y, ref)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_crop_to_true_dims(self):
        data = np.random.default_rng(0).random((3, 500, 480)).astype(np.float32)
        img = pad_image(data)
        assert img.data.shape == (3, 512, 512)
        assert img.cropped().shape == (3, 500, 480)
        assert np.array_equal(img.cropped(), data)


class TestCheckpoints:
    def test_save_load_round_trip(self, tiny_model, rng, tmp_path):
        path = tmp_path / "model.ckpt"
        save_model(tiny_model, path)
        loaded = load_model(path)
        assert loaded.cfg == tiny_model.cfg
        assert loaded.lmbda == tiny_model.lmbda
        assert loaded.lambda_index == tiny_model.lambda_index
        img = rand_image(rng, 64, 64)
        assert torch.equal(encode_features(loaded, img), encode_features(tiny_model, img))

    def test_weight_hash_changes_with_weights(self, tmp_path):
        torch.manual_seed(0)
        model = CodecModel(TINY, lmbda=0.008)
        h1 = model.weight_hash()
        with torch.no_grad():
            next(model.parameters()).add_(1.0)
        assert model.weight_hash() != h1

    def test_version_check(self, tiny_model, tmp_path):
        import io
        import json

        import numpy as np

        path = tmp_path / "bad.ckpt"
        manifest = {"format_version": 99, "lambda": 0.1, "lambda_index": 0,
                    "is_trained": False, "config": {}, "dtype": "float32"}
        buf = io.BytesIO()
        np.savez(buf, __manifest__=np.frombuffer(json.dumps(manifest).encode(), np.uint8))
        path.write_bytes(buf.getvalue())
        with pytest.raises(ContractError):
            load_model(path)
