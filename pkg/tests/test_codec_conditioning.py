import pytest
import torch

from slimdiff.core import (
    CodecConfig,
    ConvAutoencoderCodec,
    PoolStubCodec,
    build_conditioning,
    decode_latent,
    encode_latent,
    make_codec,
)
from slimdiff.core.conditioning import render_prompt
from slimdiff.errors import ConfigurationError, DimensionError, VocabularyError


class TestPoolStub:
    def setup_method(self):
        self.codec = make_codec(CodecConfig())

    def test_shape_contract(self):
        z = encode_latent(self.codec, torch.rand(2, 3, 64, 64))
        assert z.shape == (2, 4, 8, 8)

    def test_roundtrip_shape_closure(self):
        x = torch.rand(3, 3, 16, 16)
        assert decode_latent(self.codec, encode_latent(self.codec, x)).shape == x.shape

    def test_constant_image_preserved(self):
        x = torch.full((1, 3, 32, 32), 0.625)
        z = encode_latent(self.codec, x)
        assert torch.allclose(z, torch.full_like(z, 0.625), atol=1e-6)
        back = decode_latent(self.codec, z)
        assert torch.allclose(back, x, atol=1e-6)

    def test_indivisible_size_rejected(self):
        with pytest.raises(DimensionError):
            encode_latent(self.codec, torch.rand(1, 3, 60, 64))

    def test_wrong_channel_count_rejected(self):
        with pytest.raises(DimensionError):
            encode_latent(self.codec, torch.rand(1, 4, 64, 64))


class TestConvAutoencoder:
    def test_shapes_and_determinism(self):
        cfg = CodecConfig(kind="conv_ae", seed=7)
        a = ConvAutoencoderCodec(cfg)
        b = ConvAutoencoderCodec(cfg)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)
        x = torch.rand(2, 3, 64, 64)
        z = a.encode(x)
        assert z.shape == (2, 4, 8, 8)
        assert a.decode(z).shape == x.shape

    def test_different_seed_differs(self):
        a = ConvAutoencoderCodec(CodecConfig(kind="conv_ae", seed=0))
        b = ConvAutoencoderCodec(CodecConfig(kind="conv_ae", seed=1))
        assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigurationError):
            make_codec(CodecConfig(kind="magic"))


class TestConditioning:
    def test_determinism_bit_identical(self):
        a = build_conditioning(["rose", "tulip"], 64, seed=3)
        b = build_conditioning(["rose", "tulip"], 64, seed=3)
        assert torch.equal(a.embeddings, b.embeddings)

    def test_row_per_entry_and_lookup(self):
        t = build_conditioning(["rose", "tulip"], 32, seed=0)
        assert t.embeddings.shape == (2, 4, 32)
        assert t.index("tulip") == 1
        ctx = t.rows(torch.tensor([1, 0, 1]))
        assert ctx.shape == (3, 4, 32)
        assert torch.equal(ctx[0], t.embeddings[1])

    def test_unknown_class_rejected(self):
        t = build_conditioning(["rose"], 16)
        with pytest.raises(VocabularyError):
            t.index("thistle")
        with pytest.raises(VocabularyError):
            t.rows(torch.tensor([1]))

    def test_duplicate_vocab_rejected(self):
        with pytest.raises(ConfigurationError):
            build_conditioning(["rose", "rose"], 16)

    def test_prompt_template_changes_embedding(self):
        a = build_conditioning(["rose"], 16, seed=0, prompt_template="a photo of a {class}")
        b = build_conditioning(["rose"], 16, seed=0, prompt_template="a painting of a {class}")
        assert not torch.equal(a.embeddings, b.embeddings)

    def test_template_requires_placeholder(self):
        with pytest.raises(ConfigurationError):
            render_prompt("no placeholder here", "rose")
