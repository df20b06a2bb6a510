import json

import pytest
import torch

from vlsm_ensemble.backbones import (
    PromptTruncatedWarning,
    ToyEncoder,
    VlsmDecoder,
    build_decoder,
    check_frozen,
    decode,
    encode,
    freeze_report,
    load_backbone,
    resize_token_grid,
)
from vlsm_ensemble.errors import ConfigurationError, FreezeViolation


@pytest.fixture(scope="module")
def toy():
    return ToyEncoder(seed=0)


class TestToyEncode:
    def test_grid_for_352(self, toy):
        b = encode(toy, torch.rand(1, 3, 352, 352), ["a polyp"])
        assert b.patch_tokens.shape == (1, 484, 64)
        assert b.grid_side == 22
        assert b.pooled_image_embed.shape == (1, 64)
        assert b.text_embed.shape == (1, 64)

    def test_bit_identical_repeat(self, toy):
        x = torch.rand(2, 3, 64, 64)
        a, b = encode(toy, x, ["p", "q"]), encode(toy, x, ["p", "q"])
        assert torch.equal(a.patch_tokens, b.patch_tokens)
        assert torch.equal(a.pooled_image_embed, b.pooled_image_embed)
        assert torch.equal(a.text_embed, b.text_embed)

    def test_golden_seed0(self, toy):
        # pinned once from ToyEncoder(seed=0) on a zero 352x352 image with prompt "x"
        b = encode(toy, torch.zeros(1, 3, 352, 352), ["x"])
        torch.testing.assert_close(
            b.pooled_image_embed[0, :4],
            torch.tensor([0.5825222730636597, 2.330455780029297, 1.6967670917510986, -1.2128008604049683]),
            atol=1e-5, rtol=0,
        )
        assert b.text_embed.sum().item() == pytest.approx(2.6102046966552734, abs=1e-4)

    def test_same_seed_same_weights(self):
        a, b = ToyEncoder(seed=3), ToyEncoder(seed=3)
        assert freeze_report(a) == freeze_report(b)
        assert freeze_report(a) != freeze_report(ToyEncoder(seed=4))

    def test_no_gradients_into_encoder(self, toy):
        x = torch.rand(1, 3, 64, 64, requires_grad=True)
        b = encode(toy, x, ["p"])
        assert not b.patch_tokens.requires_grad
        assert all(not p.requires_grad for p in toy.parameters())

    def test_prompt_truncation_warns(self, toy):
        with pytest.warns(PromptTruncatedWarning):
            b = encode(toy, torch.rand(1, 3, 64, 64), ["polyp " * 40])
        assert torch.isfinite(b.text_embed).all()

    def test_stays_in_eval_mode(self, toy):
        toy.train()
        assert not toy.training

    def test_frozen_set_matches_architecture(self, toy):
        # patch conv (2) + cls (1) + 2 transformer layers x 12 + final LN (2)
        # + token embedding (1) + 1 text layer x 12 + text LN (2) + text proj (2)
        assert len(toy.spec.frozen_param_ids) == 3 + 2 * 12 + 2 + 1 + 12 + 2 + 2
        d, ff, vocab = 64, 128, 259
        layer = 3 * d * d + 3 * d + d * d + d + d * ff + ff + ff * d + d + 4 * d
        image = 3 * 16 * 16 * d + d + d + 2 * layer + 2 * d
        text = vocab * d + layer + 2 * d + d * d + d
        assert sum(p.numel() for p in toy.parameters()) == image + text


class TestDecode:
    def test_logits_at_input_resolution(self, toy):
        dec = build_decoder(toy)
        out = decode(dec, encode(toy, torch.rand(1, 3, 352, 352), ["p"]))
        assert out.decoder_logits.shape == (1, 1, 352, 352)

    def test_resamples_non_native_grid(self, toy):
        b = encode(toy, torch.rand(1, 3, 64, 64), ["p"])
        b.patch_tokens, b.grid_side = resize_token_grid(b.patch_tokens, 3)
        out = VlsmDecoder(64, 64, width=32)(b)
        assert out.shape == (1, 1, 64, 64)

    def test_text_conditioning_is_live(self, toy):
        dec = build_decoder(toy)
        b = encode(toy, torch.rand(1, 3, 64, 64), ["p"])
        first = dec(b)
        b.text_embed = torch.randn_like(b.text_embed)
        assert not torch.allclose(first, dec(b))

    def test_decoder_is_trainable(self, toy):
        dec = build_decoder(toy)
        out = dec(encode(toy, torch.rand(2, 3, 64, 64), ["p", "q"]))
        out.square().mean().backward()
        grads = [p.grad for p in dec.parameters()]
        assert all(g is not None for g in grads)
        assert sum(g.abs().sum() for g in grads) > 0

    def test_dimension_mismatch(self, toy):
        dec = VlsmDecoder(token_dim=32, text_dim=64)
        with pytest.raises(ConfigurationError):
            dec(encode(toy, torch.rand(1, 3, 64, 64), ["p"]))


class TestFreezeReport:
    def test_unchanged_after_decoder_steps(self, toy):
        dec = build_decoder(toy)
        opt = torch.optim.AdamW(dec.parameters(), lr=1e-2)
        before = freeze_report(toy)
        for _ in range(5):
            opt.zero_grad()
            dec(encode(toy, torch.rand(1, 3, 64, 64), ["p"])).mean().backward()
            opt.step()
        check_frozen(before, freeze_report(toy))

    def test_negative_control(self, toy):
        dec = build_decoder(toy)
        opt = torch.optim.AdamW(dec.parameters(), lr=1e-2)
        before = freeze_report(dec, param_ids=["head.weight"])
        opt.zero_grad()
        dec(encode(toy, torch.rand(1, 3, 64, 64), ["p"])).mean().backward()
        opt.step()
        with pytest.raises(FreezeViolation):
            check_frozen(before, freeze_report(dec, param_ids=["head.weight"]))

    def test_serializes_as_json(self, toy):
        report = freeze_report(toy)
        assert json.loads(json.dumps(report)) == report
        assert set(report) == toy.spec.frozen_param_ids


def test_unknown_backbone():
    with pytest.raises(ConfigurationError):
        load_backbone("resnet")


@pytest.fixture(scope="module")
def clip():
    transformers = pytest.importorskip("transformers")
    from vlsm_ensemble.backbones import HFClipEncoder

    cfg = transformers.CLIPConfig(
        text_config=dict(hidden_size=32, intermediate_size=64, num_attention_heads=2,
                         num_hidden_layers=1, max_position_embeddings=16),
        vision_config=dict(hidden_size=48, intermediate_size=64, num_attention_heads=2,
                           num_hidden_layers=1, image_size=224, patch_size=16),
        projection_dim=24,
    )
    torch.manual_seed(0)
    model = transformers.CLIPModel(cfg).eval()

    class ByteTok:
        def __call__(self, text, padding=False, truncation=False, max_length=None, return_tensors=None):
            rows = [text] if isinstance(text, str) else text
            ids = [[49406] + [min(b, 255) + 300 for b in t.encode()] + [49407] for t in rows]
            if truncation:
                ids = [r[: max_length - 1] + [49407] if len(r) > max_length else r for r in ids]
            if not return_tensors:
                return {"input_ids": ids[0] if isinstance(text, str) else ids}
            n = max(map(len, ids))
            t = torch.zeros(len(ids), n, dtype=torch.long)
            att = torch.zeros(len(ids), n, dtype=torch.long)
            for i, r in enumerate(ids):
                t[i, : len(r)] = torch.tensor(r)
                att[i, : len(r)] = 1
            return {"input_ids": t, "attention_mask": att}

    return HFClipEncoder(model, ByteTok())


class TestHFClipWrapper:
    def test_bundle_on_pipeline_grid(self, clip):
        b = clip.encode(torch.rand(2, 3, 352, 352), ["a", "bb"])
        assert b.grid_side == 22
        assert b.patch_tokens.shape == (2, 484, 48)
        assert b.text_embed.shape == (2, 24)
        assert clip.spec.name == "clip"

    def test_all_params_frozen(self, clip):
        assert all(not p.requires_grad for p in clip.parameters())
        assert clip.spec.frozen_param_ids == {n for n, _ in clip.named_parameters()}

    def test_truncation_warns(self, clip):
        with pytest.warns(PromptTruncatedWarning):
            clip.encode(torch.rand(1, 3, 64, 64), ["x" * 40])


@pytest.fixture(scope="module")
def biomed():
    open_clip = pytest.importorskip("open_clip")
    from open_clip.model import CLIP
    from vlsm_ensemble.backbones import OpenClipEncoder

    torch.manual_seed(0)
    model = CLIP(
        embed_dim=24,
        vision_cfg=dict(image_size=224, patch_size=16, width=32, layers=1, head_width=16),
        text_cfg=dict(context_length=16, vocab_size=49408, width=32, heads=2, layers=1),
    ).eval()
    tok = open_clip.tokenizer.SimpleTokenizer(context_length=16)
    return OpenClipEncoder(model, tok)


class TestOpenClipWrapper:
    def test_native_grid_resampled_to_22(self, biomed):
        # 224 / 16 = 14 native tokens per side, resampled to 352 / 16
        b = biomed.encode(torch.rand(1, 3, 352, 352), ["polyp"])
        assert b.grid_side == 22
        assert b.patch_tokens.shape == (1, 484, 32)
        assert b.text_embed.shape == (1, 24)

    def test_truncation_warns(self, biomed):
        with pytest.warns(PromptTruncatedWarning):
            biomed.encode(torch.rand(1, 3, 224, 224), ["polyp " * 30])
