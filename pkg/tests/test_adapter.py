import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from affordet.adapter import (
    Adapter,
    AdapterRefinement,
    LanguageModel,
    TinyLM,
    Tokenizer,
    adapter_losses,
    build_prompt,
    gate_map,
    match_entries,
    merge_lora,
    prompt_tokens,
    refine,
    roi_align,
    select_topk,
    smooth_l1,
)
from affordet.adapter.refine import box_region_mask
from affordet.config import AdapterConfig, RefinementConfig
from affordet.core import Box, logit
from affordet.detect import DetPredictions, cell_centers, decode_boxes

CLASSES = ["hammer", "cup", "knife", "bowl", "scissors"]
AFFS = ["grasp", "pound", "cut", "contain", "wrap-grasp"]


def tiny_lm(seed=1234, **kw):
    return TinyLM(Tokenizer.for_labels(CLASSES, AFFS), seed=seed, **kw)


# tokenizer / LM ----------------------------------------------------------------


def test_tokenizer_covers_prompt_vocabulary():
    lm = tiny_lm()
    text = build_prompt(2, Box(0, 0, 10, 10), CLASSES, AFFS, 100)
    unk = lm.tokenizer.index[Tokenizer.UNK]
    assert unk not in lm.tokenize(text)
    assert lm.tokenize("wrap-grasp")[0] == lm.tokenizer.index["wrap-grasp"]
    assert lm.tokenize("teapot") == [unk]


def test_lm_is_protocol_and_frozen():
    lm = tiny_lm()
    assert isinstance(lm, LanguageModel)
    assert all(not p.requires_grad for p in lm.parameters())
    again = tiny_lm()
    for (n, a), (_, b) in zip(lm.state_dict().items(), again.state_dict().items()):
        assert torch.equal(a, b), n


def test_lm_causal_and_length_limit():
    lm = tiny_lm(max_length=16)
    x = torch.randn(1, 8, 64)
    y = x.clone()
    y[0, 5:] = torch.randn(3, 64)
    assert torch.allclose(lm(x)[0, :5], lm(y)[0, :5], atol=1e-6)
    with pytest.raises(ValueError):
        lm(torch.randn(1, 17, 64))


def test_lora_zero_delta_is_identity():
    base = tiny_lm()
    adapted = tiny_lm().add_lora(4, 2.0, ("q", "v"), seed=5)
    x = torch.randn(3, 10, 64)
    assert torch.equal(base(x), adapted(x))
    assert len(adapted.lora_parameters()) == 2 * 2 * 2
    with pytest.raises(ValueError):
        adapted.add_lora(4, 2.0, ("q",))


def test_lora_merge_matches_and_checks_rank():
    lm = tiny_lm().add_lora(4, 2.0, seed=5)
    with torch.no_grad():
        for p in lm.lora_parameters():
            p.normal_(0, 0.3)
    merged = merge_lora(lm, rank=4)
    x = torch.randn(4, 12, 64)
    assert (merged(x) - lm(x)).abs().max() <= 1e-5
    with pytest.raises(ValueError):
        merge_lora(lm, rank=2)
    zero = tiny_lm().add_lora(4, 2.0, seed=5)
    plain = tiny_lm()
    merged_zero = merge_lora(zero)
    for name, p in plain.state_dict().items():
        assert torch.equal(merged_zero.state_dict()[name], p), name


# prompts -----------------------------------------------------------------------


def test_prompt_template():
    text = build_prompt(2, Box(40, 45, 60, 55), CLASSES, AFFS, 100)
    assert text == (
        "What can the knife object at (0.50, 0.50, 0.20, 0.10) be used for? "
        "Affordances: grasp, pound, cut, contain, wrap-grasp."
    )
    with pytest.raises(ValueError):
        build_prompt(9, Box(0, 0, 1, 1), CLASSES, AFFS, 100)


def test_prompt_tokens_deterministic_and_bounded():
    lm = tiny_lm()
    a = prompt_tokens(lm, 1, Box(1, 2, 30, 40), CLASSES, AFFS, 256)
    assert a == prompt_tokens(lm, 1, Box(1, 2, 30, 40), CLASSES, AFFS, 256)
    assert len(a) <= lm.max_length - 1


def test_prompt_drops_affordances_from_tail():
    lm = tiny_lm(max_length=40)
    ids = prompt_tokens(lm, 0, Box(0, 0, 10, 10), CLASSES, AFFS, 100)
    assert len(ids) <= 39
    words = [lm.tokenizer.vocab[i] for i in ids]
    assert "grasp" in words and "wrap-grasp" not in words
    assert words[:4] == ["what", "can", "the", "hammer"]
    with pytest.raises(ValueError):
        prompt_tokens(tiny_lm(max_length=10), 0, Box(0, 0, 10, 10), CLASSES, AFFS, 100)


@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=32))
@settings(max_examples=30, deadline=None)
def test_long_class_names_fit(name):
    names = [name, "cup"]
    lm = TinyLM(Tokenizer.for_labels(names, AFFS))
    ids = prompt_tokens(lm, 0, Box(3, 4, 99, 120), names, AFFS, 256)
    assert len(ids) <= lm.max_length - 1


# roi align ---------------------------------------------------------------------


def test_roi_full_box_equals_bilinear_resize():
    g = torch.Generator().manual_seed(0)
    feats = torch.rand(2, 5, 24, 18, generator=g, dtype=torch.float64)
    boxes = torch.tensor([[0.0, 0.0, 18.0, 24.0], [0.0, 0.0, 18.0, 24.0]], dtype=torch.float64)
    out = roi_align(feats, torch.tensor([0, 1]), boxes, 7)
    ref = F.interpolate(feats, size=(7, 7), mode="bilinear", align_corners=False)
    assert (out - ref).abs().max() <= 1e-6


def test_roi_masks_pixels_outside_box():
    feats = torch.ones(1, 1, 10, 10, dtype=torch.float64)
    out = roi_align(feats, torch.tensor([0]), torch.tensor([[2.0, 2.0, 4.0, 4.0]], dtype=torch.float64), 2)
    assert (out <= 1).all() and (out >= 0).all()
    unmasked = roi_align(feats, torch.tensor([0]), torch.tensor([[2.0, 2.0, 4.0, 4.0]], dtype=torch.float64), 2, mask_outside=False)
    assert torch.allclose(unmasked, torch.ones_like(unmasked))
    # a box spanning whole pixels only samples inside it
    inner = roi_align(feats, torch.tensor([0]), torch.tensor([[2.0, 2.0, 6.0, 6.0]], dtype=torch.float64), 2)
    assert torch.allclose(inner, torch.ones_like(inner))


def test_roi_zero_area_box_takes_nearest_pixel():
    feats = torch.arange(100, dtype=torch.float64).view(1, 1, 10, 10)
    out = roi_align(feats, torch.tensor([0]), torch.tensor([[3.2, 6.7, 3.2, 6.7]], dtype=torch.float64), 3)
    assert torch.all(out == feats[0, 0, 6, 3])


def test_visual_embedding_shapes_and_constant_inputs():
    cfg = AdapterConfig(pool=7)
    ad = Adapter(cfg, CLASSES, AFFS + ["extra1", "extra2"])
    assert ad.vis_proj.in_features == 7 * 7 * 10 and ad.vis_proj.out_features == 64
    images = torch.full((1, 3, 32, 32), 0.4)
    maps = torch.full((1, 7, 32, 32), 0.2)
    boxes = torch.tensor([[4.0, 4.0, 20.0, 20.0], [4.0, 4.0, 20.0, 20.0]])
    from affordet.adapter import build_visual_embedding

    e = build_visual_embedding(images, maps, torch.tensor([0, 0]), boxes, 7, ad.vis_proj)
    assert e.shape == (2, 64) and torch.equal(e[0], e[1])


# encode --------------------------------------------------------------------------


def test_encode_reads_last_text_position():
    ad = Adapter(AdapterConfig(), CLASSES, AFFS)
    tokens = [list(range(2, 12))]
    images, maps = torch.rand(1, 3, 32, 32), torch.rand(1, 5, 32, 32)
    boxes = torch.tensor([[2.0, 2.0, 20.0, 20.0]])
    h = ad.encode(images, maps, torch.tensor([0]), boxes, tokens)
    assert h.shape == (1, 64)
    from affordet.adapter import build_visual_embedding

    vis = build_visual_embedding(images, maps, torch.tensor([0]), boxes, ad.cfg.pool, ad.vis_proj)
    seq = torch.cat([vis[:, None], ad.lm.embed(torch.tensor(tokens))], 1)
    assert seq.shape[1] == 11
    assert torch.allclose(h, ad.lm(seq)[:, 10])


def test_encode_padding_does_not_change_results_and_prompts_matter():
    ad = Adapter(AdapterConfig(), CLASSES, AFFS)
    lm = ad.lm
    t1 = prompt_tokens(lm, 0, Box(1, 1, 30, 30), CLASSES, AFFS, 64)
    t2 = prompt_tokens(lm, 3, Box(10, 1, 30, 60), CLASSES, AFFS[:2], 64)
    images, maps = torch.rand(1, 3, 64, 64), torch.rand(1, 5, 64, 64)
    boxes = torch.tensor([[2.0, 2.0, 20.0, 20.0], [2.0, 2.0, 20.0, 20.0]])
    both = ad.encode(images, maps, torch.tensor([0, 0]), boxes, [t1, t2])
    alone = ad.encode(images, maps, torch.tensor([0]), boxes[:1], [t1])
    assert torch.allclose(both[0], alone[0], atol=1e-5)
    assert not torch.allclose(both[0], both[1], atol=1e-3)


# gates ----------------------------------------------------------------------------


def test_gate_map_zero_init_and_outside_value():
    cfg = AdapterConfig(zero_init_heads=True)
    ad = Adapter(cfg, CLASSES, AFFS)
    boxes = torch.tensor([[8.0, 8.0, 24.0, 24.0]])
    ref = ad.heads(torch.zeros(1, 64), torch.tensor([0]), boxes, 1, (4, 4), 8)
    assert torch.equal(ref.cls_priors, torch.zeros(1, 5))
    assert torch.equal(ref.box_offsets, torch.zeros(1, 4))
    inside = box_region_mask(boxes, [0], 1, (4, 4), 8)[0, 0]
    g = ref.gates[0]
    assert torch.all(g[:, inside] == 0.5)
    assert torch.all(g[:, ~inside] == 0.25)


def test_gate_map_overlap_is_max_and_shapes():
    patches = torch.stack([torch.full((2, 4, 4), 0.3), torch.full((2, 4, 4), 0.8)])
    boxes = torch.tensor([[0.0, 0.0, 64.0, 64.0], [32.0, 32.0, 96.0, 96.0]])
    g = gate_map(patches, torch.tensor([0, 0]), boxes, 1, (128, 128), 1.0, 0.25)
    assert g.shape == (1, 2, 128, 128)
    assert torch.allclose(g[0, :, 10, 10], torch.tensor(0.3))
    assert torch.allclose(g[0, :, 40, 40], torch.tensor(0.8))
    assert torch.allclose(g[0, :, 100, 100], torch.tensor(0.25))
    # a 4x4 patch fills a 64x64 box at unit scale
    one = gate_map(torch.rand(1, 7, 4, 4), torch.tensor([0]), torch.tensor([[0.0, 0.0, 64.0, 64.0]]), 1, (64, 64), 1.0, 0.25)
    assert one.shape == (1, 7, 64, 64) and (one != 0.25).all()


def test_gate_map_bilinear_expansion_matches_interpolate():
    patch = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    g = gate_map(patch, torch.tensor([0]), torch.tensor([[0.0, 0.0, 16.0, 16.0]], dtype=torch.float64), 1, (16, 16), 1.0, 0.25)
    ref = F.interpolate(patch, size=(16, 16), mode="bilinear", align_corners=False)
    assert torch.allclose(g, ref.clamp(1e-4, 1 - 1e-4))


@given(st.integers(0, 1000), st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_gate_map_range_property(seed, k):
    g = torch.Generator().manual_seed(seed)
    patches = torch.rand(k, 2, 3, 3, generator=g)
    xy = torch.rand(k, 2, generator=g) * 40
    wh = torch.rand(k, 2, generator=g) * 30
    boxes = torch.cat([xy, xy + wh], 1)
    bidx = torch.randint(0, 2, (k,), generator=g)
    out = gate_map(patches, bidx, boxes, 2, (8, 8), 8.0, 0.25)
    assert (out >= 1e-4).all() and (out <= 1 - 1e-4).all()
    region = box_region_mask(boxes, bidx, 2, (8, 8), 8.0)
    outside = ~region.expand_as(out)
    assert torch.all(out[outside] == 0.25)


# top-k ------------------------------------------------------------------------------


def _preds(n, m, c, seed=0):
    g = torch.Generator().manual_seed(seed)
    return DetPredictions(torch.randn(n, m, c, generator=g), torch.randn(n, m, 4, 9, generator=g))


def test_topk_single_dominant_cell():
    centers, strides = cell_centers(64)
    p = _preds(1, len(centers), 3)
    p.cls_logits[0, 17, 2] = 20.0
    sel = select_topk(p, 1, centers, strides, 64)
    assert sel.cell_index.tolist() == [17] and sel.class_id.tolist() == [2]
    ref = decode_boxes(p.box_dists[0, 17:18], centers[17:18], strides[17:18], 64)
    assert torch.equal(sel.boxes, ref)


def test_topk_ties_follow_scan_order_and_k_overflow():
    centers, strides = cell_centers(64)
    p = DetPredictions(torch.zeros(2, len(centers), 3), torch.zeros(2, len(centers), 4, 9))
    sel = select_topk(p, 4, centers, strides, 64)
    assert sel.cell_index.tolist() == [0, 1, 2, 3, 0, 1, 2, 3]
    assert sel.batch_index.tolist() == [0] * 4 + [1] * 4
    big = select_topk(p, 10_000, centers, strides, 64)
    assert len(big) == 2 * len(centers)
    with pytest.raises(ValueError):
        select_topk(p, 0, centers, strides, 64)


def test_topk_scores_sorted_descending():
    centers, strides = cell_centers(64)
    sel = select_topk(_preds(3, len(centers), 4, seed=2), 6, centers, strides, 64)
    s = sel.score.view(3, 6)
    assert torch.all(s[:, :-1] >= s[:, 1:])


# refinement ---------------------------------------------------------------------------


def _refinement(k=3, c=5, a=2, hw=(4, 4), seed=0):
    g = torch.Generator().manual_seed(seed)
    return AdapterRefinement(
        torch.randn(k, c, generator=g, dtype=torch.float64),
        torch.rand(k, 4, generator=g, dtype=torch.float64) * 2 - 1,
        torch.rand(1, a, *hw, generator=g, dtype=torch.float64).clamp(1e-4, 1 - 1e-4),
    )


def _rows(k=3, c=5, seed=1):
    g = torch.Generator().manual_seed(seed)
    cls = torch.randn(k, c, generator=g, dtype=torch.float64)
    xy = torch.rand(k, 2, generator=g, dtype=torch.float64) * 30
    boxes = torch.cat([xy, xy + 5 + torch.rand(k, 2, generator=g, dtype=torch.float64) * 20], 1)
    aff = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)
    return cls, boxes, aff


def test_refine_zero_weights_is_identity():
    cls, boxes, aff = _rows()
    r = refine(cls, boxes, aff, _refinement(), RefinementConfig(alpha=0, beta=0, gamma=0), 64)
    assert torch.equal(r[0], cls) and torch.equal(r[1], boxes) and torch.equal(r[2], aff)


def test_refine_neutral_gate_and_scalar_case():
    cls, boxes, aff = _rows()
    ref = _refinement()
    ref.gates = torch.full_like(ref.gates, 0.5)
    assert torch.equal(refine(cls, boxes, aff, ref, RefinementConfig(gamma=0.3), 64)[2], aff)
    one = AdapterRefinement(torch.ones(1, 1), torch.zeros(1, 4), torch.full((1, 1, 1, 1), 0.5))
    out = refine(torch.zeros(1, 1), torch.tensor([[1.0, 1.0, 2.0, 2.0]]), torch.zeros(1, 1, 1, 1), one, RefinementConfig(alpha=0.01), 64)
    assert float(out[0]) == pytest.approx(0.01)


def test_refine_box_offsets_scaled_by_box_size():
    boxes = torch.tensor([[10.0, 20.0, 30.0, 60.0]], dtype=torch.float64)
    ref = AdapterRefinement(torch.zeros(1, 1, dtype=torch.float64), torch.tensor([[1.0, -1.0, 0.5, 0.0]], dtype=torch.float64),
                            torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64))
    out = refine(torch.zeros(1, 1, dtype=torch.float64), boxes, torch.zeros(1, 1, 1, 1, dtype=torch.float64), ref, RefinementConfig(beta=0.1), 64)
    assert out[1][0].tolist() == pytest.approx([12.0, 16.0, 31.0, 60.0])
    huge = AdapterRefinement(ref.cls_priors, torch.tensor([[1.0, 1.0, -1.0, -1.0]], dtype=torch.float64), ref.gates)
    flipped = refine(torch.zeros(1, 1, dtype=torch.float64), boxes, torch.zeros(1, 1, 1, 1, dtype=torch.float64), huge, RefinementConfig(beta=1.0), 64)[1]
    assert (flipped[:, 2:] >= flipped[:, :2]).all() and flipped.min() >= 0 and flipped.max() <= 64


def test_refine_gate_logit_addition():
    cls, boxes, aff = _rows()
    ref = _refinement()
    out = refine(cls, boxes, aff, ref, RefinementConfig(gamma=0.2), 64)[2]
    assert torch.allclose(out, aff + 0.2 * logit(ref.gates))


# matching and losses --------------------------------------------------------------------


def test_match_entries():
    sel = np.array([[0, 0, 10, 10], [50, 50, 60, 60], [0, 0, 10, 10]], dtype=np.float64)
    tcls, tbox, gidx = match_entries(sel, np.array([0, 0, 1]), [[3, 1], []], [np.array([[0, 0, 10, 12], [100, 100, 110, 110]]), np.zeros((0, 4))])
    assert tcls.tolist() == [3, -1, -1]
    assert gidx.tolist() == [0, -1, -1]
    assert tbox[0].tolist() == [0, 0, 10, 12]


def test_smooth_l1_convention():
    assert float(smooth_l1(torch.tensor(0.05, dtype=torch.float64))) == pytest.approx(0.5 * 0.05**2 * 9, abs=1e-15)
    assert float(smooth_l1(torch.tensor(0.05))) == pytest.approx(0.01125, abs=1e-6)
    assert float(smooth_l1(torch.tensor(-1.0, dtype=torch.float64))) == pytest.approx(1 - 0.5 / 9)
    assert float(smooth_l1(torch.tensor(0.0))) == 0.0


def test_adapter_losses_cases():
    cls = torch.zeros(2, 3, dtype=torch.float64)
    boxes = torch.tensor([[0.0, 0.0, 10.0, 10.0], [5.0, 5.0, 9.0, 9.0]], dtype=torch.float64)
    target = torch.rand(1, 2, 4, 4, dtype=torch.float64) * 0.8 + 0.1
    aff = logit(target)
    region = torch.zeros(1, 1, 4, 4, dtype=torch.bool)
    region[0, 0, :2, :2] = True
    l_cls, l_box, l_gate = adapter_losses(cls, boxes, aff, np.array([1, -1]), np.array([[0, 0, 10, 10], [0, 0, 0, 0]]), target, region, 64)
    assert float(l_cls) == pytest.approx(math.log(2))
    assert float(l_box) == 0.0
    t = target[:, :, :2, :2]
    floor = -(t * t.log() + (1 - t) * (1 - t).log()).mean()
    assert float(l_gate) == pytest.approx(float(floor), abs=1e-6)
    shifted = boxes.clone()
    shifted[0, 0] += 0.05 * 64
    _, l_box2, _ = adapter_losses(cls, shifted, aff, np.array([1, -1]), np.array([[0, 0, 10, 10], [0, 0, 0, 0]]), target, region, 64)
    assert float(l_box2) == pytest.approx(0.01125, abs=1e-9)
    _, l_none, _ = adapter_losses(cls, boxes, aff, np.array([-1, -1]), np.zeros((2, 4)), target, region, 64)
    assert float(l_none) == 0.0


def test_adapter_gradient_connectivity():
    ad = Adapter(AdapterConfig(), CLASSES, AFFS)
    images, maps = torch.rand(2, 3, 32, 32), torch.rand(2, 5, 32, 32)
    boxes = torch.tensor([[2.0, 2.0, 20.0, 20.0], [4.0, 8.0, 30.0, 31.0]])
    bidx = torch.tensor([0, 1])
    tokens = [prompt_tokens(ad.lm, i, Box(*b.tolist()), CLASSES, AFFS, 32) for i, b in enumerate(boxes)]
    h = ad.encode(images, maps, bidx, boxes, tokens)
    r = ad.heads(h, bidx, boxes, 2, (4, 4), 8)
    (r.cls_priors.pow(2).sum() + r.box_offsets.sum() + r.gates.sum()).backward()
    # B starts at zero, so A's gradient is zero on the first step; B's is not
    for name, p in ad.named_parameters():
        if not p.requires_grad or "lora_A" in name:
            continue
        assert p.grad is not None and p.grad.abs().sum() > 0, name
    assert all(p.grad is None for n, p in ad.lm.named_parameters() if "lora_" not in n)
