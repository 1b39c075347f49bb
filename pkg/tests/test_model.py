import numpy as np
import pytest

from sparsefusion import autodiff as ad
from sparsefusion import encoder as enc
from sparsefusion import fusion as fu
from sparsefusion import model as md


def tiny_cfg(**over):
    base = dict(
        modalities=[md.ModalityConfig("a", 5, 6, 2),
                    md.ModalityConfig("b", 3, 4, 2)],
        dim=8, heads=2, unimodal_depth=2, cross_depth=2,
        num_classes=3, dropout=0.0)
    base.update(over)
    return md.ModelConfig(**base)


def rand_inputs(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((m.n_tokens, m.dim_in)) for m in cfg.modalities]


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_cfg(dim=9)  # not divisible by heads
    with pytest.raises(ValueError):
        tiny_cfg(num_classes=1)
    with pytest.raises(ValueError):
        md.ModalityConfig("x", 4, 3, 5)  # keep > n


def test_config_dict_round_trip():
    cfg = tiny_cfg(pool_kind="max", concat_keep=4, baseline_pool_after_first=True)
    again = md.ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg


@pytest.mark.parametrize("variant", ["sft", "sft-po", "concat", "lf", "unimodal:a"])
def test_forward_probability_contract(variant):
    cfg = tiny_cfg()
    params = md.build_params(cfg, variant, np.random.default_rng(1))
    pred = md.forward(variant, rand_inputs(cfg), params, cfg)
    assert pred.probs.shape == (3,)
    assert abs(pred.probs.sum() - 1.0) < 1e-9
    assert np.all(pred.probs >= 0) and np.all(pred.probs <= 1)


def test_sft_fused_token_count():
    cfg = tiny_cfg()
    params = md.build_params(cfg, "sft", np.random.default_rng(2))
    pred = md.sft_forward(rand_inputs(cfg), params, cfg)
    assert pred.fused_tokens == 1 + 2 + 2 == cfg.fused_tokens


def test_sft_forward_equals_manual_stage_composition():
    cfg = tiny_cfg()
    params = md.build_params(cfg, "sft", np.random.default_rng(3))
    inputs = rand_inputs(cfg, seed=4)
    pred = md.sft_forward(inputs, params, cfg)

    # compose the pipeline from the stage operations directly
    pooled, cls_tokens = [], []
    for m, mc in enumerate(cfg.modalities):
        ts = enc.project_and_embed(inputs[m], params.encoders[m], mc.name)
        ts = enc.unimodal_encode(ts, params.encoders[m], cfg.heads)
        spec = fu.PoolSpec(cfg.pool_kind, mc.keep)
        mask = fu.build_strided_mask(mc.n_tokens + 1, spec.stride_for(mc.n_tokens))
        ts, _w = fu.strided_sparse_attention(ts, params.sparse[m], cfg.heads, mask)
        cls_tokens.append(ad.slice_rows(ts.tokens, 0, 1))
        pooled.append(fu.pool_tokens(
            ad.slice_rows(ts.tokens, 1, mc.n_tokens + 1), spec))
    fused = fu.fuse(fu.merge_cls(cls_tokens), pooled)
    for lp in params.cross:
        fused, _ = enc.encoder_layer(fused, lp, cfg.heads)
    logits = md.apply_head(params.head, ad.slice_rows(fused, 0, 1))
    np.testing.assert_array_equal(pred.logits, logits.data[0])


def test_eval_mode_deterministic_even_with_dropout_config():
    cfg = tiny_cfg(dropout=0.3)
    for variant in ("sft", "concat", "lf"):
        params = md.build_params(cfg, variant, np.random.default_rng(5))
        a = md.forward(variant, rand_inputs(cfg), params, cfg, mode="eval")
        b = md.forward(variant, rand_inputs(cfg), params, cfg, mode="eval")
        np.testing.assert_array_equal(a.probs, b.probs)


def test_train_mode_dropout_changes_output():
    cfg = tiny_cfg(dropout=0.3)
    params = md.build_params(cfg, "sft", np.random.default_rng(6))
    a = md.forward("sft", rand_inputs(cfg), params, cfg, "train",
                   np.random.default_rng(1))
    b = md.forward("sft", rand_inputs(cfg), params, cfg, "train",
                   np.random.default_rng(2))
    assert not np.array_equal(a.probs, b.probs)


def test_identity_pooling_degrades_to_concat_after_encoders():
    cfg = tiny_cfg(modalities=[md.ModalityConfig("a", 5, 6, 6),
                               md.ModalityConfig("b", 3, 4, 4)])
    params = md.build_params(cfg, "sft", np.random.default_rng(7))
    pred = md.sft_forward(rand_inputs(cfg), params, cfg)
    assert pred.fused_tokens == 1 + 6 + 4


def test_concat_sequence_length():
    cfg = tiny_cfg(modalities=[md.ModalityConfig("a", 5, 3, 1),
                               md.ModalityConfig("b", 3, 4, 1)])
    params = md.build_params(cfg, "concat", np.random.default_rng(8))
    pred = md.concat_forward(rand_inputs(cfg), params, cfg)
    assert pred.fused_tokens == 8  # 1 + 3 + 4


def test_concat_pool_after_first_layer_shrinks_stage():
    cfg = tiny_cfg(baseline_pool_after_first=True, concat_keep=3)
    params = md.build_params(cfg, "concat", np.random.default_rng(9))
    pred = md.concat_forward(rand_inputs(cfg), params, cfg)
    assert pred.fused_tokens == 4  # CLS + 3 pooled


def test_late_fusion_sums_logits():
    cfg = tiny_cfg()
    params = md.build_params(cfg, "lf", np.random.default_rng(10))
    inputs = rand_inputs(cfg)
    pred = md.late_fusion_forward(inputs, params, cfg)
    b0 = md._branch_logits(inputs[0], params.encoders[0], params.heads[0],
                           cfg.modalities[0], cfg, False, None)
    b1 = md._branch_logits(inputs[1], params.encoders[1], params.heads[1],
                           cfg.modalities[1], cfg, False, None)
    np.testing.assert_allclose(pred.logits, b0.data[0] + b1.data[0], atol=1e-12)


def test_late_fusion_branch_independence():
    cfg = tiny_cfg()
    params = md.build_params(cfg, "lf", np.random.default_rng(11))
    inputs = rand_inputs(cfg, seed=12)
    perturbed = [inputs[0], inputs[1] + 0.5]
    b0 = md._branch_logits(inputs[0], params.encoders[0], params.heads[0],
                           cfg.modalities[0], cfg, False, None)
    b0p = md._branch_logits(perturbed[0], params.encoders[0], params.heads[0],
                            cfg.modalities[0], cfg, False, None)
    b1 = md._branch_logits(inputs[1], params.encoders[1], params.heads[1],
                           cfg.modalities[1], cfg, False, None)
    b1p = md._branch_logits(perturbed[1], params.encoders[1], params.heads[1],
                            cfg.modalities[1], cfg, False, None)
    np.testing.assert_array_equal(b0.data, b0p.data)
    assert not np.array_equal(b1.data, b1p.data)


def test_unimodal_ignores_other_modalities():
    cfg = tiny_cfg()
    params = md.build_params(cfg, "unimodal:a", np.random.default_rng(13))
    inputs = rand_inputs(cfg, seed=14)
    other = [inputs[0], inputs[1] * 3.0]
    a = md.forward("unimodal:a", inputs, params, cfg)
    b = md.forward("unimodal:a", other, params, cfg)
    np.testing.assert_array_equal(a.probs, b.probs)


def test_modalities_do_not_interact_before_fusion():
    cfg = tiny_cfg()
    params = md.build_params(cfg, "sft", np.random.default_rng(15))
    inputs = rand_inputs(cfg, seed=16)
    perturbed = [inputs[0], inputs[1] + 1.0]
    e0a = enc.unimodal_encode(
        enc.project_and_embed(inputs[0], params.encoders[0]), params.encoders[0],
        cfg.heads)
    e0b = enc.unimodal_encode(
        enc.project_and_embed(perturbed[0], params.encoders[0]), params.encoders[0],
        cfg.heads)
    np.testing.assert_array_equal(e0a.tokens.data, e0b.tokens.data)


def test_variant_parsing():
    cfg = tiny_cfg()
    assert md.parse_variant("unimodal:b", cfg) == ("unimodal", 1)
    assert md.parse_variant("unimodal:0", cfg) == ("unimodal", 0)
    with pytest.raises(ValueError):
        md.parse_variant("unimodal:z", cfg)
    with pytest.raises(ValueError):
        md.parse_variant("mystery", cfg)


def test_input_shape_errors():
    cfg = tiny_cfg()
    params = md.build_params(cfg, "sft", np.random.default_rng(17))
    bad = [np.zeros((6, 5)), np.zeros((4, 4))]
    with pytest.raises(ad.ShapeError):
        md.sft_forward(bad, params, cfg)


def test_mix_application_endpoints_reproduce_unmixed():
    cfg = tiny_cfg()
    params = md.build_params(cfg, "sft", np.random.default_rng(18))
    a = rand_inputs(cfg, seed=19)
    b = rand_inputs(cfg, seed=20)
    plain = md.sft_forward(a, params, cfg)
    for layer in (1, 2, 3, 4):
        lams = [1.0, 1.0] if layer <= cfg.unimodal_depth else [1.0]
        mixed = md.sft_forward(a, params, cfg,
                               mix=md.MixApplication(layer, lams, b))
        np.testing.assert_allclose(mixed.logits, plain.logits, atol=1e-12)
    plain_b = md.sft_forward(b, params, cfg)
    for layer in (1, 3):
        lams = [0.0, 0.0] if layer <= cfg.unimodal_depth else [0.0]
        mixed = md.sft_forward(a, params, cfg,
                               mix=md.MixApplication(layer, lams, b))
        np.testing.assert_allclose(mixed.logits, plain_b.logits, atol=1e-12)


def _single_modality_cfg():
    return md.ModelConfig(
        modalities=[md.ModalityConfig("solo", 5, 6, 3)],
        dim=8, heads=2, unimodal_depth=1, cross_depth=1,
        num_classes=3, dropout=0.0)


def test_concat_single_modality_equals_unimodal_classifier():
    cfg = _single_modality_cfg()
    rng = np.random.default_rng(30)
    uni = md.build_params(cfg, "unimodal:solo", rng)
    concat = md.build_params(cfg, "concat", np.random.default_rng(31))
    # graft the unimodal weights onto the concat layout
    concat.proj_w[0].data = uni.encoder.proj_w.data.copy()
    concat.proj_b[0].data = uni.encoder.proj_b.data.copy()
    concat.cls.data = uni.encoder.cls.data.copy()
    concat.pos.data = uni.encoder.pos.data.copy()
    for lp_c, lp_u in zip(concat.layers, uni.encoder.layers):
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                     "ln1_g", "ln1_b", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
            getattr(lp_c, name).data = getattr(lp_u, name).data.copy()
    for name in ("ln_g", "ln_b", "w1", "b1", "w2", "b2"):
        getattr(concat.head, name).data = getattr(uni.head, name).data.copy()
    inputs = [np.random.default_rng(32).standard_normal((6, 5))]
    a = md.forward("unimodal:solo", inputs, uni, cfg)
    b = md.forward("concat", inputs, concat, cfg)
    np.testing.assert_array_equal(a.logits, b.logits)


def test_late_fusion_single_modality_equals_unimodal_classifier():
    cfg = _single_modality_cfg()
    rng = np.random.default_rng(33)
    lf = md.build_params(cfg, "lf", rng)
    uni = md.UnimodalParams(0, lf.encoders[0], lf.heads[0])
    inputs = [np.random.default_rng(34).standard_normal((6, 5))]
    a = md.forward("lf", inputs, lf, cfg)
    b = md.forward("unimodal:solo", inputs, uni, cfg)
    np.testing.assert_array_equal(a.logits, b.logits)
    np.testing.assert_array_equal(a.probs, b.probs)


@pytest.mark.parametrize("magnitude", [1e-6, 1.0, 1e6])
def test_forwards_valid_probabilities_on_extreme_inputs(magnitude):
    cfg = tiny_cfg()
    rng = np.random.default_rng(35)
    inputs = [rng.standard_normal((m.n_tokens, m.dim_in)) * magnitude
              for m in cfg.modalities]
    for variant in ("sft", "sft-po", "concat", "lf"):
        params = md.build_params(cfg, variant, np.random.default_rng(36))
        pred = md.forward(variant, inputs, params, cfg)
        assert np.all(np.isfinite(pred.probs))
        assert abs(pred.probs.sum() - 1.0) < 1e-9
        assert np.all(pred.probs >= 0)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_cfg(pool_kind="max")
    params = md.build_params(cfg, "sft", np.random.default_rng(21))
    path = tmp_path / "model.sftm"
    md.save_checkpoint(path, "sft", cfg, params)
    variant, cfg2, params2 = md.load_checkpoint(path)
    assert variant == "sft" and cfg2 == cfg
    orig = dict(params.named())
    for name, tensor in params2.named():
        assert np.array_equal(tensor.data, orig[name].data), name
    # and the reloaded model predicts identically
    inputs = rand_inputs(cfg, seed=22)
    np.testing.assert_array_equal(
        md.sft_forward(inputs, params, cfg).probs,
        md.sft_forward(inputs, params2, cfg2).probs)
    # double round trip produces identical bytes
    path2 = tmp_path / "model2.sftm"
    md.save_checkpoint(path2, variant, cfg2, params2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.sftm"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(md.CheckpointError):
        md.load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    cfg = tiny_cfg()
    params = md.build_params(cfg, "concat", np.random.default_rng(23))
    path = tmp_path / "model.sftm"
    md.save_checkpoint(path, "concat", cfg, params)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 9])
    with pytest.raises(md.CheckpointError):
        md.load_checkpoint(path)
