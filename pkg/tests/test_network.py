import dataclasses

import numpy as np
import pytest

from bnndense.autodiff import Tape
from bnndense.blocks import AttentionMaps, attention_apply, binary_branch_conv
from bnndense.exceptions import ConfigError, FormatError, ShapeError
from bnndense.network import (
    ModelConfig, build_model, export_packed, forward, load_checkpoint, read_packed, save_checkpoint,
)
from bnndense.tensorcore import BitPlane

import oracles

SMALL = dict(height=32, width=32, widths=(4, 6, 8, 8), K=2, units_per_stage=2)


def closed_form_params(cfg: ModelConfig) -> int:
    """Parameter count written out from the architecture: convs, norm affines, gates and attention strength."""
    w, k = cfg.widths, cfg.K
    conv = lambda ci, co, ks: ci * co * ks * ks + 2 * co
    total = conv(cfg.in_channels, w[0], 3)
    prev = w[0]
    for c in w:
        total += conv(prev, c, 3) + (conv(prev, c, 1) if prev != c else 0)
        total += (cfg.units_per_stage - 1) * conv(c, c, 3)
        prev = c
    for d in range(4):
        c, c_out = w[3 - d], (w[2 - d] if d < 3 else w[0])
        total += (conv(c, c, 1) if d else 0) + 4 * conv(c, c, 3)
        total += (conv(c, c, 1) + 1) if cfg.attention else 0
        total += k * (conv(c, c, 3) + conv(c, c_out, 3)) + 2 * k
    return total + w[0] * cfg.classes + cfg.classes


@pytest.mark.parametrize("overrides", [{}, {"K": 1}, {"attention": False}, {"widths": (8, 8, 8, 8)},
                                       {"units_per_stage": 1, "classes": 3}])
def test_param_count_closed_form(overrides):
    m = build_model(ModelConfig(**overrides))
    assert m.n_params() == closed_form_params(m.cfg)
    assert m.n_params() == sum(r.params for r in m.describe())


def test_default_param_count_pinned():
    assert build_model(ModelConfig()).n_params() == 2_303_318


def test_invalid_configs():
    for bad in ({"height": 40}, {"K": 0}, {"widths": (4, 4, 4)}, {"classes": 1}, {"pad_value": 0.0}):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)


def _eval_conv(m, layer, x, binary_mode):
    """Single-sample reference of one ConvBN in inference mode."""
    s = m.store
    w = s[layer.name + ".w"].astype(np.float64)
    pad = layer.k // 2
    if layer.binary and binary_mode:
        y = binary_branch_conv(x, layer.quantized(s), stride=layer.stride, pad=pad,
                               pad_value=int(m.cfg.pad_value))
    else:
        inp = np.clip(x, -1, 1) if layer.binary else x
        y = oracles.float_conv_nchw(inp[None], w, layer.stride, pad, 0.0)[0]
    if not layer.norm:
        return y + s[layer.name + ".bias"].astype(np.float64)[:, None, None]
    g = lambda n: s[f"{layer.name}.bn.{n}"].astype(np.float64)[:, None, None]
    return (y - g("mean")) / np.sqrt(g("var") + 1e-5) * g("gamma") + g("beta")


def _residual(m, unit, x, bm):
    short = x
    if unit.stride > 1:
        c, h, w = x.shape
        short = x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    if unit.proj is not None:
        short = _eval_conv(m, unit.proj, short, bm)
    return short + _eval_conv(m, unit.body, x, bm)


def reference_logits(m, image):
    """Straight-line float64 forward of one image, written without the tape."""
    bm = m.cfg.binary_active
    s = m.store
    x = _eval_conv(m, m.stem, image.astype(np.float64), bm)
    feats = []
    for units in m.stages:
        for u in units:
            x = _residual(m, u, x, bm)
        feats.append(x)
    x = feats[3]
    for d, blk in enumerate(m.decoder):
        if blk["lateral"] is not None:
            x = x + _eval_conv(m, blk["lateral"], feats[3 - d], bm)
        for u in blk["convs"]:
            x = _residual(m, u, x, bm)
        maps = None
        if blk["attn"] is not None:
            a = blk["attn"]
            p = _eval_conv(m, a.proj, x, bm).reshape(x.shape[0], -1)
            if a.proj.binary and bm:
                p = oracles.sign(p)
            maps = AttentionMaps((p.T @ p >= a.tau).astype(float), (p @ p.T >= a.tau).astype(float),
                                 float(s[a.name + ".beta"][0]))
        up = blk["up"]
        ys = []
        for conv in up.conv1:
            y = _eval_conv(m, conv, x, bm)
            if maps is not None:
                y = attention_apply(maps, y)
            ys.append(y.repeat(2, axis=1).repeat(2, axis=2))
        alpha = oracles.sigmoid(s[up.name + ".theta"])
        lam = oracles.sigmoid(s[up.name + ".phi"])
        x = 0
        for i in range(up.K):
            z = ys[i] + (1 - alpha[i]) * sum(ys[j] for j in range(up.K) if j != i)
            x = x + lam[i] * _eval_conv(m, up.conv2[i], z, bm)
    return _eval_conv(m, m.head, x, bm)


def assert_normwise_close(got, ref, rel=1e-5):
    # normwise rather than per element: cancellation makes per-element ratios meaningless near zero,
    # and gate and attention scalars are float32 parameters even on a float64 forward
    assert np.max(np.abs(got - ref)) <= rel * np.max(np.abs(ref))


def _randomise(m, rng):
    """Perturb every slot so norms, gates and attention strength are all exercised."""
    for name, value in m.store.items():
        if name.endswith(".bn.var"):
            m.store[name] = rng.uniform(0.5, 2.0, value.shape)
        elif name.endswith((".theta", ".phi", ".beta", ".bn.mean", ".bias")):
            m.store[name] = rng.normal(0, 0.5, value.shape)
        elif name.endswith(".bn.gamma"):
            m.store[name] = rng.uniform(0.5, 1.5, value.shape)
    return m


def test_float_network_matches_reference(rng):
    cfg = ModelConfig(**SMALL, binarize_encoder=False, binarize_decoder=False, attention=False)
    m = _randomise(build_model(cfg), rng)
    x = rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
    got = m.logits(x)
    assert got.shape == (2, 2, 32, 32)
    for n in range(2):
        assert_normwise_close(got[n], reference_logits(m, x[n]))


def test_float_network_with_attention_matches_reference(rng):
    cfg = ModelConfig(**SMALL, binarize_encoder=False, binarize_decoder=False)
    m = _randomise(build_model(cfg), rng)
    x = rng.uniform(0, 1, (1, 3, 32, 32))
    assert_normwise_close(m.logits(x, dtype=np.float64)[0], reference_logits(m, x[0]))


@pytest.mark.parametrize("enc,dec", [(True, True), (True, False), (False, True)])
def test_binary_network_matches_reference(rng, enc, dec):
    cfg = ModelConfig(**SMALL, binarize_encoder=enc, binarize_decoder=dec)
    m = _randomise(build_model(cfg), rng)
    x = rng.uniform(0, 1, (1, 3, 32, 32))
    assert_normwise_close(m.logits(x, dtype=np.float64)[0], reference_logits(m, x[0]))


def test_forward_shape_and_errors(rng):
    m = build_model(ModelConfig(**SMALL))
    assert forward(m, rng.random((3, 32, 32))).shape == (2, 32, 32)
    with pytest.raises(ShapeError):
        forward(m, rng.random((3, 16, 32)))
    with pytest.raises(ShapeError):
        forward(m, rng.random((1, 3, 32, 32)))
    with pytest.raises(ValueError):
        forward(m, np.full((3, 32, 32), np.nan))


def test_resolution_doubling_per_block():
    m = build_model(ModelConfig(**SMALL))
    rows = [r for r in m.describe() if r.name.endswith(".conv2")]
    assert [(r.h, r.w) for r in rows] == [(4, 4), (8, 8), (16, 16), (32, 32)]
    big = build_model(ModelConfig(**dict(SMALL, height=64, width=48)))
    assert forward(big, np.zeros((3, 64, 48))).shape == (2, 64, 48)


def test_forward_deterministic_and_zero_image(rng):
    m = build_model(ModelConfig(**SMALL))
    x = rng.random((3, 32, 32))
    assert forward(m, x).tobytes() == forward(m, x).tobytes()
    assert np.all(np.isfinite(forward(m, np.zeros((3, 32, 32)))))


def test_first_and_last_layers_stay_float():
    for enc, dec in [(True, True), (False, False), (True, False), (False, True)]:
        audit = build_model(ModelConfig(**SMALL, binarize_encoder=enc, binarize_decoder=dec)).precision_audit()
        assert audit["stem"] == "float" and audit["head"] == "float"
        assert all(v == "float" for k, v in audit.items() if k.endswith(".short") or ".lateral" in k)
        assert any(v == "binary" for k, v in audit.items() if k.startswith("enc")) == enc
        assert any(v == "binary" for k, v in audit.items() if k.startswith("dec")) == dec


def test_no_binarizer_nodes_when_both_toggles_off(rng):
    m = build_model(ModelConfig(**SMALL, binarize_encoder=False, binarize_decoder=False))
    t = Tape()
    m.run(t, rng.random((1, 3, 32, 32)), m.context(training=True))
    assert not {"sign_poly", "sign_ste"} & set(t.ops_used())
    t = Tape()
    on = build_model(ModelConfig(**SMALL))
    on.run(t, rng.random((1, 3, 32, 32)), on.context(training=True))
    assert {"sign_poly", "sign_ste"} <= set(t.ops_used())


def test_checkpoint_roundtrip_and_fixed_point(rng):
    m = _randomise(build_model(ModelConfig(**SMALL)), rng)
    blob = save_checkpoint(m)
    back = load_checkpoint(blob)
    assert save_checkpoint(back) == blob
    for name, value in m.store.items():
        assert back.store[name].tobytes() == value.tobytes()
    x = rng.random((3, 32, 32))
    assert forward(back, x).tobytes() == forward(m, x).tobytes()
    assert load_checkpoint(blob, expected=m.cfg).cfg == m.cfg


def test_checkpoint_rejects_corruption_and_mismatch(rng):
    m = build_model(ModelConfig(**SMALL))
    blob = save_checkpoint(m)
    with pytest.raises(FormatError):
        load_checkpoint(b"XNNC" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(blob[:4] + (9).to_bytes(2, "little") + blob[6:])
    with pytest.raises(FormatError):
        load_checkpoint(blob[: len(blob) // 2])
    with pytest.raises(ConfigError):
        load_checkpoint(blob, expected=dataclasses.replace(m.cfg, K=3))


def test_packed_export_contains_bits_for_binary_layers():
    m = build_model(ModelConfig(**SMALL))
    entries, cfg = read_packed(export_packed(m))
    names = dict(entries)
    assert cfg == m.cfg
    assert isinstance(names["enc1.u0.conv.w.bits"], BitPlane)
    assert "stem.w" in names and "stem.w.bits" not in names
    assert names["dec0.up.b1.conv2.w.scale"].shape == (m.cfg.widths[2],)
