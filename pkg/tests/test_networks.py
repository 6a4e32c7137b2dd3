import numpy as np
import pytest

from voxfuse.autodiff import Tensor, ops
from voxfuse.networks import (
    DecoderConfig,
    EncoderConfig,
    FusionConfig,
    ModelBundle,
    code_shape,
    decode,
    decode_logits,
    encode,
    fuse,
    init_encoder,
    init_fusion,
)


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle.initialize(seed=7)


def test_encode_output_shape(bundle):
    rng = np.random.default_rng(0)
    code = encode(rng.uniform(size=(100, 3)), bundle.encoder, bundle.enc_cfg)
    assert code.shape == code_shape(bundle.enc_cfg)
    assert np.all(np.isfinite(code.data))


def test_encode_permutation_invariant_bit_exact(bundle):
    rng = np.random.default_rng(1)
    pts = rng.uniform(size=(200, 3))
    code = encode(pts, bundle.encoder, bundle.enc_cfg)
    for seed in range(3):
        perm = np.random.default_rng(seed).permutation(len(pts))
        code_p = encode(pts[perm], bundle.encoder, bundle.enc_cfg)
        assert np.array_equal(code.data, code_p.data)


def test_encode_empty_cloud_deterministic(bundle):
    a = encode(np.zeros((0, 3)), bundle.encoder, bundle.enc_cfg)
    b = encode(np.zeros((0, 3)), bundle.encoder, bundle.enc_cfg)
    assert np.array_equal(a.data, b.data)
    assert a.shape == code_shape(bundle.enc_cfg)


def test_encode_matches_step_by_step_pipeline(bundle):
    # re-run the pipeline stage by stage with raw ops and compare
    rng = np.random.default_rng(2)
    pts = rng.uniform(size=(64, 3)).astype(np.float32)
    ps, cfg = bundle.encoder, bundle.enc_cfg

    x = ops.relu(ops.linear(Tensor(pts), ps["pmlp.w0"], ps["pmlp.b0"]))
    x = ops.relu(ops.linear(x, ps["pmlp.w1"], ps["pmlp.b1"]))
    grid = ops.scatter_pool(pts, x, cfg.grid_res, mode="mean")
    grid = ops.relu(ops.conv3d(grid, ps["stem.w"], ps["stem.b"], stride=1, padding=1))
    grid = ops.relu(ops.conv3d(grid, ps["down0.w"], ps["down0.b"], stride=2, padding=1))
    grid = ops.conv3d(grid, ps["down1.w"], ps["down1.b"], stride=2, padding=1)

    code = encode(pts, ps, cfg)
    assert np.array_equal(code.data, grid.data)


def test_decode_probabilities_in_unit_interval(bundle):
    rng = np.random.default_rng(3)
    code = encode(rng.uniform(size=(50, 3)), bundle.encoder, bundle.enc_cfg)
    q = rng.uniform(size=(64, 3))
    p = decode(code, q, bundle.decoder, bundle.dec_cfg)
    assert p.shape == (64,)
    assert np.all(p.data >= 0) and np.all(p.data <= 1)


def test_decode_deterministic_per_location(bundle):
    rng = np.random.default_rng(4)
    code = encode(rng.uniform(size=(50, 3)), bundle.encoder, bundle.enc_cfg)
    q = np.array([[0.3, 0.4, 0.5], [0.3, 0.4, 0.5]])
    p = decode(code, q, bundle.decoder, bundle.dec_cfg)
    assert p.data[0] == p.data[1]


def test_decode_matches_arithmetic_reference(bundle):
    # independent re-implementation with plain numpy
    rng = np.random.default_rng(5)
    code = encode(rng.uniform(size=(40, 3)), bundle.encoder, bundle.enc_cfg)
    q = rng.uniform(size=(16, 3)).astype(np.float32)
    ps, cfg = bundle.decoder, bundle.dec_cfg

    grid = code
    for i in range(cfg.depth):
        grid = ops.transposed_conv3d(grid, ps[f"up{i}.w"], ps[f"up{i}.b"], stride=2, padding=1)
        if i < cfg.depth - 1:
            grid = ops.relu(grid)
    grid = np.maximum(grid.data, 0)

    l = grid.shape[1]
    feats = np.zeros((len(q), grid.shape[0]), dtype=np.float64)
    for m, pt in enumerate(q):
        u = np.clip(pt.astype(np.float64), 0, 1) * (l - 1)
        i0 = np.minimum(u.astype(int), l - 2)
        t = u - i0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = ((t[0] if dx else 1 - t[0])
                         * (t[1] if dy else 1 - t[1])
                         * (t[2] if dz else 1 - t[2]))
                    feats[m] += w * grid[:, i0[0] + dx, i0[1] + dy, i0[2] + dz]
    h = np.concatenate([feats, q.astype(np.float64)], axis=1)
    h = np.maximum(h @ ps["mlp.w0"].data.T.astype(np.float64) + ps["mlp.b0"].data, 0)
    h = np.maximum(h @ ps["mlp.w1"].data.T.astype(np.float64) + ps["mlp.b1"].data, 0)
    logits_ref = (h @ ps["mlp.w2"].data.T.astype(np.float64) + ps["mlp.b2"].data).reshape(-1)

    probs = decode(code, q, ps, cfg)
    ref = 1.0 / (1.0 + np.exp(-logits_ref))
    assert np.max(np.abs(probs.data - ref)) < 1e-5


def test_decode_lipschitz_in_query(bundle):
    rng = np.random.default_rng(6)
    code = encode(rng.uniform(size=(80, 3)), bundle.encoder, bundle.enc_cfg)
    base = rng.uniform(0.1, 0.9, size=(50, 3))
    eps = 1e-4
    shift = base + np.array([eps, 0, 0])
    p0 = decode(code, base, bundle.decoder, bundle.dec_cfg).data
    p1 = decode(code, shift, bundle.decoder, bundle.dec_cfg).data
    # finite Lipschitz constant: bounded probability change for a tiny step
    assert np.max(np.abs(p1 - p0)) <= 1000.0 * eps


def test_fuse_zero_input_zero_biases(bundle):
    cfg = FusionConfig(latent_channels=8, identity_skip=False)
    ps = init_fusion(cfg, seed=0)
    zero = Tensor(np.zeros((8, 4, 4, 4), dtype=np.float32))
    out = fuse(zero, ps, cfg)
    assert np.array_equal(out.data, zero.data)


def test_fuse_preserves_shape_paper_scale():
    cfg = FusionConfig(latent_channels=128)
    ps = init_fusion(cfg, seed=1)
    code = Tensor(np.random.default_rng(7).normal(size=(128, 6, 6, 6)).astype(np.float32))
    out = fuse(code, ps, cfg)
    assert out.shape == code.shape


def test_fuse_matches_naive_conv_composition(bundle):
    rng = np.random.default_rng(8)
    cfg, ps = bundle.fus_cfg, bundle.fusion
    code = Tensor(rng.normal(size=(cfg.latent_channels, 4, 4, 4)).astype(np.float32))
    ref = ops.conv3d(code, ps["conv0.w"], ps["conv0.b"], stride=1, padding=1)
    ref = ops.relu(ref)
    ref = ops.conv3d(ref, ps["conv1.w"], ps["conv1.b"], stride=1, padding=1)
    expected = code.data + ref.data if cfg.identity_skip else ref.data
    out = fuse(code, ps, cfg)
    assert np.array_equal(out.data, expected)


def test_fusion_initialization_is_near_identity(bundle):
    rng = np.random.default_rng(9)
    code = Tensor(rng.normal(size=(bundle.fus_cfg.latent_channels, 4, 4, 4)).astype(np.float32))
    out = fuse(code, bundle.fusion, bundle.fus_cfg)
    rel = np.linalg.norm(out.data - code.data) / np.linalg.norm(code.data)
    assert rel < 0.05


def test_networks_32_and_64_bit_agree(bundle):
    rng = np.random.default_rng(10)
    pts = rng.uniform(size=(60, 3))
    q = rng.uniform(size=(32, 3))
    enc64 = bundle.encoder.astype(np.float64)
    dec64 = bundle.decoder.astype(np.float64)
    fus64 = bundle.fusion.astype(np.float64)
    c32 = encode(pts, bundle.encoder, bundle.enc_cfg)
    c64 = encode(pts, enc64, bundle.enc_cfg)
    assert np.max(np.abs(c32.data - c64.data)) < 1e-3
    p32 = decode(c32, q, bundle.decoder, bundle.dec_cfg)
    p64 = decode(Tensor(c32.data, dtype=np.float64), q, dec64, bundle.dec_cfg)
    assert np.max(np.abs(p32.data - p64.data)) < 1e-3
    f32 = fuse(c32, bundle.fusion, bundle.fus_cfg)
    f64 = fuse(Tensor(c32.data, dtype=np.float64), fus64, bundle.fus_cfg)
    assert np.max(np.abs(f32.data - f64.data)) < 1e-3


def test_bundle_save_load_roundtrip(tmp_path, bundle):
    path = tmp_path / "model.ckpt"
    bundle.save(path, extra_metadata={"tau_occ": 0.05})
    back = ModelBundle.load(path)
    assert back.enc_cfg == bundle.enc_cfg
    assert back.dec_cfg == bundle.dec_cfg
    assert back.fus_cfg == bundle.fus_cfg
    assert back.extra_metadata["tau_occ"] == 0.05
    for name in bundle.encoder.names():
        assert np.array_equal(back.encoder[name].data, bundle.encoder[name].data)
    rng = np.random.default_rng(11)
    pts = rng.uniform(size=(30, 3))
    a = encode(pts, bundle.encoder, bundle.enc_cfg)
    b = encode(pts, back.encoder, back.enc_cfg)
    assert np.array_equal(a.data, b.data)


def test_decoder_rejects_wrong_code_shape(bundle):
    bad = Tensor(np.zeros((3, 4, 4, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="code shape"):
        decode_logits(bad, np.zeros((1, 3)), bundle.decoder, bundle.dec_cfg)


def test_encoder_config_validation():
    with pytest.raises(ValueError, match="2\\^depth"):
        EncoderConfig(grid_res=12, latent_res=5).depth
