"""The three networks: point-cloud encoder, occupancy decoder, latent fusion.

The encoder lifts local point coordinates through a small per-point MLP,
mean-pools the features onto an R^3 grid and compresses it with a strided
convolution stack (no skip connections) down to a C x L^3 latent code. The
decoder owns the matching up-path of transposed convolutions, so a stored
code can be decoded without its original input: it re-expands the code to an
R^3 feature grid, samples it trilinearly at the query points and maps
(feature, query) through an MLP to an occupancy logit. The fusion network is
two shape-preserving 3-D convolutions applied to the running mean of a
voxel's codes.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamSet, Tensor, ops


@dataclass(frozen=True)
class EncoderConfig:
    point_feat: int = 16        # per-point MLP width and pooled-grid channels
    grid_res: int = 16          # R, cells per axis of the scatter grid
    latent_channels: int = 32   # C
    latent_res: int = 4         # L; R = L * 2^depth
    pool_mode: str = "mean"

    @property
    def depth(self):
        d = int(round(np.log2(self.grid_res / self.latent_res)))
        if self.latent_res * 2 ** d != self.grid_res or d < 1:
            raise ValueError("grid_res must be latent_res * 2^depth")
        return d


@dataclass(frozen=True)
class DecoderConfig:
    point_feat: int = 16        # channels of the re-expanded feature grid
    grid_res: int = 16
    latent_channels: int = 32
    latent_res: int = 4
    mlp_hidden: int = 16

    @property
    def depth(self):
        d = int(round(np.log2(self.grid_res / self.latent_res)))
        if self.latent_res * 2 ** d != self.grid_res or d < 1:
            raise ValueError("grid_res must be latent_res * 2^depth")
        return d


@dataclass(frozen=True)
class FusionConfig:
    latent_channels: int = 32
    kernel: int = 3
    identity_skip: bool = True  # start at (and learn around) plain averaging


def code_shape(cfg):
    return (cfg.latent_channels, cfg.latent_res, cfg.latent_res, cfg.latent_res)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _channel_plan(cfg):
    """Channel counts after each strided conv: point_feat -> ... -> C."""
    chans = [cfg.point_feat]
    for level in range(1, cfg.depth):
        chans.append(min(cfg.point_feat * 2 ** level, cfg.latent_channels))
    chans.append(cfg.latent_channels)
    return chans


def init_encoder(cfg, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    ps = ParamSet(dtype=dtype)
    h = cfg.point_feat
    ps.add("pmlp.w0", _he(rng, (h, 3), 3))
    ps.add("pmlp.b0", np.zeros(h))
    ps.add("pmlp.w1", _he(rng, (h, h), h))
    ps.add("pmlp.b1", np.zeros(h))
    ps.add("stem.w", _he(rng, (h, h, 3, 3, 3), h * 27))
    ps.add("stem.b", np.zeros(h))
    chans = _channel_plan(cfg)
    for i in range(cfg.depth):
        cin, cout = chans[i], chans[i + 1]
        ps.add(f"down{i}.w", _he(rng, (cout, cin, 3, 3, 3), cin * 27))
        ps.add(f"down{i}.b", np.zeros(cout))
    return ps


def init_decoder(cfg, seed=1, dtype=np.float32):
    rng = np.random.default_rng(seed)
    ps = ParamSet(dtype=dtype)
    chans = list(reversed(_channel_plan(cfg)))  # C -> ... -> point_feat
    for i in range(cfg.depth):
        cin, cout = chans[i], chans[i + 1]
        ps.add(f"up{i}.w", _he(rng, (cin, cout, 4, 4, 4), cin * 64))
        ps.add(f"up{i}.b", np.zeros(cout))
    h = cfg.mlp_hidden
    fin = cfg.point_feat + 3
    ps.add("mlp.w0", _he(rng, (h, fin), fin))
    ps.add("mlp.b0", np.zeros(h))
    ps.add("mlp.w1", _he(rng, (h, h), h))
    ps.add("mlp.b1", np.zeros(h))
    ps.add("mlp.w2", _he(rng, (1, h), h))
    ps.add("mlp.b2", np.zeros(1))
    return ps


def init_fusion(cfg, seed=2, dtype=np.float32):
    rng = np.random.default_rng(seed)
    ps = ParamSet(dtype=dtype)
    c, k = cfg.latent_channels, cfg.kernel
    ps.add("conv0.w", _he(rng, (c, c, k, k, k), c * k ** 3))
    ps.add("conv0.b", np.zeros(c))
    # near-zero last layer: with the identity skip the initial fusion is
    # (numerically) plain averaging
    ps.add("conv1.w", rng.normal(0.0, 1e-3, size=(c, c, k, k, k)))
    ps.add("conv1.b", np.zeros(c))
    return ps


def encode(local_points, params, cfg):
    """Encode a local cloud (coordinates in [0,1]^3) into a latent code.

    Permutation-invariant; an empty cloud encodes the all-zero feature grid.
    """
    pts = np.asarray(local_points, dtype=params.dtype).reshape(-1, 3)
    x = ops.linear(Tensor(pts, dtype=params.dtype), params["pmlp.w0"], params["pmlp.b0"])
    x = ops.relu(x)
    x = ops.relu(ops.linear(x, params["pmlp.w1"], params["pmlp.b1"]))
    grid = ops.scatter_pool(pts, x, cfg.grid_res, mode=cfg.pool_mode)
    grid = ops.relu(ops.conv3d(grid, params["stem.w"], params["stem.b"], stride=1, padding=1))
    for i in range(cfg.depth):
        grid = ops.conv3d(grid, params[f"down{i}.w"], params[f"down{i}.b"], stride=2, padding=1)
        if i < cfg.depth - 1:
            grid = ops.relu(grid)
    return grid


def decode_logits(code, queries, params, cfg):
    """Occupancy logits at query points (input-volume frame, [0,1]^3)."""
    if code.shape != code_shape(cfg):
        raise ValueError(f"latent code shape {code.shape} != {code_shape(cfg)}")
    grid = code
    for i in range(cfg.depth):
        grid = ops.transposed_conv3d(grid, params[f"up{i}.w"], params[f"up{i}.b"],
                                     stride=2, padding=1)
        if i < cfg.depth - 1:
            grid = ops.relu(grid)
    grid = ops.relu(grid)
    q = np.asarray(queries, dtype=params.dtype).reshape(-1, 3)
    feat = ops.trilinear_sample(grid, q)
    x = ops.concat([feat, Tensor(q, dtype=params.dtype)], axis=1)
    x = ops.relu(ops.linear(x, params["mlp.w0"], params["mlp.b0"]))
    x = ops.relu(ops.linear(x, params["mlp.w1"], params["mlp.b1"]))
    x = ops.linear(x, params["mlp.w2"], params["mlp.b2"])
    return ops.reshape(x, (-1,))


def decode(code, queries, params, cfg):
    """Occupancy probabilities in [0, 1] at query points."""
    return ops.sigmoid(decode_logits(code, queries, params, cfg))


def fuse(mean_code, params, cfg):
    """Correct an averaged latent code; shape-preserving, final layer linear."""
    if mean_code.shape[0] != cfg.latent_channels:
        raise ValueError(
            f"fusion expects {cfg.latent_channels} channels, got {mean_code.shape[0]}"
        )
    pad = cfg.kernel // 2
    x = ops.relu(ops.conv3d(mean_code, params["conv0.w"], params["conv0.b"],
                            stride=1, padding=pad))
    x = ops.conv3d(x, params["conv1.w"], params["conv1.b"], stride=1, padding=pad)
    if cfg.identity_skip:
        x = ops.add(mean_code, x)
    if x.shape != mean_code.shape:
        raise ValueError(f"fusion changed code shape: {mean_code.shape} -> {x.shape}")
    return x


@dataclass
class ModelBundle:
    """Everything needed to run the map: configs plus trained weights."""

    enc_cfg: EncoderConfig
    dec_cfg: DecoderConfig
    fus_cfg: FusionConfig
    encoder: ParamSet
    decoder: ParamSet
    fusion: ParamSet

    @staticmethod
    def initialize(enc_cfg=None, dec_cfg=None, fus_cfg=None, seed=0, dtype=np.float32):
        enc_cfg = enc_cfg or EncoderConfig()
        dec_cfg = dec_cfg or DecoderConfig(
            point_feat=enc_cfg.point_feat,
            grid_res=enc_cfg.grid_res,
            latent_channels=enc_cfg.latent_channels,
            latent_res=enc_cfg.latent_res,
        )
        fus_cfg = fus_cfg or FusionConfig(latent_channels=enc_cfg.latent_channels)
        return ModelBundle(
            enc_cfg,
            dec_cfg,
            fus_cfg,
            init_encoder(enc_cfg, seed=seed, dtype=dtype),
            init_decoder(dec_cfg, seed=seed + 1, dtype=dtype),
            init_fusion(fus_cfg, seed=seed + 2, dtype=dtype),
        )

    def save(self, path, extra_metadata=None):
        from .autodiff import save_checkpoint
        from dataclasses import asdict

        meta = {
            "encoder_cfg": asdict(self.enc_cfg),
            "decoder_cfg": asdict(self.dec_cfg),
            "fusion_cfg": asdict(self.fus_cfg),
        }
        meta.update(extra_metadata or {})
        save_checkpoint(
            path,
            {"encoder": self.encoder, "decoder": self.decoder, "fusion": self.fusion},
            metadata=meta,
        )

    @staticmethod
    def load(path):
        from .autodiff import load_checkpoint

        sections, meta = load_checkpoint(path)
        bundle = ModelBundle(
            EncoderConfig(**meta["encoder_cfg"]),
            DecoderConfig(**meta["decoder_cfg"]),
            FusionConfig(**meta["fusion_cfg"]),
            sections["encoder"],
            sections["decoder"],
            sections["fusion"],
        )
        bundle.extra_metadata = {
            k: v for k, v in meta.items()
            if k not in ("encoder_cfg", "decoder_cfg", "fusion_cfg")
        }
        return bundle
