"""Full dual-decoder model: shared encoder, bottleneck, gland decoder,
tumor decoder conditioned on gland-decoder features, and two independent
per-pixel projection heads.

Skip wiring is controlled by ``skip_connection_count`` n in [0, 2*stages]:
slots 1..stages enable encoder->decoder1 skips shallow-to-deep, slots
stages+1..2*stages enable the (encoder + decoder1)->decoder2 fusion inputs
shallow-to-deep. With ``dual_decoder=False`` the second decoder and head are
not built at all and the model reduces to a single-decoder variant.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from . import nn
from .autodiff import Tensor, concat
from .config import ModelConfig, configs_from_dict, parse_config_text
from .nn import ParameterStore, ShapeError
from .stages import FinalExpand, Linear, PatchEmbed, PatchExpand, PatchMerge, SwinBlockPair


@dataclass
class DualPrediction:
    """Per-pixel logits, [B, img, img, 1] each; probabilities are sigmoid(logits)."""

    thyroid_logits: Tensor
    ptmc_logits: Tensor
    features: dict | None = None


def skip_wiring(n: int, num_stages: int = 3) -> dict:
    """Deterministic skip-enabling plan for a connection budget ``n``.

    Returns {"encoder_to_dec1": [bool per stage], "into_dec2": [bool per
    stage]}, stages ordered shallow (highest resolution) first.
    """
    if not 0 <= n <= 2 * num_stages:
        raise ValueError(f"skip count {n} outside [0, {2 * num_stages}]")
    return {
        "encoder_to_dec1": [n >= s + 1 for s in range(num_stages)],
        "into_dec2": [n >= num_stages + s + 1 for s in range(num_stages)],
    }


class _Decoder:
    """Mirrored decoder path: per stage (deep to shallow) patch expand, skip
    fusion, linear projection back to the stage width, then Swin blocks."""

    def __init__(self, store, prefix, cfg: ModelConfig, chans, res, skip_on,
                 rng, dtype, extra_skip_sources: int):
        # extra_skip_sources: 1 for decoder1 (encoder skip only), 2 for
        # decoder2 (encoder skip + decoder1 feature) in concatenate mode.
        self.cfg = cfg
        self.skip_on = list(skip_on)
        self.stages = []
        n = cfg.num_stages
        concat_mode = cfg.skip_fusion_mode == "concatenate"
        for s in range(n - 1, -1, -1):
            expand = PatchExpand(store, f"{prefix}.stage{s}.expand", chans[s + 1], rng, dtype)
            n_extra = extra_skip_sources if self.skip_on[s] else 0
            fuse_in = chans[s] * (1 + n_extra) if concat_mode else chans[s]
            fuse = Linear(store, f"{prefix}.stage{s}.fuse", fuse_in, chans[s], rng, dtype)
            blocks = [
                SwinBlockPair(store, f"{prefix}.stage{s}.pair{i}", res[s], res[s], chans[s],
                              cfg.num_heads[s], cfg.window_size, cfg.mlp_ratio,
                              cfg.drop_rate, rng, dtype, cfg.relative_position_bias)
                for i in range(cfg.decoder_depths[s] // 2)
            ]
            self.stages.append((s, expand, fuse, blocks))
        self.final = FinalExpand(store, f"{prefix}.final_expand", chans[0], rng, dtype,
                                 factor=cfg.patch_size)

    def run(self, bottleneck: Tensor, skip_inputs, drop_rng=None):
        """skip_inputs: per stage (shallow-first) list of extra feature lists."""
        x = bottleneck
        stage_outputs = [None] * self.cfg.num_stages
        concat_mode = self.cfg.skip_fusion_mode == "concatenate"
        for s, expand, fuse, blocks in self.stages:
            x = expand(x)
            extras = skip_inputs[s] if self.skip_on[s] else []
            if extras:
                if concat_mode:
                    x = fuse(concat([x] + list(extras), axis=-1))
                else:
                    for e in extras:
                        x = x + e
                    x = fuse(x)
            else:
                x = fuse(x)
            for blk in blocks:
                x = blk(x, drop_rng)
            stage_outputs[s] = x
        return x, stage_outputs


class DualSwinUnet:
    def __init__(self, cfg: ModelConfig, dtype=np.float32, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = ParameterStore()
        store = self.params
        rng = nn.rng_for(seed, nn.STREAM_INIT)

        n = cfg.num_stages
        grid = cfg.img_size // cfg.patch_size
        self.res = [grid // (2 ** s) for s in range(n + 1)]
        self.chans = [cfg.embed_dim * (2 ** s) for s in range(n + 1)]
        wiring = skip_wiring(cfg.skip_connection_count, n)
        self.wiring = wiring

        self.patch_embed = PatchEmbed(store, "patch_embed", cfg.patch_size, cfg.in_channels,
                                      cfg.embed_dim, rng, dtype)
        self.encoder_stages = []
        self.merges = []
        for s in range(n):
            pairs = [
                SwinBlockPair(store, f"encoder.stage{s}.pair{i}", self.res[s], self.res[s],
                              self.chans[s], cfg.num_heads[s], cfg.window_size, cfg.mlp_ratio,
                              cfg.drop_rate, rng, dtype, cfg.relative_position_bias)
                for i in range(cfg.encoder_depths[s] // 2)
            ]
            self.encoder_stages.append(pairs)
            self.merges.append(PatchMerge(store, f"encoder.stage{s}.merge", self.chans[s],
                                          rng, dtype))
        self.bottleneck = [
            SwinBlockPair(store, f"bottleneck.pair{i}", self.res[n], self.res[n], self.chans[n],
                          cfg.num_heads[n], cfg.window_size, cfg.mlp_ratio, cfg.drop_rate,
                          rng, dtype, cfg.relative_position_bias)
            for i in range(cfg.bottleneck_depth // 2)
        ]

        self.decoder1 = _Decoder(store, "decoder1", cfg, self.chans, self.res,
                                 wiring["encoder_to_dec1"], rng, dtype, extra_skip_sources=1)
        self.head1 = Linear(store, "head1", cfg.embed_dim, 1, rng, dtype)
        if cfg.dual_decoder:
            dec2_sources = 2 if cfg.dec2_encoder_skip else 1
            self.decoder2 = _Decoder(store, "decoder2", cfg, self.chans, self.res,
                                     wiring["into_dec2"], rng, dtype,
                                     extra_skip_sources=dec2_sources)
            self.head2 = Linear(store, "head2", cfg.embed_dim, 1, rng, dtype)
        else:
            self.decoder2 = None
            self.head2 = None

    # -- forward pieces ------------------------------------------------------

    def encode(self, x: Tensor, drop_rng=None):
        """Returns (bottleneck features, per-stage skips captured before merging)."""
        cfg = self.cfg
        b, h, w, c = x.shape
        if h != cfg.img_size or w != cfg.img_size or c != cfg.in_channels:
            raise ShapeError(
                f"expected input [B,{cfg.img_size},{cfg.img_size},{cfg.in_channels}], got {x.shape}"
            )
        x = self.patch_embed(x)
        skips = []
        for s in range(cfg.num_stages):
            for pair in self.encoder_stages[s]:
                x = pair(x, drop_rng)
            skips.append(x)
            x = self.merges[s](x)
        for pair in self.bottleneck:
            x = pair(x, drop_rng)
        return x, skips

    def decode_thyroid(self, bottleneck: Tensor, encoder_skips, drop_rng=None):
        skip_inputs = [[encoder_skips[s]] for s in range(self.cfg.num_stages)]
        out, feats = self.decoder1.run(bottleneck, skip_inputs, drop_rng)
        logits = self.head1(self.decoder1.final(out))
        return logits, feats

    def decode_ptmc(self, bottleneck: Tensor, encoder_skips, dec1_features, drop_rng=None):
        if self.decoder2 is None:
            raise ValueError("model was built with dual_decoder=false")
        for s, (skip, feat) in enumerate(zip(encoder_skips, dec1_features)):
            if skip.shape != feat.shape:
                raise ShapeError(
                    f"stage {s}: decoder1 feature {feat.shape} != encoder skip {skip.shape}"
                )
        if self.cfg.dec2_encoder_skip:
            skip_inputs = [[encoder_skips[s], dec1_features[s]]
                           for s in range(self.cfg.num_stages)]
        else:
            skip_inputs = [[dec1_features[s]] for s in range(self.cfg.num_stages)]
        out, _ = self.decoder2.run(bottleneck, skip_inputs, drop_rng)
        return self.head2(self.decoder2.final(out))

    def forward(self, x, drop_rng=None, collect_features: bool = False) -> DualPrediction:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        bottleneck, skips = self.encode(x, drop_rng)
        logits1, feats = self.decode_thyroid(bottleneck, skips, drop_rng)
        if self.cfg.dual_decoder:
            logits2 = self.decode_ptmc(bottleneck, skips, feats, drop_rng)
        else:
            # Single-decoder variant: the lone head's output serves as the
            # tumor prediction.
            logits2 = logits1
        features = None
        if collect_features:
            features = {f"dec1_stage{s}": feats[s] for s in range(len(feats))}
        return DualPrediction(thyroid_logits=logits1, ptmc_logits=logits2, features=features)

    __call__ = forward

    def parameter_count(self) -> int:
        return self.params.count()


# -- checkpoint container -----------------------------------------------------
#
# Layout (all integers little-endian):
#   magic   8 bytes  b"DSWCKPT1"
#   u32 len + UTF-8 resolved model config (key = value lines)
#   u32 len + UTF-8 metadata (key = value lines; may be empty)
#   u32 array count, then per array:
#     u16 name length + UTF-8 name
#     u8 ndim, ndim * u32 dims
#     float32 little-endian data, C order
# Model parameters are stored under "param/<name>", any trainer state under
# "extra/<name>".

CHECKPOINT_MAGIC = b"DSWCKPT1"


class CheckpointError(ValueError):
    pass


def dump_model_config(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            lines.append(f"{f.name} = {'true' if v else 'false'}")
        elif isinstance(v, tuple):
            lines.append(f"{f.name} = [{', '.join(str(x) for x in v)}]")
        else:
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    return "\n".join(lines)


def _write_block(fh, text: str):
    blob = text.encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_block(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_checkpoint(path, cfg: ModelConfig, params: dict, extras: dict | None = None,
                    meta: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in params.items()}
    for k, v in (extras or {}).items():
        arrays[f"extra/{k}"] = v
    meta_text = "\n".join(f"{k} = {v}" for k, v in (meta or {}).items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        _write_block(fh, dump_model_config(cfg))
        _write_block(fh, meta_text)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            blob = name.encode("utf-8")
            fh.write(struct.pack("<H", len(blob)))
            fh.write(blob)
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (ModelConfig, param arrays, extra arrays, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}; not a checkpoint file")
        cfg_text = _read_block(fh)
        meta_text = _read_block(fh)
        (count,) = struct.unpack("<I", fh.read(4))
        params, extras = {}, {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * n_items), dtype="<f4").reshape(shape)
            if name.startswith("param/"):
                params[name[len("param/"):]] = data
            elif name.startswith("extra/"):
                extras[name[len("extra/"):]] = data
            else:
                raise CheckpointError(f"{path}: unknown array namespace in {name!r}")
    cfg = configs_from_dict(parse_config_text(cfg_text))[0]
    meta = parse_config_text(meta_text) if meta_text else {}
    return cfg, params, extras, meta


def load_model(path, dtype=np.float32) -> tuple["DualSwinUnet", dict, dict]:
    """Rebuild the model a checkpoint was saved from and load its weights."""
    cfg, params, extras, meta = load_checkpoint(path)
    model = DualSwinUnet(cfg, dtype=dtype)
    try:
        model.params.load_state(params)
    except ValueError as e:
        raise CheckpointError(f"{path}: {e}") from None
    return model, extras, meta
