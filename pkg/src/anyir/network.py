"""Four-level U-shaped restoration network built from the feature blocks.

Encoder levels run at widths C, 2C, 4C with a latent stage at 8C; each
downsampling trades spatial extent for channels losslessly (pixel unshuffle)
followed by a pointwise adapter.  The decoder mirrors the encoder, except the
last level stays at width 2C and feeds a refinement stack before the output
projection.  A global residual makes the whole network an exact identity when
the output projection is zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import DABParams, conv_weight, dab_forward
from .tensor import RngState, ShapeError, Tensor

CHECKPOINT_MAGIC = b"ANYIR1"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid architecture hyperparameters."""


class CheckpointError(RuntimeError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters; widths double per level from embed_dim."""

    embed_dim: int = 28
    blocks_per_level: tuple = (3, 5, 5, 7)
    heads_per_level: tuple = (1, 2, 4, 8)
    ffn_expansion: int = 2
    gated_expansion: int = 10
    refinement_blocks: int = 4
    lambda_mode: str = "learnable"
    zero_init_output: bool = True
    seed: int = 0

    def validate(self):
        if self.embed_dim < 4 or self.embed_dim % 2 != 0:
            raise ConfigError(f"embed_dim must be an even integer >= 4, got {self.embed_dim}")
        if len(self.blocks_per_level) != 4 or len(self.heads_per_level) != 4:
            raise ConfigError("blocks_per_level and heads_per_level must list 4 levels")
        if any(n < 1 for n in self.blocks_per_level) or self.refinement_blocks < 1:
            raise ConfigError("every block count must be >= 1")
        if self.ffn_expansion < 1 or self.gated_expansion < 1:
            raise ConfigError("expansions must be >= 1")
        if self.lambda_mode not in ("learnable", "fixed"):
            raise ConfigError(f"unknown lambda_mode {self.lambda_mode!r}")
        for lvl in range(4):
            width = self.embed_dim * (2 ** lvl)
            half = width // 2
            if half % self.heads_per_level[lvl] != 0:
                raise ConfigError(
                    f"level {lvl + 1}: heads={self.heads_per_level[lvl]} "
                    f"does not divide branch width {half}")
            hidden = self.gated_expansion * half
            if hidden % 4 != 0:
                raise ConfigError(
                    f"level {lvl + 1}: gated hidden width {hidden} "
                    f"is not divisible by 4 for the channel split")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "blocks_per_level": list(self.blocks_per_level),
            "heads_per_level": list(self.heads_per_level),
            "ffn_expansion": self.ffn_expansion,
            "gated_expansion": self.gated_expansion,
            "refinement_blocks": self.refinement_blocks,
            "lambda_mode": self.lambda_mode,
            "zero_init_output": self.zero_init_output,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(
            embed_dim=int(d["embed_dim"]),
            blocks_per_level=tuple(d["blocks_per_level"]),
            heads_per_level=tuple(d["heads_per_level"]),
            ffn_expansion=int(d["ffn_expansion"]),
            gated_expansion=int(d["gated_expansion"]),
            refinement_blocks=int(d["refinement_blocks"]),
            lambda_mode=str(d["lambda_mode"]),
            zero_init_output=bool(d["zero_init_output"]),
            seed=int(d["seed"]),
        )
        cfg.validate()
        return cfg


def tiny_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(embed_dim=28, blocks_per_level=(3, 5, 5, 7), **overrides)
    cfg.validate()
    return cfg


def small_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(embed_dim=32, blocks_per_level=(4, 6, 6, 8), **overrides)
    cfg.validate()
    return cfg


@dataclass
class Model:
    config: ModelConfig
    embed_w: Tensor
    embed_b: Tensor
    enc: list            # three lists of DABParams
    downs: list          # three pointwise adapters
    latent: list
    ups: list            # up3, up2, up1 pointwise expanders
    reduces: list        # reduce3, reduce2 skip projections
    dec: list            # dec3, dec2, dec1 lists of DABParams
    refine: list
    out_w: Tensor
    out_b: Tensor
    stats: dict = field(default_factory=dict)

    def named_params(self):
        yield "patch_embed.weight", self.embed_w
        yield "patch_embed.bias", self.embed_b
        for lvl, stack in enumerate(self.enc, start=1):
            for i, dab in enumerate(stack):
                yield from dab.named(f"enc{lvl}.{i}")
            yield f"down{lvl}.weight", self.downs[lvl - 1]
        for i, dab in enumerate(self.latent):
            yield from dab.named(f"latent.{i}")
        for k, lvl in enumerate((3, 2, 1)):
            yield f"up{lvl}.weight", self.ups[k]
            if lvl > 1:
                yield f"reduce{lvl}.weight", self.reduces[k]
            for i, dab in enumerate(self.dec[k]):
                yield from dab.named(f"dec{lvl}.{i}")
        for i, dab in enumerate(self.refine):
            yield from dab.named(f"refine.{i}")
        yield "out_conv.weight", self.out_w
        yield "out_conv.bias", self.out_b


def build(config: ModelConfig) -> Model:
    """Deterministically initialize all parameters from config.seed."""
    config.validate()
    gen = RngState(config.seed).generator("init")
    c = config.embed_dim
    widths = [c, 2 * c, 4 * c, 8 * c]

    def stack(count, width, heads):
        return [DABParams.create(gen, width, heads, config.ffn_expansion,
                                 config.gated_expansion, config.lambda_mode)
                for _ in range(count)]

    embed_w = conv_weight(gen, c, 3, 3, 3)
    embed_b = Tensor(np.zeros(c, dtype=np.float32))

    enc, downs = [], []
    for lvl in range(3):
        enc.append(stack(config.blocks_per_level[lvl], widths[lvl],
                         config.heads_per_level[lvl]))
        downs.append(conv_weight(gen, 2 * widths[lvl], 4 * widths[lvl], 1, 1))

    latent = stack(config.blocks_per_level[3], widths[3], config.heads_per_level[3])

    ups, reduces, dec = [], [], []
    for lvl in (3, 2, 1):
        w_in = widths[lvl]            # incoming decoder width
        ups.append(conv_weight(gen, 2 * w_in, w_in, 1, 1))
        if lvl > 1:
            # concat(skip, upsampled) carries 2x the level width
            reduces.append(conv_weight(gen, widths[lvl - 1], 2 * widths[lvl - 1], 1, 1))
            dec_width = widths[lvl - 1]
        else:
            reduces.append(None)
            dec_width = 2 * widths[0]  # final level keeps the concat width
        dec.append(stack(config.blocks_per_level[lvl - 1], dec_width,
                         config.heads_per_level[lvl - 1]))

    refine = stack(config.refinement_blocks, 2 * c, config.heads_per_level[0])

    if config.zero_init_output:
        out_w = Tensor(np.zeros((3, 2 * c, 3, 3), dtype=np.float32))
    else:
        out_w = conv_weight(gen, 3, 2 * c, 3, 3)
    out_b = Tensor(np.zeros(3, dtype=np.float32))

    return Model(config=config, embed_w=embed_w, embed_b=embed_b, enc=enc,
                 downs=downs, latent=latent, ups=ups,
                 reduces=[r for r in reduces if r is not None], dec=dec,
                 refine=refine, out_w=out_w, out_b=out_b)


def _down(x, w):
    return T.conv2d(T.pixel_unshuffle(x, 2), w)


def _up(x, w):
    return T.pixel_shuffle(T.conv2d(x, w), 2)


def forward(m: Model, img: Tensor) -> Tensor:
    """Restore img (N,3,H,W in [0,1]); H and W must be multiples of 8."""
    n, ch, h, w = img.shape
    if ch != 3:
        raise ShapeError(f"expected 3 input channels, got {ch}")
    if h % 8 != 0 or w % 8 != 0:
        pad_h, pad_w = (-h) % 8, (-w) % 8
        raise ShapeError(
            f"spatial size {h}x{w} not divisible by 8; "
            f"pad by ({pad_h}, {pad_w}) to {h + pad_h}x{w + pad_w}")
    c = m.config.embed_dim

    def run(x, stack):
        for dab in stack:
            x = dab_forward(x, dab)
        return x

    x1 = run(T.conv2d(img, m.embed_w, bias=m.embed_b), m.enc[0])
    x2 = run(_down(x1, m.downs[0]), m.enc[1])
    x3 = run(_down(x2, m.downs[1]), m.enc[2])
    z = run(_down(x3, m.downs[2]), m.latent)
    assert z.shape == (n, 8 * c, h // 8, w // 8)

    d3 = run(T.conv2d(T.concat([_up(z, m.ups[0]), x3]), m.reduces[0]), m.dec[0])
    d2 = run(T.conv2d(T.concat([_up(d3, m.ups[1]), x2]), m.reduces[1]), m.dec[1])
    d1 = run(T.concat([_up(d2, m.ups[2]), x1]), m.dec[2])
    r = run(d1, m.refine)
    assert r.shape == (n, 2 * c, h, w)

    return T.add(img, T.conv2d(r, m.out_w, bias=m.out_b))


def count_params(m: Model) -> int:
    return sum(t.data.size for _, t in m.named_params())


def param_breakdown(m: Model) -> dict:
    """Parameter counts grouped by top-level stage, insertion-ordered."""
    out: dict = {}
    for name, t in m.named_params():
        key = name.split(".")[0]
        out[key] = out.get(key, 0) + t.data.size
    return out


# ---------------------------------------------------------------------------
# Checkpoints: magic, u32 little-endian header length, JSON header, then raw
# float32 payloads in manifest order.
# ---------------------------------------------------------------------------

def save(m: Model, path, step: int = 0, rng: RngState | None = None) -> None:
    if rng is None:
        rng = RngState(m.config.seed)
    tensors = list(m.named_params())
    manifest = []
    offset = 0
    for name, t in tensors:
        manifest.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        offset += t.data.size * 4
    header = {
        "format_version": FORMAT_VERSION,
        "config": m.config.to_dict(),
        "step": int(step),
        "rng": {"seed": rng.seed, "algorithm": rng.algorithm},
        "tensors": manifest,
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, t in tensors:
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load(path, full: bool = False):
    """Rebuild a model from a checkpoint; full=True also returns (step, rng)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointError(f"{path}: truncated before header")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint")
    hlen = struct.unpack("<I", raw[6:10])[0]
    if len(raw) < 10 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header json: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} "
            f"unsupported (expected {FORMAT_VERSION})")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, ConfigError) as e:
        raise CheckpointError(f"{path}: invalid config in header: {e}") from e

    m = build(config)
    payload = raw[10 + hlen:]
    manifest = {entry["name"]: entry for entry in header["tensors"]}
    for name, t in m.named_params():
        entry = manifest.pop(name, None)
        if entry is None:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tuple(entry["shape"]) != tuple(t.data.shape):
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {entry['shape']}, "
                f"expected {tuple(t.data.shape)}")
        start = entry["offset"]
        end = start + t.data.size * 4
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {name!r}")
        t.data[...] = np.frombuffer(
            payload[start:end], dtype="<f4").reshape(t.data.shape)
    if manifest:
        raise CheckpointError(f"{path}: unknown extra tensors {sorted(manifest)}")
    if not full:
        return m
    rng = RngState(seed=int(header["rng"]["seed"]),
                   algorithm=str(header["rng"]["algorithm"]))
    return m, int(header["step"]), rng
