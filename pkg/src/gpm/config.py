"""Run configuration: a flat `key = value` text format and its dataclass.

The same grammar serves config files, resolved-config snapshots, and metrics
reports, so nothing downstream needs a parser dependency.  CLI `--set`
overrides are applied after file values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class GPMConfig:
    # data geometry
    points_per_cloud: int = 1024
    num_patches: int = 32
    patch_points: int = 16
    # tokenizer / codebook
    vocab_size: int = 256
    code_dim: int = 64
    embed_dim: int = 64
    graph_neighbors: int = 4
    conv_depth: int = 4
    # transformer
    model_dim: int = 128
    depth: int = 4
    heads: int = 4
    drop_path: float = 0.1
    # objectives
    w_ae: float = 1.0
    w_ar: float = 1.0
    ar_all_positions: bool = False
    segment_order: str = "ab"
    mask_ratio_lo: float = 0.25
    mask_ratio_hi: float = 0.45
    # stage 1 (tokenizer pretraining)
    dvae_steps: int = 3000
    dvae_batch: int = 8
    dvae_lr: float = 0.0005
    dvae_min_lr: float = 0.0
    dvae_lr_span: int = 0          # 0 -> cosine spans dvae_steps
    dvae_weight_decay: float = 0.0
    dvae_per_patch_loss: bool = False  # chamfer per patch instead of over the patch union
    kl_flat_steps: int = 200
    kl_ramp_steps: int = 2000
    kl_final: float = 0.1
    tau_start: float = 1.0
    tau_end: float = 0.0625
    tau_decay_steps: int = 2000
    tau_decay_shape: str = "linear"  # or "cosine"
    # stage 2 (transformer pretraining)
    gpm_steps: int = 2000
    gpm_batch: int = 8
    gpm_lr: float = 0.0005
    gpm_min_lr: float = 0.0
    gpm_lr_span: int = 0
    gpm_weight_decay: float = 0.05
    # numeric safety / persistence
    clip_norm: float = 10.0
    checkpoint_every: int = 500
    # seeds, kept separate to isolate variance sources
    data_seed: int = 0
    model_seed: int = 0
    sample_seed: int = 0

    def __post_init__(self):
        for key in ("points_per_cloud", "num_patches", "patch_points",
                    "vocab_size", "code_dim", "embed_dim", "graph_neighbors",
                    "conv_depth", "model_dim", "depth", "heads", "dvae_steps",
                    "dvae_batch", "gpm_steps", "gpm_batch", "checkpoint_every"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        if not (0.0 < self.mask_ratio_lo <= self.mask_ratio_hi < 1.0):
            raise ValueError("mask ratio range must sit inside (0, 1)")
        if self.segment_order not in ("ab", "ba"):
            raise ValueError(f"segment_order must be 'ab' or 'ba'")
        if self.w_ae < 0 or self.w_ar < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.tau_end <= 0 or self.tau_start < self.tau_end:
            raise ValueError("temperature must decay to a positive floor")
        if self.tau_decay_shape not in ("linear", "cosine"):
            raise ValueError(f"unknown tau decay shape '{self.tau_decay_shape}'")
        if self.points_per_cloud < self.num_patches:
            raise ValueError("points_per_cloud must cover num_patches")

    @property
    def mask_ratio_range(self) -> tuple[float, float]:
        return (self.mask_ratio_lo, self.mask_ratio_hi)


def paper_preset() -> GPMConfig:
    """Full-scale constants, kept for documentation; not runnable on a desk."""
    return GPMConfig(
        vocab_size=8192, num_patches=64, patch_points=32,
        model_dim=384, depth=12, heads=6,
        dvae_steps=150_000, dvae_batch=64, dvae_lr=0.0005, dvae_lr_span=60_000,
        kl_flat_steps=10_000, kl_ramp_steps=100_000, tau_decay_steps=100_000,
        gpm_steps=300 * 64, gpm_batch=128,
    )


PRESETS = {"desk": GPMConfig, "paper": paper_preset}


# ---------------------------------------------------------------------------
# flat key-value grammar
# ---------------------------------------------------------------------------

def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{ln}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"{source}:{ln}: empty key")
        out[key] = value.strip()
    return out


def format_kv(pairs: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in pairs.items())


def write_kv(path, pairs: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_kv(pairs), encoding="utf-8")


_FIELDS = {f.name: f for f in dataclasses.fields(GPMConfig)}


def _coerce(key: str, raw: str, source: str):
    f = _FIELDS[key]
    base = dataclasses.MISSING if f.default is dataclasses.MISSING else f.default
    typ = type(base) if base is not dataclasses.MISSING else str
    try:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ValueError(f"{source}: bad value for '{key}': {e}") from e


def config_from_pairs(pairs: dict[str, str], source: str = "<config>",
                      base: GPMConfig | None = None) -> GPMConfig:
    values = dataclasses.asdict(base) if base is not None else {}
    for key, raw in pairs.items():
        if key not in _FIELDS:
            raise ValueError(f"{source}: unknown config key '{key}'")
        values[key] = _coerce(key, raw, source)
    return GPMConfig(**values)


def load_config(path, base: GPMConfig | None = None) -> GPMConfig:
    path = Path(path)
    pairs = parse_kv_text(path.read_text(encoding="utf-8"), str(path))
    return config_from_pairs(pairs, str(path), base)


def apply_overrides(cfg: GPMConfig, overrides: list[str]) -> GPMConfig:
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return config_from_pairs(pairs, "<override>", base=cfg)


def config_to_text(cfg: GPMConfig) -> str:
    return format_kv(dataclasses.asdict(cfg))


def save_config(path, cfg: GPMConfig):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(config_to_text(cfg), encoding="utf-8")
