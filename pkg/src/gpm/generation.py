"""Autoregressive point-cloud generation from the trained two-stage model.

Conditional mode tokenizes an input cloud, masks a region, and regenerates
the masked tokens left to right; unconditional mode starts from an all-masked
bidirectional segment and rolls every position.  Sampled tokens feed later
steps through their codebook vectors (projected by the transformer's input
projection — generated positions have no points to re-embed).  Decoding the
final token sequence over the original centers yields the output cloud.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gpm import geometry
from gpm.dvae import DiscreteVAE, TokenSequence
from gpm.model import GPMInput, GPMTransformer
from gpm.runtime import Tensor, concat, gather_rows, no_grad, reshape


@dataclass
class SamplingPolicy:
    mode: str = "top_k"        # greedy | top_k | temperature
    k: int = 8
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "top_k", "temperature"):
            raise ValueError(f"unknown sampling mode '{self.mode}'")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mode == "top_k" and self.k < 1:
            raise ValueError(f"top_k needs k >= 1, got {self.k}")


@dataclass
class TraceEntry:
    position: int
    token: int
    logit: float


def sample_token(logits: np.ndarray, policy: SamplingPolicy,
                 rng: np.random.Generator) -> tuple[int, float]:
    logits = np.asarray(logits, dtype=np.float64)
    s = logits.shape[0]
    if policy.mode == "greedy":
        tok = int(np.argmax(logits))
        return tok, float(logits[tok])
    if policy.mode == "top_k":
        if policy.k > s:
            raise ValueError(f"top_k k={policy.k} exceeds vocabulary {s}")
        top = np.argsort(-logits, kind="stable")[: policy.k]
        z = logits[top] / policy.temperature
        p = np.exp(z - z.max())
        p /= p.sum()
        tok = int(rng.choice(top, p=p))
        return tok, float(logits[tok])
    z = logits / policy.temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    tok = int(rng.choice(s, p=p))
    return tok, float(logits[tok])


def _check_compatible(dvae: DiscreteVAE, gpm: GPMTransformer):
    if dvae.code_dim != gpm.embed_dim:
        raise ValueError(
            "generated tokens re-enter through the input projection, which "
            f"needs code_dim == embed_dim (got {dvae.code_dim} vs {gpm.embed_dim})")
    if dvae.vocab_size != gpm.vocab_size:
        raise ValueError("tokenizer and transformer vocabulary sizes differ")


def _roll(gpm: GPMTransformer, dvae: DiscreteVAE, embeddings: np.ndarray,
          centers: np.ndarray, base_tokens: np.ndarray, mask_bool: np.ndarray,
          policy: SamplingPolicy) -> tuple[np.ndarray, list[TraceEntry]]:
    """Sample tokens at masked positions in ascending order.

    Causal slot j+1 carries the embedding of patch j: ground truth where j is
    unmasked, the projected codebook vector of the sample once j is generated.
    Each position draws from its own generator keyed on (seed, position), so
    earlier samples never depend on later ones.
    """
    m = centers.shape[0]
    gpm.eval()
    tokens = np.asarray(base_tokens, dtype=np.int64).copy()
    trace: list[TraceEntry] = []
    with no_grad():
        proj = gpm.input_proj(Tensor(embeddings[None].astype(np.float32)))
        pos = gpm.positional(centers[None].astype(np.float32))
        keep = Tensor((~mask_bool).astype(np.float32)[None, :, None])
        masked = Tensor(mask_bool.astype(np.float32)[None, :, None])
        slots_a = proj * keep + gpm.mask_token * masked + pos
        cls_row = gpm._tile_token(gpm.cls_token, 1) + \
            reshape(gpm.cls_pos, (1, 1, gpm.model_dim))
        part_a = concat([cls_row, slots_a], axis=1)

        # causal slots, maintained as a list so sampled codes can be patched in
        b_slots = [gpm._tile_token(gpm.start_token, 1) + pos[:, 0:1]]
        for j in range(1, m):
            b_slots.append(proj[:, j - 1: j] + pos[:, j: j + 1])

        for j in np.flatnonzero(mask_bool):
            part_b = concat(b_slots, axis=1)
            inp = GPMInput(part_a, part_b, mask_bool[None], tokens[None])
            _, ar_logits = gpm.forward(inp, rng=None)
            rng = np.random.default_rng([policy.seed, int(j)])
            tok, logit = sample_token(ar_logits.data[0, j], policy, rng)
            tokens[j] = tok
            trace.append(TraceEntry(int(j), tok, logit))
            if j + 1 < m:
                code = gather_rows(dvae.codebook, np.array([[tok]]))
                b_slots[j + 1] = gpm.input_proj(code) + pos[:, j + 1: j + 2]
    return tokens, trace


def decode_tokens(dvae: DiscreteVAE, tokens: np.ndarray,
                  centers: np.ndarray) -> np.ndarray:
    """Hard decode of a token sequence over given centers -> (m*k, 3)."""
    with no_grad():
        code_inputs = gather_rows(dvae.codebook, np.asarray(tokens)[None])
        recon = dvae.decode(code_inputs, centers[None].astype(np.float32))
    return recon.data[0].astype(np.float64)


def dvae_reconstruction(dvae: DiscreteVAE, cloud: np.ndarray, m: int, k: int,
                        seed: int = 0) -> tuple[np.ndarray, TokenSequence,
                                                geometry.PatchSet]:
    """Plain hard-mode reconstruction; the generation baseline."""
    seq, patch_set = dvae.tokenize(cloud, m, k, seed)
    recon = decode_tokens(dvae, seq.tokens, patch_set.centers)
    return recon, seq, patch_set


def generate_masked_region(cloud: np.ndarray, mask_set: np.ndarray,
                           policy: SamplingPolicy, dvae: DiscreteVAE,
                           gpm: GPMTransformer, m: int, k: int,
                           fps_seed: int = 0,
                           ) -> tuple[TokenSequence, np.ndarray, list[TraceEntry]]:
    """Regenerate the masked patches of a cloud; unmasked tokens are kept.

    Empty mask set -> no sampling at all; the output equals the plain
    reconstruction of the input tokens.
    """
    _check_compatible(dvae, gpm)
    seq, patch_set = dvae.tokenize(cloud, m, k, fps_seed)
    mask_set = np.asarray(mask_set, dtype=np.int64)
    mask_bool = np.zeros(m, dtype=bool)
    if mask_set.size:
        if mask_set.min() < 0 or mask_set.max() >= m:
            raise ValueError(f"mask indices must lie in [0, {m}), got {mask_set}")
        mask_bool[mask_set] = True
    with no_grad():
        h = dvae.embed(Tensor(patch_set.patches[None].astype(np.float32)))
    if mask_bool.any():
        tokens, trace = _roll(gpm, dvae, h.data[0], patch_set.centers,
                              seq.tokens, mask_bool, policy)
    else:
        tokens, trace = seq.tokens.copy(), []
    out = decode_tokens(dvae, tokens, patch_set.centers)
    return TokenSequence(tokens), out, trace


def unit_sphere_centers(m: int, seed: int = 0, oversample: int = 64) -> np.ndarray:
    """Canonical center layout: FPS over a dense uniform sphere sampling."""
    rng = np.random.default_rng(seed)
    dense = rng.standard_normal((m * oversample, 3))
    dense /= np.linalg.norm(dense, axis=1, keepdims=True)
    idx = geometry.fps(dense, m, seed=seed)
    return dense[idx]


def generate_unconditional(centers: np.ndarray, policy: SamplingPolicy,
                           dvae: DiscreteVAE, gpm: GPMTransformer,
                           ) -> tuple[TokenSequence, np.ndarray, list[TraceEntry]]:
    """Roll every position from an all-masked condition over given centers."""
    _check_compatible(dvae, gpm)
    centers = np.asarray(centers, dtype=np.float64)
    m = centers.shape[0]
    mask_bool = np.ones(m, dtype=bool)
    h = np.zeros((m, dvae.embed_dim), dtype=np.float32)  # never attended
    tokens, trace = _roll(gpm, dvae, h, centers, np.zeros(m, dtype=np.int64),
                          mask_bool, policy)
    out = decode_tokens(dvae, tokens, centers)
    return TokenSequence(tokens), out, trace


def write_token_trace(path, trace: list[TraceEntry]):
    """One line per sampling step: position, token index, sampled-token logit."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("position\ttoken\tlogit\n")
        for t in trace:
            f.write(f"{t.position}\t{t.token}\t{t.logit:.6f}\n")
