"""Dual-objective point transformer.

One transformer consumes two segments in a single sequence: a bidirectional
segment ([CLS] + one slot per patch, masked slots replaced by a learned mask
vector) trained to predict the tokens at masked slots, and a causal segment
(a start vector followed by the patch embeddings shifted right) trained to
predict each patch token from its predecessors plus the full bidirectional
segment.  A single additive attention mask enforces the information flow:
bidirectional rows see only bidirectional columns; causal row j sees the
bidirectional segment and causal columns <= j.

Masked-slot selection is geometric: a random center seed plus its nearest
neighbors, so the masked region is spatially contiguous.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from gpm.runtime import (
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    concat,
    cross_entropy,
    gather_rows,
    gelu,
    matmul,
    max_pool_over_set,
    reshape,
    scale,
    softmax_with_additive_mask,
    stochastic_depth_scale,
    swapaxes,
)

MASK_RATIO_RANGE = (0.25, 0.45)


def select_mask_region(centers: np.ndarray, ratio_range=MASK_RATIO_RANGE,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Contiguous masked patch set: a random seed center and its b-1 nearest
    neighbors, b = round-half-up(r*m) clamped to [1, m-1], r ~ U(ratio_range).

    Consumes exactly two draws from rng (ratio, then seed center index).
    """
    centers = np.asarray(centers, dtype=np.float64)
    m = centers.shape[0]
    if m < 3:
        raise ValueError(f"need at least 3 patches to mask a region, got {m}")
    if rng is None:
        rng = np.random.default_rng()
    lo, hi = ratio_range
    if not (0.0 < lo <= hi < 1.0):
        raise ValueError(f"ratio range must sit inside (0, 1), got {ratio_range}")
    r = rng.uniform(lo, hi)
    b = int(np.floor(r * m + 0.5))  # round half up; np.round would round half even
    b = min(max(b, 1), m - 1)
    seed_idx = int(rng.integers(m))
    d = centers - centers[seed_idx]
    d2 = np.einsum("ij,ij->i", d, d)
    order = np.argsort(d2, kind="stable")  # self first (d=0), lowest index on ties
    return np.sort(order[:b])


def build_attention_mask(l_a: int, l_b: int, order: str = "ab") -> np.ndarray:
    """Boolean visibility matrix (L, L); True = query row attends to column.

    "ab": bidirectional rows see bidirectional columns; causal row j sees all
    bidirectional columns plus causal columns <= j.  "ba" (ablation layout):
    causal segment first and blind to the bidirectional one, which follows.
    """
    if l_a < 1 or l_b < 0:
        raise ValueError(f"bad segment lengths ({l_a}, {l_b})")
    l_total = l_a + l_b
    vis = np.zeros((l_total, l_total), dtype=bool)
    causal = np.tril(np.ones((l_b, l_b), dtype=bool))
    if order == "ab":
        vis[:l_a, :l_a] = True
        vis[l_a:, :l_a] = True
        vis[l_a:, l_a:] = causal
    elif order == "ba":
        vis[:l_b, :l_b] = causal
        vis[l_b:, l_b:] = True
    else:
        raise ValueError(f"unknown segment order '{order}'")
    return vis


def additive_mask(visibility: np.ndarray) -> np.ndarray:
    out = np.zeros(visibility.shape, dtype=np.float32)
    out[~visibility] = -np.inf
    return out


@dataclass
class GPMInput:
    """Assembled transformer input for one batch."""

    part_a: Tensor            # (B, m+1, D): [CLS] then patch slots
    part_b: Tensor            # (B, m, D): start vector then shifted embeddings
    mask_bool: np.ndarray     # (B, m) True at masked patch slots
    labels: np.ndarray        # (B, m) frozen-tokenizer indices
    order: str = "ab"


def order_swap(inp: GPMInput) -> GPMInput:
    """Flip segment layout for the segment-order ablation; an involution."""
    return replace(inp, order="ba" if inp.order == "ab" else "ab")


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, add_mask: np.ndarray) -> Tensor:
        b, l, d = x.shape
        h, hd = self.heads, self.head_dim

        def heads_first(t):
            return swapaxes(reshape(t, (b, l, h, hd)), 1, 2)

        q = heads_first(self.q(x))
        k = heads_first(self.k(x))
        v = heads_first(self.v(x))
        scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / np.sqrt(hd))
        probs = softmax_with_additive_mask(scores, add_mask)
        ctx = reshape(swapaxes(matmul(probs, v), 1, 2), (b, l, d))
        return self.out(ctx)


class TransformerBlock(Module):
    """Pre-norm block; stochastic depth gates both residual branches with one
    Bernoulli draw per forward (survival-scaled in eval)."""

    def __init__(self, dim: int, heads: int, drop_path: float,
                 rng: np.random.Generator):
        super().__init__()
        self.drop_path = drop_path
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, 4 * dim, rng)
        self.ff2 = Linear(4 * dim, dim, rng)

    def __call__(self, x: Tensor, add_mask: np.ndarray,
                 rng: np.random.Generator | None = None) -> Tensor:
        # branches are computed even when the gate lands on 0 so every
        # parameter stays attached to the graph (zero grad, not missing grad)
        gate = stochastic_depth_scale(self.drop_path, rng, self.training)
        attn_out = self.attn(self.norm1(x), add_mask)
        x = x + scale(attn_out, gate)
        ff_out = self.ff2(gelu(self.ff1(self.norm2(x))))
        return x + scale(ff_out, gate)


class GPMTransformer(Module):
    """The dual-objective transformer plus its input assembly."""

    def __init__(self, vocab_size: int = 256, embed_dim: int = 64,
                 model_dim: int = 128, depth: int = 4, heads: int = 4,
                 drop_path: float = 0.1, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.model_dim = model_dim
        self.input_proj = Linear(embed_dim, model_dim, rng)
        self.pos1 = Linear(3, model_dim, rng)
        self.pos2 = Linear(model_dim, model_dim, rng)
        self.cls_token = Parameter(rng.normal(0, 0.02, model_dim))
        self.cls_pos = Parameter(rng.normal(0, 0.02, model_dim))
        self.mask_token = Parameter(rng.normal(0, 0.02, model_dim))
        self.start_token = Parameter(rng.normal(0, 0.02, model_dim))
        self.blocks = [TransformerBlock(model_dim, heads, drop_path, rng)
                       for _ in range(depth)]
        self.final_norm = LayerNorm(model_dim)
        self.ae_head = Linear(model_dim, vocab_size, rng)
        self.ar_head = Linear(model_dim, vocab_size, rng)
        # instrumentation: classification inference must never build the
        # causal segment; tests watch this counter
        self.part_b_assembled = 0

    # ----- input assembly -----

    def positional(self, centers: np.ndarray) -> Tensor:
        c = Tensor(np.asarray(centers, dtype=np.float32))
        return self.pos2(gelu(self.pos1(c)))

    def _tile_token(self, token: Parameter, batch: int) -> Tensor:
        zeros = Tensor(np.zeros((batch, 1, self.model_dim), dtype=np.float32))
        return reshape(token, (1, 1, self.model_dim)) + zeros

    def assemble(self, patch_embeddings: Tensor, centers: np.ndarray,
                 tokens: np.ndarray, mask_bool: np.ndarray) -> GPMInput:
        """Build both segments.

        Bidirectional slots: masked -> mask vector + pos, else projected
        embedding + pos; [CLS] up front.  Causal slots: start vector then the
        first m-1 projected embeddings (ground truth everywhere — masking is
        ignored on this side), each slot carrying the position of the patch
        it predicts.
        """
        b, m, _ = patch_embeddings.shape
        mask_bool = np.asarray(mask_bool, dtype=bool)
        if mask_bool.shape != (b, m):
            raise ValueError(f"mask shape {mask_bool.shape} != {(b, m)}")
        proj = self.input_proj(patch_embeddings)        # (B, m, D)
        pos = self.positional(centers)                  # (B, m, D)
        keep = Tensor((~mask_bool).astype(np.float32)[..., None])
        masked = Tensor(mask_bool.astype(np.float32)[..., None])
        slots = proj * keep + self.mask_token * masked + pos
        cls_row = self._tile_token(self.cls_token, b) + \
            reshape(self.cls_pos, (1, 1, self.model_dim))
        part_a = concat([cls_row, slots], axis=1)

        start_row = self._tile_token(self.start_token, b) + pos[:, 0:1]
        shifted = proj[:, : m - 1] + pos[:, 1:]
        part_b = concat([start_row, shifted], axis=1)
        self.part_b_assembled += 1
        return GPMInput(part_a, part_b, mask_bool, np.asarray(tokens), "ab")

    # ----- transformer passes -----

    def _run_blocks(self, x: Tensor, add_mask: np.ndarray,
                    rng: np.random.Generator | None) -> Tensor:
        for block in self.blocks:
            x = block(x, add_mask, rng)
        return self.final_norm(x)

    def forward(self, inp: GPMInput, rng: np.random.Generator | None = None,
                ) -> tuple[Tensor, Tensor]:
        """Returns (ae_logits over patch slots, ar_logits over causal slots),
        each (B, m, S)."""
        l_a = inp.part_a.shape[1]
        l_b = inp.part_b.shape[1]
        vis = build_attention_mask(l_a, l_b, inp.order)
        if inp.order == "ab":
            x = concat([inp.part_a, inp.part_b], axis=1)
            a_start, b_start = 0, l_a
        else:
            x = concat([inp.part_b, inp.part_a], axis=1)
            a_start, b_start = l_b, 0
        y = self._run_blocks(x, additive_mask(vis), rng)
        ae_logits = self.ae_head(y[:, a_start + 1: a_start + l_a])
        ar_logits = self.ar_head(y[:, b_start: b_start + l_b])
        return ae_logits, ar_logits

    def encode_bidirectional(self, patch_embeddings: Tensor, centers: np.ndarray,
                             rng: np.random.Generator | None = None,
                             ) -> tuple[Tensor, Tensor]:
        """Classification path: [CLS] + unmasked slots only, full visibility.

        Returns ([CLS] output (B, D), patch outputs (B, m, D)); never builds
        the causal segment.
        """
        b, m, _ = patch_embeddings.shape
        proj = self.input_proj(patch_embeddings)
        pos = self.positional(centers)
        cls_row = self._tile_token(self.cls_token, b) + \
            reshape(self.cls_pos, (1, 1, self.model_dim))
        x = concat([cls_row, proj + pos], axis=1)
        vis = np.ones((m + 1, m + 1), dtype=bool)
        y = self._run_blocks(x, additive_mask(vis), rng)
        return y[:, 0], y[:, 1:]

    def classification_feature(self, patch_embeddings: Tensor, centers: np.ndarray,
                               rng: np.random.Generator | None = None) -> Tensor:
        """[CLS] output concatenated with max-pool over patch outputs; (B, 2D)."""
        cls_out, patch_out = self.encode_bidirectional(patch_embeddings, centers, rng)
        return concat([cls_out, max_pool_over_set(patch_out, axis=1)], axis=1)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _masked_cross_entropy(logits: Tensor, labels: np.ndarray,
                          mask_bool: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    mask_bool = np.asarray(mask_bool, dtype=bool)
    if not mask_bool.any():
        raise ValueError("mask set is empty")
    b, m, s = logits.shape
    flat = reshape(logits, (b * m, s))
    sel = np.flatnonzero(mask_bool.ravel())
    return cross_entropy(gather_rows(flat, sel), labels.ravel()[sel])


def loss_ae(ae_logits: Tensor, labels: np.ndarray, mask_bool: np.ndarray) -> Tensor:
    """Mean cross-entropy of masked bidirectional slots against their tokens."""
    return _masked_cross_entropy(ae_logits, labels, mask_bool)


def loss_ar(ar_logits: Tensor, labels: np.ndarray, mask_bool: np.ndarray,
            restrict_to_mask: bool = True) -> Tensor:
    """Next-token cross-entropy on the causal segment.

    Slot j predicts patch token j (the start slot predicts token 0).  The
    default restricts the mean to masked positions; restrict_to_mask=False
    scores every position instead.
    """
    if restrict_to_mask:
        return _masked_cross_entropy(ar_logits, labels, mask_bool)
    full = np.ones_like(np.asarray(mask_bool, dtype=bool))
    return _masked_cross_entropy(ar_logits, labels, full)


def loss_total(ae: Tensor | None, ar: Tensor | None,
               w_ae: float = 1.0, w_ar: float = 1.0) -> Tensor:
    if w_ae < 0 or w_ar < 0:
        raise ValueError("loss weights must be nonnegative")
    terms = []
    if ae is not None and w_ae > 0:
        terms.append(scale(ae, w_ae))
    if ar is not None and w_ar > 0:
        terms.append(scale(ar, w_ar))
    if not terms:
        raise ValueError("loss_total needs at least one active term")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
