"""Discrete VAE over point-cloud patches.

Pipeline: per-patch mini-PointNet embedding -> EdgeConv tokenizer -> logits
over a learnable codebook -> Gumbel-softmax quantization -> EdgeConv +
folding decoder that rebuilds each patch around its center.  Training keeps
the code assignment soft (convex mix of codebook rows); tokenize/eval takes
the hard argmax with no noise.

Everything here is batched: patches (B, m, k, 3), centers (B, m, 3).
Single-cloud callers go through `tokenize`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gpm import geometry
from gpm.runtime import (
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    chamfer_distance_l1,
    concat,
    gather_rows,
    gumbel_softmax,
    max_pool_over_set,
    matmul,
    no_grad,
    relu,
    reshape,
    scale,
    softmax_with_additive_mask,
    tensor_mean,
    tensor_sum,
    xlogx,
)


@dataclass
class TokenSequence:
    """Codebook assignment for each patch of a cloud (or batch of clouds)."""

    tokens: np.ndarray                    # (..., m) int64 codebook indices
    soft_assignments: Tensor | None = None  # (..., m, S) probabilities, training only

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)


def _tile_leading(t: Tensor, target_shape: tuple) -> Tensor:
    """Broadcast a tensor against zeros of target_shape (grad-correct tile)."""
    return t + Tensor(np.zeros(target_shape, dtype=t.data.dtype))


def _feature_knn_indices(feats: np.ndarray, k_g: int) -> np.ndarray:
    """kNN graph (self included) in feature space; (B, m, k_g) indices."""
    b, m, _ = feats.shape
    k_eff = min(k_g, m)
    sq = np.sum(feats * feats, axis=2)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * np.matmul(feats, np.swapaxes(feats, 1, 2))
    order = np.argsort(d2, axis=2, kind="stable")
    return order[:, :, :k_eff]


class EdgeConvLayer(Module):
    """One dynamic-graph edge convolution: max over neighbors of
    MLP([x_i, x_j - x_i]) with the graph rebuilt from current features."""

    def __init__(self, d_in: int, d_out: int, k_g: int, rng: np.random.Generator):
        super().__init__()
        self.k_g = k_g
        self.lin = Linear(2 * d_in, d_out, rng)
        # without a norm the relu/max cascade shrinks activations layer over
        # layer until the code logits drown in the gumbel noise
        self.norm = LayerNorm(d_out)

    def __call__(self, x: Tensor) -> Tensor:
        b, m, d = x.shape
        idx = _feature_knn_indices(x.data, self.k_g)  # graph is not differentiated
        k_eff = idx.shape[2]
        flat = reshape(x, (b * m, d))
        offsets = (np.arange(b) * m)[:, None, None]
        neigh = gather_rows(flat, idx + offsets)                      # (b, m, k_eff, d)
        self_idx = np.broadcast_to(np.arange(m)[None, :, None], (b, m, k_eff))
        center = gather_rows(flat, self_idx + offsets)                # (b, m, k_eff, d)
        edge = concat([center, neigh - center], axis=3)
        h = relu(self.norm(self.lin(edge)))
        return max_pool_over_set(h, axis=2)


class MiniPointNet(Module):
    """Patch embedding: shared point MLP, max-pool, pooled-feature concat,
    second shared MLP, final max-pool.  Permutation-invariant per patch."""

    def __init__(self, d_h: int, rng: np.random.Generator):
        super().__init__()
        if d_h % 2:
            raise ValueError(f"embedding width must be even, got {d_h}")
        self.lin1 = Linear(3, d_h // 2, rng)
        self.lin2 = Linear(d_h // 2, d_h // 2, rng)
        self.lin3 = Linear(d_h, d_h, rng)
        self.lin4 = Linear(d_h, d_h, rng)
        self.norm1 = LayerNorm(d_h // 2)
        self.norm2 = LayerNorm(d_h // 2)
        self.norm3 = LayerNorm(d_h)
        self.norm4 = LayerNorm(d_h)

    def __call__(self, patches: Tensor) -> Tensor:
        """(B, m, k, 3) -> (B, m, d_h)."""
        b, m, k, _ = patches.shape
        h = relu(self.norm1(self.lin1(patches)))
        h = relu(self.norm2(self.lin2(h)))                     # (b, m, k, d/2)
        pooled = max_pool_over_set(h, axis=2)                  # (b, m, d/2)
        tiled = _tile_leading(reshape(pooled, (b, m, 1, h.shape[3])), h.shape)
        h2 = concat([h, tiled], axis=3)                        # (b, m, k, d)
        h2 = relu(self.norm3(self.lin3(h2)))
        h2 = relu(self.norm4(self.lin4(h2)))
        return max_pool_over_set(h2, axis=2)


class EdgeConvStack(Module):
    def __init__(self, d_in: int, d_hidden: int, depth: int, k_g: int,
                 rng: np.random.Generator):
        super().__init__()
        dims = [d_in] + [d_hidden] * depth
        self.layers = [EdgeConvLayer(dims[i], dims[i + 1], k_g, rng)
                       for i in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def folding_grid(k: int) -> np.ndarray:
    """First k points of the smallest g x g grid with g*g >= k, in [-0.5, 0.5]^2."""
    g = int(np.ceil(np.sqrt(k)))
    axis = np.linspace(-0.5, 0.5, g) if g > 1 else np.zeros(1)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)[:k].astype(np.float32)


class FoldingDecoder(Module):
    """Two-stage fold of a fixed 2D grid into k offsets per patch."""

    def __init__(self, d_feat: int, k: int, rng: np.random.Generator):
        super().__init__()
        self.k = k
        self.grid = folding_grid(k)
        d = d_feat
        self.fold1_a = Linear(d + 2, d, rng)
        self.fold1_b = Linear(d, d, rng)
        self.fold1_c = Linear(d, 3, rng)
        self.fold2_a = Linear(d + 3, d, rng)
        self.fold2_b = Linear(d, d, rng)
        self.fold2_c = Linear(d, 3, rng)
        self.norm1_a = LayerNorm(d)
        self.norm1_b = LayerNorm(d)
        self.norm2_a = LayerNorm(d)
        self.norm2_b = LayerNorm(d)

    def _stage(self, x: Tensor, lin_a, norm_a, lin_b, norm_b, lin_c) -> Tensor:
        h = relu(norm_a(lin_a(x)))
        h = relu(norm_b(lin_b(h)))
        return lin_c(h)

    def __call__(self, feats: Tensor) -> Tensor:
        """(B, m, d) patch features -> (B, m, k, 3) offsets."""
        b, m, d = feats.shape
        k = self.k
        tiled = _tile_leading(reshape(feats, (b, m, 1, d)), (b, m, k, d))
        grid = Tensor(np.broadcast_to(self.grid, (b, m, k, 2)).copy())
        fold1 = self._stage(concat([tiled, grid], axis=3), self.fold1_a,
                            self.norm1_a, self.fold1_b, self.norm1_b, self.fold1_c)
        fold2 = self._stage(concat([tiled, fold1], axis=3), self.fold2_a,
                            self.norm2_a, self.fold2_b, self.norm2_b, self.fold2_c)
        return fold2


class DiscreteVAE(Module):
    """Tokenizer + codebook + decoder; see module docstring."""

    def __init__(self, vocab_size: int = 256, code_dim: int = 64, embed_dim: int = 64,
                 patch_points: int = 16, graph_neighbors: int = 4,
                 conv_depth: int = 4, seed: int = 0):
        super().__init__()
        if vocab_size < 2:
            raise ValueError(f"need at least 2 codebook entries, got {vocab_size}")
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.code_dim = code_dim
        self.embed_dim = embed_dim
        self.patch_points = patch_points
        self.encoder = MiniPointNet(embed_dim, rng)
        self.tokenizer_convs = EdgeConvStack(embed_dim, embed_dim, conv_depth,
                                             graph_neighbors, rng)
        self.tokenizer_head = Linear(embed_dim, vocab_size, rng)
        bound = 1.0 / np.sqrt(code_dim)
        self.codebook = Parameter(rng.uniform(-bound, bound, (vocab_size, code_dim)))
        self.decoder_convs = EdgeConvStack(code_dim, embed_dim, conv_depth,
                                           graph_neighbors, rng)
        self.folding = FoldingDecoder(embed_dim, patch_points, rng)

    # ----- encode side -----

    def embed(self, patches: Tensor) -> Tensor:
        """(B, m, k, 3) center-relative patches -> (B, m, d_h)."""
        return self.encoder(patches)

    def token_logits(self, h: Tensor) -> Tensor:
        """(B, m, d_h) -> (B, m, S)."""
        return self.tokenizer_head(self.tokenizer_convs(h))

    def quantize(self, logits: Tensor, tau: float, mode: str = "soft",
                 rng: np.random.Generator | None = None,
                 ) -> tuple[TokenSequence, Tensor]:
        """Map logits to (token sequence, code inputs).

        soft: code input = Gumbel-softmax sample times the codebook (convex
        mix, differentiable).  hard: argmax of logits + noise; code input is
        the exact codebook row (no gradient; use for tokenize/eval).
        """
        if mode == "soft":
            assign = gumbel_softmax(logits, tau=tau, hard=False, rng=rng)
            tokens = np.argmax(assign.data, axis=-1)
            code_inputs = matmul(assign, self.codebook)
            return TokenSequence(tokens, assign), code_inputs
        if mode == "hard":
            shifted = logits.data
            if rng is not None:
                from gpm.runtime import sample_gumbel

                shifted = shifted + sample_gumbel(shifted.shape, rng, shifted.dtype)
            tokens = np.argmax(shifted, axis=-1)
            with no_grad():
                code_inputs = gather_rows(self.codebook, tokens)
            return TokenSequence(tokens, None), code_inputs
        raise ValueError(f"unknown quantize mode '{mode}'")

    # ----- decode side -----

    def decode(self, code_inputs: Tensor, centers: np.ndarray) -> Tensor:
        """(B, m, d_z) codes + (B, m, 3) centers -> (B, m*k, 3) cloud."""
        feats = self.decoder_convs(code_inputs)
        offsets = self.folding(feats)                          # (B, m, k, 3)
        centers = np.asarray(centers, dtype=offsets.data.dtype)
        placed = offsets + Tensor(centers[:, :, None, :])
        b, m = centers.shape[0], centers.shape[1]
        return reshape(placed, (b, m * self.patch_points, 3))

    def reconstruct(self, patches: Tensor, centers: np.ndarray, tau: float,
                    mode: str = "soft", rng: np.random.Generator | None = None,
                    ) -> tuple[Tensor, TokenSequence]:
        h = self.embed(patches)
        logits = self.token_logits(h)
        seq, code_inputs = self.quantize(logits, tau, mode, rng)
        return self.decode(code_inputs, centers), seq

    # ----- inference -----

    def tokenize(self, cloud: np.ndarray, m: int, k: int, seed: int = 0,
                 ) -> tuple[TokenSequence, geometry.PatchSet]:
        """Hard tokens for one cloud; deterministic given weights+cloud+seed."""
        if k != self.patch_points:
            raise ValueError(
                f"model decodes {self.patch_points}-point patches, got k={k}")
        patch_set = geometry.build_patches(cloud, m, k, seed)
        with no_grad():
            h = self.embed(Tensor(patch_set.patches[None].astype(np.float32)))
            logits = self.token_logits(h)
        tokens = np.argmax(logits.data[0], axis=-1)
        return TokenSequence(tokens), patch_set


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def kl_to_uniform(soft_assignments: Tensor) -> Tensor:
    """Mean over patches of KL(q || uniform) = sum_s q_s (ln q_s - ln(1/S))."""
    s = soft_assignments.shape[-1]
    per_patch = tensor_sum(xlogx(soft_assignments), axis=-1) + \
        scale(tensor_sum(soft_assignments, axis=-1), np.log(s))
    return tensor_mean(per_patch)


def dvae_loss(input_cloud: Tensor, recon: Tensor, soft_assignments: Tensor | None,
              kl_weight: float) -> tuple[Tensor, Tensor, Tensor | None]:
    """Chamfer + kl_weight * KL(q || uniform); returns (total, chamfer, kl)."""
    if kl_weight < 0:
        raise ValueError(f"kl_weight must be nonnegative, got {kl_weight}")
    cd = chamfer_distance_l1(recon, input_cloud)
    if cd.data.ndim:
        cd = tensor_mean(cd)
    if soft_assignments is None or kl_weight == 0.0:
        kl = kl_to_uniform(soft_assignments) if soft_assignments is not None else None
        return cd, cd, kl
    kl = kl_to_uniform(soft_assignments)
    return cd + scale(kl, kl_weight), cd, kl


def noiseless_posterior(logits: Tensor) -> Tensor:
    """softmax(logits): the assignment distribution the KL term regularizes."""
    return softmax_with_additive_mask(logits, None)


# ---------------------------------------------------------------------------
# tokenize dump format: one line per cloud -- id, m, then m integer tokens
# ---------------------------------------------------------------------------

def format_token_line(cloud_id: str, tokens: np.ndarray) -> str:
    toks = " ".join(str(int(t)) for t in np.asarray(tokens).ravel())
    return f"{cloud_id} {len(np.asarray(tokens).ravel())} {toks}"


def parse_token_line(line: str) -> tuple[str, np.ndarray]:
    parts = line.split()
    if len(parts) < 2:
        raise ValueError(f"malformed token line: {line!r}")
    cloud_id, m = parts[0], int(parts[1])
    toks = np.array([int(p) for p in parts[2:]], dtype=np.int64)
    if len(toks) != m:
        raise ValueError(f"token line claims {m} tokens, has {len(toks)}")
    return cloud_id, toks
