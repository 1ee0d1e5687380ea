"""Central finite-difference verification of every backward rule.

Each case builds a scalar from freshly wrapped float64 inputs; the analytic
gradient from one backward pass is compared elementwise against central
differences with rel_err = |a - n| / max(1, |a|, |n|).  Cases that involve
argmax/argmin structure (max pool, Chamfer) use pinned seeds whose margins
are far wider than the probe step, so the structure cannot flip mid-probe.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-6
TOLERANCE = 1e-4


def numerical_grad(value_fn, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of a scalar function w.r.t. x, probing in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value_fn()
        flat[i] = orig - eps
        lo = value_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_case(build, inputs: list[np.ndarray], eps: float = EPS) -> float:
    """Max relative gradient error of a scalar-valued builder over its inputs."""
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = build(*tensors)
    if out.data.shape != ():
        raise ValueError("gradcheck builder must return a scalar")
    out.backward()

    def value() -> float:
        return float(build(*[Tensor(x) for x in inputs]).data)

    worst = 0.0
    for x, t in zip(inputs, tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(x)
        numeric = numerical_grad(value, x, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _proj(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce any-shaped output to a scalar via a fixed random projection."""
    r = rng.standard_normal(out.data.shape)
    return T.tensor_sum(T.mul(out, Tensor(r)))


def _margin_spread(rng: np.random.Generator, shape) -> np.ndarray:
    """Random values with pairwise gaps >> EPS along every axis (argmax-safe)."""
    x = rng.standard_normal(shape)
    x += 0.01 * np.arange(x.size).reshape(shape)
    return x


def _bind_params(module, names: list[str], tensors: list[Tensor]):
    """Replace a module's Parameters by externally supplied tensors so finite
    differences can probe the parameters themselves."""
    for name, t in zip(names, tensors):
        obj = module
        parts = name.split(".")
        for part in parts[:-1]:
            obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
        setattr(obj, parts[-1], t)


def build_suite(seed: int = 0) -> list[tuple[str, callable, list[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    cases = []

    def case(name, build, *inputs):
        cases.append((name, build, list(inputs)))

    case("add_broadcast",
         lambda a, b: _proj(T.add(a, b), np.random.default_rng(11)),
         rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 1)))
    case("mul_broadcast",
         lambda a, b: _proj(T.mul(a, b), np.random.default_rng(12)),
         rng.standard_normal((2, 3, 4)), rng.standard_normal((4,)))
    case("scale",
         lambda a: _proj(T.scale(a, -2.5), np.random.default_rng(13)),
         rng.standard_normal((3, 5)))
    case("matmul",
         lambda a, b: _proj(T.matmul(a, b), np.random.default_rng(14)),
         rng.standard_normal((3, 4)), rng.standard_normal((4, 5)))
    case("matmul_batched_broadcast",
         lambda a, b: _proj(T.matmul(a, b), np.random.default_rng(15)),
         rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)))
    case("concat",
         lambda a, b: _proj(T.concat([a, b], axis=1), np.random.default_rng(16)),
         rng.standard_normal((2, 3)), rng.standard_normal((2, 2)))
    case("reshape_swapaxes_slice",
         lambda a: _proj(T.swapaxes(T.reshape(a, (3, 4)), 0, 1)[1:3, :2],
                         np.random.default_rng(17)),
         rng.standard_normal((12,)))
    case("gather_rows_duplicates",
         lambda a: _proj(T.gather_rows(a, np.array([0, 2, 2, 1, 0])),
                         np.random.default_rng(18)),
         rng.standard_normal((4, 3)))
    case("sum_axis",
         lambda a: _proj(T.tensor_sum(a, axis=1), np.random.default_rng(19)),
         rng.standard_normal((3, 4, 2)))
    case("mean_all",
         lambda a: T.tensor_mean(a),
         rng.standard_normal((3, 4)))
    case("max_pool",
         lambda a: _proj(T.max_pool_over_set(a, axis=1), np.random.default_rng(20)),
         _margin_spread(rng, (2, 5, 3)))
    case("mean_pool",
         lambda a: _proj(T.mean_pool_over_set(a, axis=1), np.random.default_rng(21)),
         rng.standard_normal((2, 5, 3)))
    relu_x = rng.standard_normal((4, 6))
    relu_x = np.sign(relu_x) * (np.abs(relu_x) + 0.1)  # keep off the kink
    case("relu",
         lambda a: _proj(T.relu(a), np.random.default_rng(22)),
         relu_x)
    case("gelu",
         lambda a: _proj(T.gelu(a), np.random.default_rng(23)),
         rng.standard_normal((4, 6)))
    case("exp",
         lambda a: _proj(T.exp(a), np.random.default_rng(24)),
         rng.standard_normal((3, 4)))
    case("log",
         lambda a: _proj(T.log(a), np.random.default_rng(25)),
         rng.random((3, 4)) + 0.5)
    case("xlogx",
         lambda a: _proj(T.xlogx(a), np.random.default_rng(34)),
         rng.random((3, 4)) + 0.1)
    case("layer_norm",
         lambda a, g, b: _proj(T.layer_norm(a, g, b), np.random.default_rng(26)),
         rng.standard_normal((2, 3, 8)), rng.standard_normal(8), rng.standard_normal(8))

    vis_mask = np.zeros((2, 4, 5))
    vis_mask[0, 1, 2:] = -np.inf
    vis_mask[1, 3, :3] = -np.inf
    case("softmax_masked",
         lambda a: _proj(T.softmax_with_additive_mask(a, vis_mask),
                         np.random.default_rng(27)),
         rng.standard_normal((2, 4, 5)))
    case("log_softmax",
         lambda a: _proj(T.log_softmax(a), np.random.default_rng(28)),
         rng.standard_normal((3, 7)))

    targets_flat = rng.integers(0, 5, size=6)
    case("cross_entropy",
         lambda a: T.cross_entropy(a, targets_flat),
         rng.standard_normal((6, 5)))
    targets_nd = rng.integers(0, 4, size=(2, 3))
    case("cross_entropy_batched",
         lambda a: T.cross_entropy(a, targets_nd),
         rng.standard_normal((2, 3, 4)))

    gumbel_noise = T.sample_gumbel((3, 6), np.random.default_rng(29), np.float64)
    case("gumbel_softmax_soft",
         lambda a: _proj(T.gumbel_softmax(a, tau=0.7, hard=False, noise=gumbel_noise),
                         np.random.default_rng(30)),
         rng.standard_normal((3, 6)))

    case("dropout",
         lambda a: _proj(T.dropout(a, 0.4, np.random.default_rng(31), training=True),
                         np.random.default_rng(32)),
         rng.standard_normal((4, 5)))

    case("chamfer",
         lambda a, b: T.chamfer_distance_l1(a, b),
         rng.standard_normal((5, 3)), rng.standard_normal((7, 3)))
    case("chamfer_batched",
         lambda a, b: T.tensor_sum(T.chamfer_distance_l1(a, b)),
         rng.standard_normal((2, 6, 3)), rng.standard_normal((2, 4, 3)))

    # composed network: affine -> gelu -> layer norm -> affine -> CE
    net_targets = rng.integers(0, 4, size=5)

    def composed(x, w1, b1, g, beta, w2, b2):
        h = T.gelu(T.add(T.matmul(x, w1), b1))
        h = T.layer_norm(h, g, beta)
        logits = T.add(T.matmul(h, w2), b2)
        return T.cross_entropy(logits, net_targets)

    case("composed_mlp", composed,
         rng.standard_normal((5, 6)),
         rng.standard_normal((6, 8)) * 0.5, rng.standard_normal(8) * 0.1,
         rng.standard_normal(8) * 0.3 + 1.0, rng.standard_normal(8) * 0.1,
         rng.standard_normal((8, 4)) * 0.5, rng.standard_normal(4) * 0.1)

    # attention block: masked softmax over scores, value mix, mean pooled
    att_mask = np.zeros((4, 4))
    att_mask[np.triu_indices(4, k=1)] = -np.inf

    def attention(q, k, v):
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / np.sqrt(5.0))
        probs = T.softmax_with_additive_mask(scores, att_mask)
        return _proj(T.matmul(probs, v), np.random.default_rng(33))

    case("attention_block", attention,
         rng.standard_normal((4, 5)), rng.standard_normal((4, 5)),
         rng.standard_normal((4, 5)))

    # whole-module checks: probe module parameters and the data input jointly.
    # imported lazily; the model layer sits above this runtime package.
    from gpm.dvae import EdgeConvStack, FoldingDecoder, MiniPointNet
    from gpm.model import TransformerBlock, additive_mask, build_attention_mask

    def module_case(name, module, fwd, *data_inputs, proj_seed):
        pnames = [n for n, _ in module.named_parameters()]
        pvals = [p.data.astype(np.float64).copy()
                 for _, p in module.named_parameters()]

        def build(*tensors):
            _bind_params(module, pnames, list(tensors[:len(pnames)]))
            return _proj(fwd(module, *tensors[len(pnames):]),
                         np.random.default_rng(proj_seed))

        case(name, build, *pvals, *data_inputs)

    module_case("mini_pointnet",
                MiniPointNet(8, np.random.default_rng(40)),
                lambda net, x: net(x),
                _margin_spread(rng, (1, 2, 5, 3)) * 0.3, proj_seed=50)
    module_case("edgeconv_stack",
                EdgeConvStack(4, 6, 2, 3, np.random.default_rng(41)),
                lambda net, x: net(x),
                _margin_spread(rng, (1, 5, 4)), proj_seed=51)
    module_case("folding_decoder",
                FoldingDecoder(6, 4, np.random.default_rng(42)),
                lambda net, x: net(x),
                rng.standard_normal((1, 2, 6)), proj_seed=52)
    block_mask = additive_mask(build_attention_mask(3, 2))
    module_case("transformer_block",
                TransformerBlock(8, 2, 0.0, np.random.default_rng(43)),
                lambda net, x: net(x, block_mask),
                rng.standard_normal((1, 5, 8)), proj_seed=53)

    # soft-quantization path: gumbel relaxation mixing codebook rows
    quant_noise = T.sample_gumbel((2, 4), np.random.default_rng(44), np.float64)

    def quantize_soft(logits, codebook):
        mix = T.gumbel_softmax(logits, tau=0.7, hard=False, noise=quant_noise)
        return _proj(T.matmul(mix, codebook), np.random.default_rng(54))

    case("gumbel_codebook_mix", quantize_soft,
         rng.standard_normal((2, 4)), rng.standard_normal((4, 6)))

    return cases


def run_suite(seed: int = 0, eps: float = EPS) -> list[tuple[str, float]]:
    """Run every case; returns (name, max_rel_err) pairs."""
    results = []
    for name, build, inputs in build_suite(seed):
        results.append((name, check_case(build, inputs, eps)))
    return results
