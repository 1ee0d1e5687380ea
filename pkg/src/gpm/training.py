"""Two-stage training: tokenizer dVAE first, then the frozen-tokenizer
transformer.  Runs are deterministic for a fixed config: every stochastic
draw comes from a generator keyed on (seed, purpose, step), so a resumed run
consumes exactly the same randomness as an uninterrupted one.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gpm import data_io, geometry
from gpm.config import GPMConfig
from gpm.dvae import DiscreteVAE, dvae_loss, noiseless_posterior
from gpm.model import (
    GPMTransformer,
    loss_ae,
    loss_ar,
    loss_total,
    order_swap,
    select_mask_region,
)
from gpm.runtime import (
    AdamW,
    NumericFailure,
    Tensor,
    chamfer_distance_l1,
    clip_global_grad_norm,
    cosine_schedule,
    load_arrays,
    no_grad,
    reshape,
    save_arrays,
)

# purpose tags for per-step generators; any fixed distinct ints work
_BATCH, _GUMBEL, _MASK, _DEPTH = 7, 11, 13, 17


@dataclass
class TrainLogRecord:
    step: int
    lr: float
    temperature: float = 0.0
    kl_weight: float = 0.0
    chamfer: float = 0.0
    kl: float = 0.0
    ae: float = 0.0
    ar: float = 0.0
    loss: float = 0.0
    wall: float = 0.0

    FIELDS = ("step", "lr", "temperature", "kl_weight", "chamfer", "kl",
              "ae", "ar", "loss", "wall")

    def tsv(self) -> str:
        return "\t".join(f"{getattr(self, f):.8g}" for f in self.FIELDS)


def write_log(path, records: list[TrainLogRecord]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(TrainLogRecord.FIELDS) + "\n")
        for r in records:
            f.write(r.tsv() + "\n")


# ---------------------------------------------------------------------------
# schedules (pure functions of step)
# ---------------------------------------------------------------------------

def kl_weight_at(step: int, flat_steps: int, ramp_steps: int,
                 final_weight: float) -> float:
    """0 during the flat phase, then a linear ramp to final_weight."""
    if step < flat_steps:
        return 0.0
    if ramp_steps <= 0:
        return final_weight
    frac = min((step - flat_steps) / ramp_steps, 1.0)
    return final_weight * frac


def temperature_at(step: int, start: float, end: float, decay_steps: int,
                   shape: str = "linear") -> float:
    """Decay from start to end over decay_steps, constant after."""
    if decay_steps <= 0:
        return end
    frac = min(step / decay_steps, 1.0)
    if shape == "cosine":
        frac = 0.5 * (1.0 - np.cos(np.pi * frac))
    elif shape != "linear":
        raise ValueError(f"unknown decay shape '{shape}'")
    return start + (end - start) * frac


# ---------------------------------------------------------------------------
# dataset preparation (cached per run: patching is deterministic per cloud)
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    clouds: np.ndarray    # (n, N, 3) float32, normalized
    patches: np.ndarray   # (n, m, k, 3) float32, center-relative
    centers: np.ndarray   # (n, m, 3) float32
    targets: np.ndarray   # (n, m*k, 3) float32, union of the patches in
                          # absolute coordinates -- what the decoder rebuilds
                          # (the m*k patch points, not the full N-point cloud)


def cloud_seed(data_seed: int, index: int, purpose: int = 0) -> int:
    return int(np.random.SeedSequence([data_seed, purpose, index])
               .generate_state(1)[0])


def prepare_clouds(dataset: data_io.Dataset, cfg: GPMConfig) -> PreparedData:
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    clouds = np.empty((n, cfg.points_per_cloud, 3), dtype=np.float32)
    patches = np.empty((n, cfg.num_patches, cfg.patch_points, 3), dtype=np.float32)
    centers = np.empty((n, cfg.num_patches, 3), dtype=np.float32)
    for i, item in enumerate(dataset.items):
        cloud = data_io.normalize_unit_sphere(item.cloud)
        cloud = data_io.sample_n(cloud, cfg.points_per_cloud,
                                 seed=cloud_seed(cfg.data_seed, i, 1))
        ps = geometry.build_patches(cloud, cfg.num_patches, cfg.patch_points,
                                    seed=cloud_seed(cfg.data_seed, i, 2))
        clouds[i] = cloud
        patches[i] = ps.patches
        centers[i] = ps.centers
    m, k = cfg.num_patches, cfg.patch_points
    targets = (patches + centers[:, :, None, :]).reshape(n, m * k, 3)
    return PreparedData(clouds, patches, centers, targets)


def build_dvae(cfg: GPMConfig) -> DiscreteVAE:
    return DiscreteVAE(cfg.vocab_size, cfg.code_dim, cfg.embed_dim,
                       cfg.patch_points, cfg.graph_neighbors, cfg.conv_depth,
                       seed=cfg.model_seed)


def build_gpm(cfg: GPMConfig) -> GPMTransformer:
    return GPMTransformer(cfg.vocab_size, cfg.embed_dim, cfg.model_dim,
                          cfg.depth, cfg.heads, cfg.drop_path,
                          seed=cfg.model_seed + 1)


# ---------------------------------------------------------------------------
# checkpoint helpers: model params + optimizer moments in one container
# ---------------------------------------------------------------------------

def save_training_state(path, model, opt: AdamW, step: int):
    arrays = dict(model.state_dict())
    arrays["opt/step"] = np.asarray([step], dtype=np.float32)
    for name in opt.m:
        # moments stay float64: truncating them breaks resume equivalence
        # (the hard-argmax eval flips tokens on ~1e-7 parameter drift)
        arrays[f"opt/m/{name}"] = opt.m[name]
        arrays[f"opt/v/{name}"] = opt.v[name]
    save_arrays(path, arrays)


def load_training_state(path, model, opt: AdamW | None = None) -> int:
    arrays = load_arrays(path)
    params = {k: v for k, v in arrays.items() if not k.startswith("opt/")}
    model.load_state_dict(params)
    step = int(arrays.get("opt/step", np.zeros(1))[0])
    if opt is not None:
        opt.step_count = step
        for name in opt.m:
            opt.m[name] = arrays[f"opt/m/{name}"].astype(np.float64)
            opt.v[name] = arrays[f"opt/v/{name}"].astype(np.float64)
    return step


def load_model_checkpoint(path, model):
    arrays = load_arrays(path)
    params = {k: v for k, v in arrays.items() if not k.startswith("opt/")}
    model.load_state_dict(params)


def parameter_checksum(module) -> float:
    """Order-stable fingerprint of all parameters (frozen-weights assertions)."""
    total = 0.0
    for name, p in module.named_parameters():
        tag = zlib.crc32(name.encode()) % 997 + 1
        total += float(tag * np.sum(np.float64(p.data)))
    return total


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def train_dvae(cfg: GPMConfig, dataset: data_io.Dataset,
               out_dir: str | Path | None = None,
               resume_from: str | Path | None = None,
               prepared: PreparedData | None = None,
               ) -> tuple[DiscreteVAE, list[TrainLogRecord]]:
    data = prepared if prepared is not None else prepare_clouds(dataset, cfg)
    n = data.clouds.shape[0]
    model = build_dvae(cfg)
    opt = AdamW(model.named_parameters(), lr=cfg.dvae_lr,
                weight_decay=cfg.dvae_weight_decay)
    start_step = 0
    if resume_from is not None:
        start_step = load_training_state(resume_from, model, opt)
    span = cfg.dvae_lr_span or cfg.dvae_steps
    records: list[TrainLogRecord] = []
    model.train()
    t0 = time.time()
    for step in range(start_step, cfg.dvae_steps):
        batch_rng = np.random.default_rng([cfg.data_seed, _BATCH, step])
        idx = batch_rng.integers(0, n, cfg.dvae_batch)
        tau = temperature_at(step, cfg.tau_start, cfg.tau_end,
                             cfg.tau_decay_steps, cfg.tau_decay_shape)
        w_kl = kl_weight_at(step, cfg.kl_flat_steps, cfg.kl_ramp_steps, cfg.kl_final)
        lr = cosine_schedule(step, span, cfg.dvae_lr, cfg.dvae_min_lr)

        try:
            patches = Tensor(data.patches[idx])
            h = model.embed(patches)
            logits = model.token_logits(h)
            gum_rng = np.random.default_rng([cfg.sample_seed, _GUMBEL, step])
            _, code_inputs = model.quantize(logits, tau, "soft", gum_rng)
            recon = model.decode(code_inputs, data.centers[idx])
            posterior = noiseless_posterior(logits)
            target = data.targets[idx]
            if cfg.dvae_per_patch_loss:
                # ablation: score each patch against its own input points
                recon = reshape(recon, (-1, cfg.patch_points, 3))
                target = target.reshape(-1, cfg.patch_points, 3)
            total, cd, kl = dvae_loss(Tensor(target), recon, posterior, w_kl)

            model.zero_grad()
            total.backward()
            clip_global_grad_norm(model.parameters(), cfg.clip_norm)
            opt.lr = lr
            opt.step()
        except NumericFailure as e:
            raise NumericFailure(f"tokenizer training step {step}: {e}") from e

        records.append(TrainLogRecord(
            step=step, lr=lr, temperature=tau, kl_weight=w_kl,
            chamfer=float(cd.data), kl=float(kl.data) if kl is not None else 0.0,
            loss=float(total.data), wall=time.time() - t0))
        if out_dir is not None and (
                (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.dvae_steps):
            save_training_state(Path(out_dir) / "dvae.ckpt", model, opt, step + 1)
    model.eval()
    if out_dir is not None:
        save_training_state(Path(out_dir) / "dvae.ckpt", model, opt, cfg.dvae_steps)
        write_log(Path(out_dir) / "dvae_log.tsv", records)
    return model, records


def eval_dvae_chamfer(model: DiscreteVAE, data: PreparedData,
                      batch: int = 16) -> float:
    """Mean hard-mode reconstruction Chamfer over the prepared corpus."""
    model.eval()
    n = data.clouds.shape[0]
    out = []
    with no_grad():
        for lo in range(0, n, batch):
            hi = min(lo + batch, n)
            patches = Tensor(data.patches[lo:hi])
            logits = model.token_logits(model.embed(patches))
            _, code_inputs = model.quantize(logits, tau=1.0, mode="hard")
            recon = model.decode(code_inputs, data.centers[lo:hi])
            cd = chamfer_distance_l1(recon, Tensor(data.targets[lo:hi]))
            out.append(np.atleast_1d(cd.data))
    return float(np.concatenate(out).mean())


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

@dataclass
class FrozenTokens:
    embeddings: np.ndarray  # (n, m, d_h) float32 from the frozen encoder
    tokens: np.ndarray      # (n, m) int64 hard assignments


def precompute_tokens(model: DiscreteVAE, data: PreparedData,
                      batch: int = 16) -> FrozenTokens:
    model.eval()
    n = data.clouds.shape[0]
    embeds, tokens = [], []
    with no_grad():
        for lo in range(0, n, batch):
            hi = min(lo + batch, n)
            h = model.embed(Tensor(data.patches[lo:hi]))
            logits = model.token_logits(h)
            embeds.append(h.data)
            tokens.append(np.argmax(logits.data, axis=-1))
    return FrozenTokens(np.concatenate(embeds), np.concatenate(tokens))


def _batch_masks(centers: np.ndarray, idx: np.ndarray, cfg: GPMConfig,
                 step: int, tag: int = _MASK) -> np.ndarray:
    m = centers.shape[1]
    mask = np.zeros((len(idx), m), dtype=bool)
    for j, ci in enumerate(idx):
        rng = np.random.default_rng([cfg.data_seed, tag, step, j])
        mask[j, select_mask_region(centers[ci], cfg.mask_ratio_range, rng)] = True
    return mask


def train_gpm(cfg: GPMConfig, dataset: data_io.Dataset, dvae: DiscreteVAE,
              out_dir: str | Path | None = None,
              resume_from: str | Path | None = None,
              prepared: PreparedData | None = None,
              frozen: FrozenTokens | None = None,
              ) -> tuple[GPMTransformer, list[TrainLogRecord]]:
    data = prepared if prepared is not None else prepare_clouds(dataset, cfg)
    if frozen is None:
        frozen = precompute_tokens(dvae, data)
    n = data.clouds.shape[0]
    model = build_gpm(cfg)
    # a disabled objective leaves its head (and, for the causal side, the
    # start token) outside the graph; keep such params out of the optimizer
    unused: tuple[str, ...] = ()
    if cfg.w_ar == 0.0:
        unused += ("ar_head.", "start_token")
    if cfg.w_ae == 0.0:
        unused += ("ae_head.",)
    named = [(name, p) for name, p in model.named_parameters()
             if not name.startswith(unused)]
    opt = AdamW(named, lr=cfg.gpm_lr, weight_decay=cfg.gpm_weight_decay)
    start_step = 0
    if resume_from is not None:
        start_step = load_training_state(resume_from, model, opt)
    span = cfg.gpm_lr_span or cfg.gpm_steps
    tokenizer_sum_before = parameter_checksum(dvae)
    records: list[TrainLogRecord] = []
    model.train()
    t0 = time.time()
    for step in range(start_step, cfg.gpm_steps):
        batch_rng = np.random.default_rng([cfg.data_seed, _BATCH, step])
        idx = batch_rng.integers(0, n, cfg.gpm_batch)
        mask = _batch_masks(data.centers, idx, cfg, step)
        lr = cosine_schedule(step, span, cfg.gpm_lr, cfg.gpm_min_lr)

        try:
            inp = model.assemble(Tensor(frozen.embeddings[idx]), data.centers[idx],
                                 frozen.tokens[idx], mask)
            if cfg.segment_order == "ba":
                inp = order_swap(inp)
            depth_rng = np.random.default_rng([cfg.sample_seed, _DEPTH, step])
            ae_logits, ar_logits = model.forward(inp, depth_rng)
            ae = loss_ae(ae_logits, inp.labels, inp.mask_bool) if cfg.w_ae > 0 else None
            ar = loss_ar(ar_logits, inp.labels, inp.mask_bool,
                         restrict_to_mask=not cfg.ar_all_positions) \
                if cfg.w_ar > 0 else None
            total = loss_total(ae, ar, cfg.w_ae, cfg.w_ar)

            model.zero_grad()
            total.backward()
            clip_global_grad_norm(model.parameters(), cfg.clip_norm)
            opt.lr = lr
            opt.step()
        except NumericFailure as e:
            raise NumericFailure(f"transformer training step {step}: {e}") from e

        records.append(TrainLogRecord(
            step=step, lr=lr,
            ae=float(ae.data) if ae is not None else 0.0,
            ar=float(ar.data) if ar is not None else 0.0,
            loss=float(total.data), wall=time.time() - t0))
        if out_dir is not None and (
                (step + 1) % cfg.checkpoint_every == 0 or step + 1 == cfg.gpm_steps):
            save_training_state(Path(out_dir) / "gpm.ckpt", model, opt, step + 1)
    model.eval()
    if abs(parameter_checksum(dvae) - tokenizer_sum_before) != 0.0:
        raise RuntimeError("tokenizer parameters changed during frozen training")
    if out_dir is not None:
        save_training_state(Path(out_dir) / "gpm.ckpt", model, opt, cfg.gpm_steps)
        write_log(Path(out_dir) / "gpm_log.tsv", records)
    return model, records


def eval_gpm_loss(model: GPMTransformer, cfg: GPMConfig, data: PreparedData,
                  frozen: FrozenTokens, batch: int = 16) -> float:
    """Deterministic eval: fixed per-cloud masks, no stochastic depth."""
    model.eval()
    n = data.clouds.shape[0]
    losses = []
    with no_grad():
        for lo in range(0, n, batch):
            idx = np.arange(lo, min(lo + batch, n))
            mask = _batch_masks(data.centers, idx, cfg, step=0, tag=19)
            inp = model.assemble(Tensor(frozen.embeddings[idx]), data.centers[idx],
                                 frozen.tokens[idx], mask)
            ae_logits, ar_logits = model.forward(inp, rng=None)
            # eval loss mirrors the training objective but on fixed masks
            terms = []
            if cfg.w_ae > 0:
                terms.append((cfg.w_ae,
                              _ce_value(ae_logits.data, inp.labels, inp.mask_bool)))
            if cfg.w_ar > 0:
                mb = inp.mask_bool if not cfg.ar_all_positions \
                    else np.ones_like(inp.mask_bool)
                terms.append((cfg.w_ar,
                              _ce_value(ar_logits.data, inp.labels, mb)))
            losses.append(sum(w * v for w, v in terms))
    return float(np.mean(losses))


def _ce_value(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    x = logits[mask]
    y = np.asarray(labels)[mask]
    m = x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=-1)) + m[:, 0]
    return float(np.mean(lse - x[np.arange(len(y)), y]))
