"""Curriculum training over mixed forecast horizons.

One step samples a handful of lead times, encodes the initial state once,
advances the latent along the shared six-hour prefix chain, decodes at each
sampled lead, and applies a single optimizer update to the per-plane
sigma-normalized squared error averaged over the leads. Later stages reuse
the same step with a different lead-time pool and a restricted trainable
set: the hourly stage tunes only the one-hour processor, the multi-source
stage tunes only the added encoders and the blend weights.
"""

from __future__ import annotations

import csv
import math
import os

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .errors import ConfigError, DataError
from .model import (
    LatentState,
    ModelConfig,
    available_sources,
    blend_latents,
    decode,
    encode,
    init_model_params,
    process,
)
from .serialization import save_params_file
from .synthdata import WeatherDataset

STAGES = ("pretrain", "anneal", "1h", "operational")

LR_MAX_DEFAULT = 3e-4

# step threshold -> admissible lead times (hours); the pool only ever grows
PRETRAIN_SCHEDULE = (
    (0, (0, 6, 12)),
    (1000, (0, 6, 12, 18, 24)),
    (15000, (0, 6, 12, 18, 24, 30)),
    (21000, (0, 6, 12, 18, 24, 30, 36)),
    (26000, (0, 6, 12, 18, 24, 30, 36, 42)),
    (30000, (0, 6, 12, 18, 24, 30, 36, 42, 48)),
)

ANNEAL_MAX_DT = 120
HOURLY_MAX_DT = 24


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def admissible_dts(step: int, stage: str = "pretrain") -> tuple:
    """Lead-time pool for one training step of the given stage."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if step < 0:
        raise ConfigError("step must be >= 0")
    if stage == "anneal":
        return tuple(range(0, ANNEAL_MAX_DT + 1, 6))
    if stage == "1h":
        return tuple(range(0, HOURLY_MAX_DT + 1))
    pool = PRETRAIN_SCHEDULE[0][1]
    for threshold, dts in PRETRAIN_SCHEDULE:
        if step >= threshold:
            pool = dts
    return pool


def sample_dts(rng, admissible, n_draw: int = 3) -> tuple:
    """Sorted unique lead times: n_draw-1 random picks plus the pool maximum."""
    if not admissible:
        raise ConfigError("empty lead-time pool")
    picks = rng.choice(len(admissible), size=max(0, n_draw - 1), replace=True)
    chosen = {admissible[int(i)] for i in picks}
    chosen.add(max(admissible))
    return tuple(sorted(chosen))


def sample_dts_hourly(rng, n_draw: int = 5) -> tuple:
    """Hourly-stage leads: uniform over 0..24, no forced maximum."""
    picks = rng.integers(0, HOURLY_MAX_DT + 1, size=n_draw)
    return tuple(sorted({int(d) for d in picks}))


def cosine_lr(step: int, total_steps: int, lr_max: float = LR_MAX_DEFAULT,
              lr_min: float = 0.0) -> float:
    """Half-cosine decay; exactly lr_max at step 0 and lr_min at the last step."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    if step < 0 or step >= total_steps:
        raise ConfigError(f"step {step} outside 0..{total_steps - 1}")
    if total_steps == 1:
        return lr_max
    frac = step / (total_steps - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with per-name moments; touches only the trainable subset.

    Parameters outside the trainable set are never written, so stage
    freezing is bitwise. A trainable parameter that received no gradient
    this step keeps its moments unchanged.
    """

    def __init__(self, params: dict, trainable=None, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        names = tuple(sorted(trainable)) if trainable is not None \
            else tuple(sorted(params))
        for n in names:
            if n not in params:
                raise ConfigError(f"trainable name {n!r} not in parameters")
        self.params = params
        self.trainable = names
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(params[n].values) for n in names}
        self.v = {n: np.zeros_like(params[n].values) for n in names}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n in self.trainable:
            p = self.params[n]
            g = grads.get(p)
            if g is None:
                continue
            m, v = self.m[n], self.v[n]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.values -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def trainable_names(params: dict, stage: str) -> tuple:
    """Which parameters a stage may update."""
    if stage in ("pretrain", "anneal"):
        keep = lambda k: not (k.startswith("proc1.") or k.startswith("enc_op.")
                              or k.startswith("blend."))
    elif stage == "1h":
        keep = lambda k: k.startswith("proc1.")
    elif stage == "operational":
        keep = lambda k: k.startswith("enc_op.") or k.startswith("blend.")
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    return tuple(sorted(k for k in params if keep(k)))


def add_source_encoders(params: dict, cfg: ModelConfig, names, seed: int = 0) -> None:
    """Graft fresh encoders for extra input sources plus uniform blend logits."""
    names = tuple(names)
    if not names:
        raise ConfigError("no source names given")
    fresh = init_model_params(cfg, seed=seed, extra_sources=names)
    for k, v in fresh.items():
        if k.startswith("enc_op."):
            params[k] = v
    params["blend.logits"] = Tensor(np.zeros(len(names) + 1), requires_grad=True)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def normalized_loss(dec, sfc_true: np.ndarray, atm_true: np.ndarray,
                    sigmas: np.ndarray) -> Tensor:
    """Mean squared error with each field plane scaled by its dataset sigma."""
    s = sfc_true.shape[0]
    inv_sfc = (1.0 / sigmas[:s]).reshape(s, 1, 1)
    a, l = atm_true.shape[0], atm_true.shape[1]
    inv_atm = (1.0 / sigmas[s:]).reshape(a, l, 1, 1)
    d_sfc = (dec.surface - Tensor(sfc_true)) * Tensor(inv_sfc)
    d_atm = (dec.atmos - Tensor(atm_true)) * Tensor(inv_atm)
    n = d_sfc.values.size + d_atm.values.size
    return (d_sfc * d_sfc).sum() * (1.0 / n) + (d_atm * d_atm).sum() * (1.0 / n)


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------

def _initial_latent(params, cfg, ds, idx, stage):
    if stage != "operational":
        return encode(ds.input_state(idx, source=0), params, cfg)
    sources = available_sources(params)
    if len(sources) < 2:
        raise ConfigError("operational stage needs at least two encoders")
    if ds.n_sources < len(sources):
        raise ConfigError(
            f"{len(sources)} encoders but dataset has {ds.n_sources} sources")
    if "blend.logits" not in params:
        raise ConfigError("operational stage needs blend.logits")
    lats = [encode(ds.input_state(idx, source=j), params, cfg, source=name)
            for j, name in enumerate(sources)]
    weights = ad.softmax(params["blend.logits"])
    return blend_latents(lats, weights)


def train_step(params, cfg: ModelConfig, ds: WeatherDataset, dts, t0: int,
               sigmas: np.ndarray, stage: str = "pretrain"):
    """Shared-prefix multi-lead step; returns the scalar loss Tensor.

    The initial state is encoded once. Latents at six-hour multiples are
    computed once and reused by every lead that needs them; hour tails
    branch off the nearest six-hour latent.
    """
    dts = tuple(sorted(set(int(d) for d in dts)))
    if not dts:
        raise ConfigError("no lead times sampled")
    idx0 = ds.index_at(t0)
    lat0 = _initial_latent(params, cfg, ds, idx0, stage)

    six_chain = {0: lat0}

    def latent_at(h: int) -> LatentState:
        if h not in six_chain:
            six_chain[h] = process(latent_at(h - 6), params, cfg, 6)
        return six_chain[h]

    total = None
    for dt in dts:
        z = latent_at((dt // 6) * 6)
        for _ in range(dt % 6):
            z = process(z, params, cfg, 1)
        dec = decode(z, params, cfg)
        sfc_t, atm_t = ds.truth_fields(ds.index_at(t0 + dt))
        term = normalized_loss(dec, sfc_t, atm_t, sigmas)
        total = term if total is None else total + term
    return total * (1.0 / len(dts))


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

def clip_gradients(grads: dict, clip_norm: float) -> float:
    """Scale all gradients so their global norm is at most clip_norm.

    Returns the pre-clip norm. Mutates the gradient arrays in place.
    """
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if norm > clip_norm > 0.0:
        scale = clip_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train(params: dict, cfg: ModelConfig, ds: WeatherDataset, stage: str,
          steps: int, seed: int = 0, out_dir=None, lr_max: float = LR_MAX_DEFAULT,
          lr_min: float = 0.0, n_draw: int = 3, checkpoint_every: int = 100,
          clip_norm: float = 1.0):
    """Run one stage for a fixed number of steps; returns the step history.

    All randomness flows from the single seed. With out_dir set, writes a
    per-step CSV (step, lr, loss, dts) plus parameter checkpoints.
    clip_norm bounds the global gradient norm before each update; pass 0 to
    disable clipping.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    horizon_cap = max(admissible_dts(steps - 1, stage))
    if int(ds.times[-1]) < horizon_cap:
        raise DataError(
            f"dataset spans {int(ds.times[-1])} h but stage needs {horizon_cap} h")
    if stage == "1h" and 1 not in cfg.horizons:
        raise ConfigError("hourly stage needs a one-hour processor in cfg.horizons")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    rng = np.random.default_rng([seed, 13])
    opt = Adam(params, trainable=trainable_names(params, stage))
    sigmas = ds.plane_sigmas()
    history = []
    for i in range(steps):
        lr = cosine_lr(i, steps, lr_max, lr_min)
        if stage == "1h":
            dts = sample_dts_hourly(rng)
        else:
            dts = sample_dts(rng, admissible_dts(i, stage), n_draw)
        hi = int(ds.times[-1]) - max(dts)
        t0 = int(ds.times[0]) + int(rng.integers(0, hi - int(ds.times[0]) + 1))
        loss = train_step(params, cfg, ds, dts, t0, sigmas, stage)
        grads = backward(loss, leaves=[params[n] for n in opt.trainable])
        if clip_norm:
            clip_gradients(grads, clip_norm)
        opt.step(grads, lr)
        history.append({"step": i, "lr": lr, "loss": float(loss.values),
                        "dts": dts})
        if out_dir is not None and checkpoint_every and (i + 1) % checkpoint_every == 0:
            save_params_file(os.path.join(out_dir, f"params_step_{i + 1:06d}.lmtw"),
                             {k: v.values for k, v in params.items()})

    if out_dir is not None:
        with open(os.path.join(out_dir, "train_log.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "lr", "loss", "dts"])
            for row in history:
                w.writerow([row["step"], f"{row['lr']:.12e}",
                            f"{row['loss']:.12e}",
                            ";".join(str(d) for d in row["dts"])])
        save_params_file(os.path.join(out_dir, "params_final.lmtw"),
                         {k: v.values for k, v in params.items()})
    return history
