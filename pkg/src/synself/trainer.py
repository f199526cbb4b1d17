"""Contrastive training loop: sample pairs, NT-Xent over projections, Adam.

Every artifact is a deterministic function of (config, dataset): the sampler
rng is owned by the train state and saved in checkpoints, view forwards are
reduced in a fixed order regardless of worker count, and metrics/checkpoint
files carry no clocks or hostnames. Checkpoints reuse the encoder container
format; encoder.load() can open them directly and ignores the extra
optimizer tensors and the train_state config key.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc
from . import ntxent
from . import sampler as sp

METRICS_COLUMNS = ("step", "loss", "grad_norm", "pos_cos", "neg_cos")


class TrainError(RuntimeError):
    """Non-finite loss/gradient or unresumable state."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 500
    log_every: int = 10
    seed: int = 0
    sampler: sp.SamplerConfig = field(default_factory=sp.SamplerConfig)
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    ntxent: ntxent.NTXentConfig = field(default_factory=ntxent.NTXentConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        for name in ("adam_beta1", "adam_beta2"):
            beta = getattr(self, name)
            if not 0 <= beta < 1:
                raise ValueError(f"{name} must lie in [0,1), got {beta}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("checkpoint_every and log_every must be >= 1")
        if self.sampler.patch_side != self.encoder.patch_side:
            raise ValueError(
                f"sampler patch_side {self.sampler.patch_side} != encoder patch_side "
                f"{self.encoder.patch_side}"
            )


@dataclass
class TrainState:
    step: int
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    rng: np.random.Generator

    def copy(self) -> "TrainState":
        clone = np.random.default_rng(0)
        clone.bit_generator.state = self.rng.bit_generator.state
        return TrainState(
            self.step,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
            clone,
        )


def init_state(cfg: TrainConfig) -> TrainState:
    params = enc.init(cfg.encoder)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainState(
        0,
        params,
        zeros,
        {k: v.copy() for k, v in zeros.items()},
        np.random.default_rng(cfg.seed),
    )


def _batch_fingerprint(views: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(views).tobytes()).hexdigest()[:12]


def train_step(state: TrainState, dataset, cfg: TrainConfig, pool: ThreadPoolExecutor | None = None):
    """Advance one step in place; returns the step's metrics dict."""
    batch = sp.sample_batch(dataset, cfg.sampler, state.rng)
    n = cfg.sampler.batch_pairs
    views = np.concatenate([batch.views_a, batch.views_b], axis=0)
    pairing = ntxent.views_pairing(n)

    def fwd(i):
        _, z, cache = enc.forward(state.params, views[i][None, :, :, :], cfg.encoder)
        return z, cache

    if pool is None:
        results = [fwd(i) for i in range(2 * n)]
    else:
        results = list(pool.map(fwd, range(2 * n)))
    z_rows = np.stack([r[0] for r in results])
    value, d_z = ntxent.loss(z_rows, pairing, cfg.ntxent.temperature)

    def bwd(i):
        return enc.backward(state.params, results[i][1], d_z[i], None)

    if pool is None:
        per_view = [bwd(i) for i in range(2 * n)]
    else:
        per_view = list(pool.map(bwd, range(2 * n)))
    grads = {k: np.zeros_like(v) for k, v in state.params.items()}
    for g in per_view:  # fixed view order keeps the reduction deterministic
        for k in grads:
            grads[k] += g[k]

    sq_sum = sum(float(np.sum(g * g)) for g in grads.values())
    grad_norm = float(np.sqrt(sq_sum))
    if not (np.isfinite(value) and np.isfinite(grad_norm)):
        raise TrainError(
            f"non-finite loss/gradient at step {state.step + 1} "
            f"(batch fingerprint {_batch_fingerprint(views)})"
        )

    t = state.step + 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for k, g in grads.items():
        m = state.adam_m[k]
        v = state.adam_v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        state.params[k] -= cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps)
    state.step = t

    pos_cos, neg_cos = ntxent.batch_cosine_stats(z_rows, pairing)
    return {
        "step": t,
        "loss": value,
        "grad_norm": grad_norm,
        "pos_cos": pos_cos,
        "neg_cos": neg_cos,
    }


def write_metrics(rows: list[dict], path) -> None:
    from .volume_io import _atomic_write

    def body(f):
        lines = [",".join(METRICS_COLUMNS)]
        for r in rows:
            lines.append(
                f"{r['step']},{r['loss']:.17g},{r['grad_norm']:.17g},"
                f"{r['pos_cos']:.17g},{r['neg_cos']:.17g}"
            )
        f.write(("\n".join(lines) + "\n").encode("utf-8"))

    _atomic_write(path, body)


def save_train_state(state: TrainState, cfg: TrainConfig, path) -> None:
    config = asdict(cfg.encoder)
    config["train_state"] = {"step": state.step, "rng_state": state.rng.bit_generator.state}
    tensors = dict(state.params)
    for k, v in state.adam_m.items():
        tensors[f"adam.m.{k}"] = v
    for k, v in state.adam_v.items():
        tensors[f"adam.v.{k}"] = v
    enc.write_container(path, config, tensors)


def load_train_state(path) -> tuple[TrainState, enc.EncoderConfig]:
    config, tensors = enc.read_container(path)
    cfg_enc = enc._config_from_json(config)
    ts = config.get("train_state")
    if ts is None:
        raise TrainError(f"{path}: checkpoint has no train_state; cannot resume from it")
    params, adam_m, adam_v = {}, {}, {}
    for name, shape in enc.param_shapes(cfg_enc).items():
        for prefix, dest in (("", params), ("adam.m.", adam_m), ("adam.v.", adam_v)):
            key = prefix + name
            if key not in tensors:
                raise TrainError(f"{path}: missing tensor {key!r}")
            if tensors[key].shape != shape:
                raise TrainError(
                    f"{path}: tensor {key!r} has shape {tensors[key].shape}, expected {shape}"
                )
            dest[name] = tensors[key]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = ts["rng_state"]
    return TrainState(int(ts["step"]), params, adam_m, adam_v, rng), cfg_enc


def train(
    cfg: TrainConfig,
    dataset,
    out_dir,
    threads: int = 1,
    resume_from=None,
) -> tuple[TrainState, list[dict]]:
    """Run cfg.steps total steps, writing checkpoints and metrics.csv to out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is None:
        state = init_state(cfg)
    else:
        state, ck_enc = load_train_state(resume_from)
        if ck_enc != cfg.encoder:
            raise TrainError(
                f"{resume_from}: checkpoint encoder config {ck_enc} != train config {cfg.encoder}"
            )
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    rows = []
    try:
        while state.step < cfg.steps:
            metrics = train_step(state, dataset, cfg, pool)
            t = state.step
            if t % cfg.log_every == 0 or t == cfg.steps:
                rows.append(metrics)
            if t % cfg.checkpoint_every == 0 or t == cfg.steps:
                save_train_state(state, cfg, os.path.join(out_dir, f"ckpt_{t:06d}.dckpt"))
    finally:
        if pool is not None:
            pool.shutdown()
    save_train_state(state, cfg, os.path.join(out_dir, "ckpt_final.dckpt"))
    write_metrics(rows, os.path.join(out_dir, "metrics.csv"))
    return state, rows
