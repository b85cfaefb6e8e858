"""Training: score-matching steps, closed-loop steps through the unrolled
sampler, and the alternating round scheduler.

A score-matching (SM) step supervises single-step noise prediction at a
random timestep. A closed-loop (CL) step generates the target view with the
full strided reverse chain, re-encodes the generation with the frozen
encoder, and minimizes the feature-space (or pixel-space) MSE against the
ground-truth target; gradients are tracked through every reverse step.
One alternating round is m_cl CL updates followed by n_sm SM updates, each
phase with its own learning rate, batch size, and accumulation factor.

Only the denoiser and the condition embedder are ever updated; the encoder
stays bit-identical to its initialization. All randomness flows from one
torch generator (noise) and one numpy generator (batch sampling) whose
states are checkpointed, so runs are resumable and bit-reproducible in
single-worker mode.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ExperimentConfig, TrainConfig, config_from_dict, config_to_dict
from .data import TripletBatch, TripletDataset
from .diffusion import (
    NoiseSchedule,
    NumericalFailure,
    forward_noise,
    linear_schedule,
    sample_from,
    strided_plan,
)
from .images import to_model_range
from .nets import ModelBundle, build_bundle
from .rng import derive_seed

TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class Adam(object):
    """Adam over a named parameter dict, with serializable moments.

    Matches the standard bias-corrected update; kept in-tree so checkpoint
    arrays map one-to-one onto optimizer state.
    """

    def __init__(self, params: dict[str, torch.nn.Parameter], lr: float,
                 beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.count = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        self.count += 1
        bc1 = 1.0 - self.beta1**self.count
        bc2 = 1.0 - self.beta2**self.count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = torch.sqrt(v / bc2) + self.eps
            p.add_(-(self.lr / bc1) * m / denom)


def sm_loss(bundle: ModelBundle, batch: TripletBatch, sched: NoiseSchedule,
            t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Noise-prediction MSE at per-item timesteps t with injected noise eps."""
    x_tg = to_model_range(batch.target)
    with torch.no_grad():
        z_class = bundle.encoder(to_model_range(batch.reference)).z_class
    cond = bundle.embedder(z_class, batch.rel_pose)
    x_t = forward_noise(x_tg, t, eps, sched)
    eps_hat = bundle.denoiser(x_t, cond, t)
    return ((eps_hat - eps) ** 2).mean()


def draw_sm_randomness(n: int, sched: NoiseSchedule, shape: tuple[int, ...],
                       gen: torch.Generator, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    t = torch.randint(1, sched.T + 1, (n,), generator=gen)
    eps = torch.randn((n, *shape), generator=gen, dtype=dtype)
    return t, eps


def generate_views(bundle: ModelBundle, batch: TripletBatch, plan: list[int],
                   sched: NoiseSchedule, init: torch.Tensor) -> torch.Tensor:
    """Model-range novel views for a batch, gradients kept through the chain."""
    with torch.no_grad():
        z_class = bundle.encoder(to_model_range(batch.reference)).z_class
    cond = bundle.embedder(z_class, batch.rel_pose)
    return sample_from(bundle.denoiser, cond, plan, sched, init)


def cl_loss(bundle: ModelBundle, batch: TripletBatch, plan: list[int],
            sched: NoiseSchedule, init: torch.Tensor, loss_mode: str) -> torch.Tensor:
    """Closed-loop consistency loss between generated and ground-truth views."""
    x_hat = generate_views(bundle, batch, plan, sched, init)
    x_tg = to_model_range(batch.target)
    if loss_mode == "pixel":
        return ((x_hat - x_tg) ** 2).mean()
    gen_feats = bundle.encoder(x_hat)
    with torch.no_grad():
        tg_feats = bundle.encoder(x_tg)
    if loss_mode == "patch_feature":
        return ((gen_feats.z_patch - tg_feats.z_patch) ** 2).mean()
    if loss_mode == "class_feature":
        return ((gen_feats.z_class - tg_feats.z_class) ** 2).mean()
    raise ValueError(f"unknown loss_mode {loss_mode!r}")


@dataclass
class TrainState:
    config: ExperimentConfig
    bundle: ModelBundle
    sched: NoiseSchedule
    gen: torch.Generator
    batch_rng: np.random.Generator
    optimizers: dict[str, Adam] = field(default_factory=dict)
    global_step: int = 0
    completed_rounds: int = 0
    warm_start_done: bool = False
    log: list[dict] = field(default_factory=list)

    @property
    def dtype(self) -> torch.dtype:
        return TORCH_DTYPES[self.config.train.dtype]

    def optimizer(self, phase: str) -> Adam:
        if phase not in self.optimizers:
            tr = self.config.train
            lr = {"sm": tr.lr_sm, "cl": tr.lr_cl, "simul": tr.lr_cl}[phase]
            self.optimizers[phase] = Adam(
                self.bundle.named_trainable_parameters(), lr,
                beta1=tr.adam_beta1, beta2=tr.adam_beta2,
            )
        return self.optimizers[phase]


def init_state(config: ExperimentConfig) -> TrainState:
    dtype = TORCH_DTYPES[config.train.dtype]
    bundle = build_bundle(config.model.encoder, config.model.denoiser, dtype=dtype)
    sched = linear_schedule(config.train.timesteps, config.train.beta_start, config.train.beta_end)
    gen = torch.Generator()
    gen.manual_seed(derive_seed(config.train.seed, "train-noise"))
    batch_rng = np.random.default_rng(derive_seed(config.train.seed, "train-batches"))
    return TrainState(config=config, bundle=bundle, sched=sched, gen=gen, batch_rng=batch_rng)


def _image_shape(batch: TripletBatch) -> tuple[int, ...]:
    return tuple(batch.target.shape[1:])


def _check_finite(loss: torch.Tensor, phase: str, step: int) -> float:
    val = float(loss.detach())
    if not np.isfinite(val):
        raise NumericalFailure(f"{phase} loss became non-finite at step {step}")
    return val


def sm_step(state: TrainState, micro_batches: list[TripletBatch]) -> float:
    """One optimizer update accumulated over the given micro-batches."""
    opt = state.optimizer("sm")
    opt.zero_grad()
    total = 0.0
    scale = 1.0 / len(micro_batches)
    for batch in micro_batches:
        t, eps = draw_sm_randomness(len(batch), state.sched, _image_shape(batch), state.gen, state.dtype)
        loss = sm_loss(state.bundle, batch, state.sched, t, eps)
        total += _check_finite(loss, "SM", state.global_step)
        (loss * scale).backward()
    opt.step()
    return total * scale


def cl_step(state: TrainState, micro_batches: list[TripletBatch]) -> float:
    opt = state.optimizer("cl")
    opt.zero_grad()
    plan = strided_plan(state.sched.T, state.config.train.cl_denoise_steps)
    total = 0.0
    scale = 1.0 / len(micro_batches)
    for batch in micro_batches:
        init = torch.randn((len(batch), *_image_shape(batch)), generator=state.gen, dtype=state.dtype)
        loss = cl_loss(state.bundle, batch, plan, state.sched, init, state.config.train.loss_mode)
        total += _check_finite(loss, "CL", state.global_step)
        (loss * scale).backward()
    opt.step()
    return total * scale


def simultaneous_step(state: TrainState, micro_batches: list[TripletBatch]) -> float:
    """SM loss plus lambda times CL loss on the same batch, one update."""
    opt = state.optimizer("simul")
    opt.zero_grad()
    plan = strided_plan(state.sched.T, state.config.train.cl_denoise_steps)
    lam = state.config.train.lambda_simul
    total = 0.0
    scale = 1.0 / len(micro_batches)
    for batch in micro_batches:
        t, eps = draw_sm_randomness(len(batch), state.sched, _image_shape(batch), state.gen, state.dtype)
        init = torch.randn((len(batch), *_image_shape(batch)), generator=state.gen, dtype=state.dtype)
        loss = sm_loss(state.bundle, batch, state.sched, t, eps) + lam * cl_loss(
            state.bundle, batch, plan, state.sched, init, state.config.train.loss_mode
        )
        total += _check_finite(loss, "SIMUL", state.global_step)
        (loss * scale).backward()
    opt.step()
    return total * scale


_PHASE_FNS = {"SM": sm_step, "CL": cl_step, "SIMUL": simultaneous_step}


def run_phase(state: TrainState, dataset: TripletDataset, phase: str, n_steps: int,
              log_file=None) -> None:
    tr = state.config.train
    batch_size, accum = {
        "SM": (tr.batch_sm, tr.grad_accum_sm),
        "CL": (tr.batch_cl, tr.grad_accum_cl),
        "SIMUL": (tr.batch_cl, tr.grad_accum_cl),
    }[phase]
    step_fn = _PHASE_FNS[phase]
    for _ in range(n_steps):
        micro = [dataset.draw_batch(state.batch_rng, batch_size) for _ in range(accum)]
        loss = step_fn(state, micro)
        state.global_step += 1
        entry = {"step": state.global_step, "phase": phase, "loss": loss, "wall_time": time.time()}
        state.log.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry) + "\n")
            log_file.flush()


def run_round(state: TrainState, dataset: TripletDataset, log_file=None) -> TrainState:
    """One alternating round: m_cl closed-loop steps, then n_sm SM steps."""
    tr = state.config.train
    if tr.strategy != "alternating":
        raise ValueError("run_round requires the alternating strategy")
    run_phase(state, dataset, "CL", tr.m_cl, log_file)
    run_phase(state, dataset, "SM", tr.n_sm, log_file)
    return state


def state_checkpoint_header(state: TrainState, label: str) -> dict:
    return {
        "label": label,
        "step": state.global_step,
        "round": state.completed_rounds,
        "warm_start_done": state.warm_start_done,
        "config": config_to_dict(state.config),
        "schedule": state.sched.to_dict(),
        "rng": {
            "torch": ckpt.encode_torch_rng(state.gen),
            "numpy": ckpt.encode_np_rng(state.batch_rng),
        },
        "adam_counts": {phase: opt.count for phase, opt in state.optimizers.items()},
        "adam_lrs": {phase: opt.lr for phase, opt in state.optimizers.items()},
    }


def save_state(state: TrainState, path: str | Path, label: str) -> None:
    arrays: dict[str, torch.Tensor] = {}
    for name, p in state.bundle.named_trainable_parameters().items():
        arrays[f"params/{name}"] = p
    for name, p in state.bundle.encoder.state_dict().items():
        arrays[f"encoder/{name}"] = p
    for phase, opt in state.optimizers.items():
        for name in opt.params:
            arrays[f"opt/{phase}/{name}/m"] = opt.m[name]
            arrays[f"opt/{phase}/{name}/v"] = opt.v[name]
    ckpt.save_checkpoint(path, state_checkpoint_header(state, label), arrays)


def load_state(path: str | Path) -> TrainState:
    header, arrays = ckpt.load_checkpoint(path)
    config = config_from_dict(header["config"])
    state = init_state(config)
    state.sched = NoiseSchedule.from_dict(header["schedule"])
    state.global_step = header["step"]
    state.completed_rounds = header["round"]
    state.warm_start_done = header["warm_start_done"]
    state.gen = ckpt.decode_torch_rng(header["rng"]["torch"])
    state.batch_rng = ckpt.decode_np_rng(header["rng"]["numpy"])

    params = state.bundle.named_trainable_parameters()
    with torch.no_grad():
        for name, p in params.items():
            key = f"params/{name}"
            if key not in arrays:
                raise ckpt.CheckpointError(f"checkpoint lacks array {key!r} (architecture mismatch?)")
            if tuple(arrays[key].shape) != tuple(p.shape):
                raise ckpt.CheckpointError(
                    f"array {key!r} has shape {arrays[key].shape}, model expects {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arrays[key]).to(p.dtype))
        enc_state = {
            name: torch.from_numpy(arrays[f"encoder/{name}"]).to(state.dtype)
            for name in state.bundle.encoder.state_dict()
        }
        state.bundle.encoder.load_state_dict(enc_state)

    for phase, count in header.get("adam_counts", {}).items():
        opt = state.optimizer(phase)
        opt.count = count
        for name in opt.params:
            opt.m[name] = torch.from_numpy(arrays[f"opt/{phase}/{name}/m"]).to(state.dtype)
            opt.v[name] = torch.from_numpy(arrays[f"opt/{phase}/{name}/v"]).to(state.dtype)
    return state


def latest_checkpoint(out_dir: str | Path) -> Path | None:
    out = Path(out_dir)
    rounds = sorted(out.glob("round*.ckpt"))
    if rounds:
        return rounds[-1]
    warm = out / "warmstart.ckpt"
    return warm if warm.exists() else None


def train(config: ExperimentConfig, data_dir: str | Path, out_dir: str | Path,
          resume: bool = True) -> tuple[Path, list[dict]]:
    """Full pipeline: optional SM warm start, then the configured rounds.

    Writes warmstart.ckpt and round###.ckpt under out_dir plus a JSON-lines
    log, one record per optimizer step. Resumes from the latest checkpoint
    in out_dir when present (RNG and optimizer state restored).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    latest = latest_checkpoint(out) if resume else None
    if latest is not None:
        state = load_state(latest)
        if config_to_dict(state.config) != config_to_dict(config):
            # resuming continues the checkpoint's own run; trust the new
            # config only for the number of rounds to reach
            state.config = config
    else:
        state = init_state(config)

    dataset = TripletDataset(data_dir, dtype=state.dtype)
    tr = config.train
    final_path = latest if latest is not None else out / "warmstart.ckpt"

    with open(out / "train_log.jsonl", "a", encoding="utf-8") as log_file:
        if not state.warm_start_done:
            run_phase(state, dataset, "SM", tr.warm_start, log_file)
            state.warm_start_done = True
            final_path = out / "warmstart.ckpt"
            save_state(state, final_path, "warmstart")

        rounds = 0 if tr.strategy == "sm_only" else tr.rounds
        for r in range(state.completed_rounds + 1, rounds + 1):
            if tr.strategy == "alternating":
                run_phase(state, dataset, "CL", tr.m_cl, log_file)
                run_phase(state, dataset, "SM", tr.n_sm, log_file)
            elif tr.strategy == "simultaneous":
                run_phase(state, dataset, "SIMUL", tr.m_cl + tr.n_sm, log_file)
            state.completed_rounds = r
            final_path = out / f"round{r:03d}.ckpt"
            save_state(state, final_path, f"round{r}")

    return final_path, state.log
