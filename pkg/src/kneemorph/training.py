"""Optimization of the denoiser and registration net under the hybrid loss."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .autodiff import Tensor
from .diffusion import DenoiserArch, DenoiserNet, NoiseSchedule, diffusion_loss, forward_perturb, make_schedule, predict_noise
from .morphing import CANONICAL_ETAS, RegNet, RegNetArch, morph_loss, predict_flow, scale_flow, warp
from .nn import kaiming_init  # noqa: F401  (re-exported)
from .phantom import PairDataset
from .supervision import SupervisorNet, supervision_loss

log = logging.getLogger(__name__)

# named sub-streams derived from the single config seed
INIT, DATA, DROPOUT, DIFFUSION, INFER = 1, 2, 3, 4, 5

LOG_HEADER = ("step", "epoch", "l_diff", "l_mph", "l_sup", "l_hybrid")


class NumericalError(RuntimeError):
    pass


# ----------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new parameter arrays and state."""
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"{name}: optimizer state shape {m.shape} != parameter shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[name] = m
        v_new[name] = v
    return new_params, AdamState(m_new, v_new, t)


class Adam:
    """Adam bound to a name -> Tensor parameter map; missing gradients count as zero."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = AdamState()

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        new, self.state = adam_step(arrays, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        for k, p in self.params.items():
            p.data = new[k]

    def state_table(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/step": np.array(self.state.step, dtype=np.int64)}
        for k in self.params:
            if k in self.state.m:
                out[f"{prefix}/m/{k}"] = self.state.m[k]
                out[f"{prefix}/v/{k}"] = self.state.v[k]
        return out

    def load_table(self, table: dict[str, np.ndarray], prefix: str) -> None:
        self.state = AdamState(
            {k: table[f"{prefix}/m/{k}"].copy() for k in self.params if f"{prefix}/m/{k}" in table},
            {k: table[f"{prefix}/v/{k}"].copy() for k in self.params if f"{prefix}/v/{k}" in table},
            int(table[f"{prefix}/step"]),
        )


# --------------------------------------------------------------------- config

@dataclass
class TrainConfig:
    lambda_mph: float = 0.1
    lambda_sup: float = 0.01
    lr_denoiser: float = 2e-4
    lr_regnet: float = 1e-3
    steps: int = 300
    epochs: int | None = None
    batch_size: int = 8
    t_max: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 7
    flow_window: int = 5
    stop_sup_grad_at_noise: bool = False
    t_sampling: str = "per-step"
    checkpoint_every: int = 0
    denoiser: DenoiserArch = field(default_factory=DenoiserArch)
    regnet: RegNetArch = field(default_factory=RegNetArch)

    def validate(self) -> None:
        if self.lambda_mph < 0 or self.lambda_sup < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lr_denoiser <= 0 or self.lr_regnet <= 0:
            raise ValueError("learning rates must be positive")
        if self.flow_window < 1:
            raise ValueError("flow_window must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.t_sampling not in ("per-step", "per-epoch"):
            raise ValueError(f"t_sampling must be 'per-step' or 'per-epoch', got {self.t_sampling!r}")
        if self.steps < 1 and not self.epochs:
            raise ValueError("need steps >= 1 or epochs >= 1")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["denoiser"] = self.denoiser.to_dict()
        d["regnet"] = self.regnet.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["denoiser"] = DenoiserArch.from_dict(d["denoiser"])
        d["regnet"] = RegNetArch.from_dict(d["regnet"])
        return cls(**d)

    def total_steps(self, n_pairs: int) -> int:
        if self.epochs:
            return self.epochs * batches_per_epoch(n_pairs, self.batch_size)
        return self.steps


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def substream(seed: int, key: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, key, *extra])


# ---------------------------------------------------------------------- state

@dataclass
class TrainState:
    config: TrainConfig
    schedule: NoiseSchedule
    denoiser: DenoiserNet
    regnet: RegNet
    supervisor: SupervisorNet
    opt_denoiser: Adam
    opt_regnet: Adam
    rng_diffusion: np.random.Generator
    rng_dropout: np.random.Generator
    step: int = 0
    epoch_t_max: int = 0
    flow_history: list[np.ndarray] = field(default_factory=list)


def init_state(config: TrainConfig, supervisor: SupervisorNet) -> TrainState:
    config.validate()
    if not supervisor.frozen:
        raise ValueError("the supervisor must be pre-trained and frozen before DMM training")
    init_rng = substream(config.seed, INIT)
    denoiser = DenoiserNet(config.denoiser, init_rng)
    regnet = RegNet(config.regnet, init_rng)
    return TrainState(
        config=config,
        schedule=make_schedule(config.t_max, config.beta_start, config.beta_end),
        denoiser=denoiser,
        regnet=regnet,
        supervisor=supervisor,
        opt_denoiser=Adam(denoiser.parameters(), config.lr_denoiser),
        opt_regnet=Adam(regnet.parameters(), config.lr_regnet),
        rng_diffusion=substream(config.seed, DIFFUSION),
        rng_dropout=substream(config.seed, DROPOUT),
        epoch_t_max=config.t_max,
    )


class LossBreakdown(NamedTuple):
    l_diff: float
    l_mph: float
    l_sup: float
    l_hybrid: float


def train_step(state: TrainState, x_s: np.ndarray, x_t: np.ndarray) -> LossBreakdown:
    """One pass of the learning algorithm on a batch of (N, H, W) source/target pairs.

    Samples noise and a step per pair, perturbs the target, predicts the noise,
    predicts the flow, warps the source at eta = 1 (morphing loss) and at
    eta = 0.5 / 0.75 (supervision loss), backpropagates the hybrid loss, and
    takes one Adam step per network at its own learning rate.
    """
    cfg = state.config
    x_s = np.asarray(x_s, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    n_batch = x_s.shape[0]
    rng = state.rng_diffusion
    t_hi = state.epoch_t_max if cfg.t_sampling == "per-epoch" else state.schedule.t_max
    t = rng.integers(0, t_hi, size=n_batch)
    noise = rng.standard_normal(x_t.shape)
    x_noisy = forward_perturb(x_t, t, noise, state.schedule)

    state.denoiser.train()
    state.regnet.train()
    state.denoiser.zero_grad()
    state.regnet.zero_grad()
    xs4 = Tensor(x_s[:, None])
    xt4 = x_t[:, None]
    try:
        with ad.Tape() as tape:
            n_hat = predict_noise(state.denoiser, xs4, xt4, x_noisy, t, state.rng_dropout)
            l_diff = diffusion_loss(noise[:, None], n_hat)
            phi = predict_flow(state.regnet, xs4, n_hat)
            l_mph = morph_loss(warp(xs4, phi), xt4)
            phi_sup = predict_flow(state.regnet, xs4, ad.detach(n_hat)) if cfg.stop_sup_grad_at_noise else phi
            l_sup = supervision_loss(
                state.supervisor, warp(xs4, scale_flow(phi_sup, 0.5)), warp(xs4, scale_flow(phi_sup, 0.75))
            )
            l_hybrid = ad.add(l_diff, ad.add(ad.scale(l_mph, cfg.lambda_mph), ad.scale(l_sup, cfg.lambda_sup)))
            tape.backward(l_hybrid)
    except ad.NonFiniteError as exc:
        raise NumericalError(f"step {state.step + 1}: {exc}") from exc

    state.opt_denoiser.step()
    state.opt_regnet.step()
    state.step += 1
    state.flow_history.append(phi.data.mean(axis=0))
    del state.flow_history[:-cfg.flow_window]
    return LossBreakdown(l_diff.item(), l_mph.item(), l_sup.item(), l_hybrid.item())


# ---------------------------------------------------------------- persistence

def state_to_checkpoint(state: TrainState) -> ckpt_io.Checkpoint:
    params = {f"denoiser/{k}": v for k, v in state.denoiser.state_dict().items()}
    params.update({f"regnet/{k}": v for k, v in state.regnet.state_dict().items()})
    optimizer = state.opt_denoiser.state_table("denoiser")
    optimizer.update(state.opt_regnet.state_table("regnet"))
    rng_state = {
        "diffusion": state.rng_diffusion.bit_generator.state,
        "dropout": state.rng_dropout.bit_generator.state,
    }
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "epoch_t_max": state.epoch_t_max,
        "supervisor_digest": state.supervisor.digest(),
    }
    return ckpt_io.Checkpoint("dmm", params, optimizer, rng_state, list(state.flow_history), meta)


def state_from_checkpoint(ck: ckpt_io.Checkpoint, supervisor: SupervisorNet) -> TrainState:
    if ck.role != "dmm":
        raise ValueError(f"expected a 'dmm' checkpoint, got role {ck.role!r}")
    config = TrainConfig.from_dict(ck.meta["config"])
    if ck.meta.get("supervisor_digest") not in (None, supervisor.digest()):
        raise ValueError("supervisor does not match the one this checkpoint was trained with")
    state = init_state(config, supervisor)
    state.denoiser.load_state_dict({k[len("denoiser/"):]: v for k, v in ck.params.items() if k.startswith("denoiser/")})
    state.regnet.load_state_dict({k[len("regnet/"):]: v for k, v in ck.params.items() if k.startswith("regnet/")})
    state.opt_denoiser.load_table(ck.optimizer, "denoiser")
    state.opt_regnet.load_table(ck.optimizer, "regnet")
    state.rng_diffusion.bit_generator.state = ck.rng_state["diffusion"]
    state.rng_dropout.bit_generator.state = ck.rng_state["dropout"]
    state.step = int(ck.meta["step"])
    state.epoch_t_max = int(ck.meta["epoch_t_max"])
    state.flow_history = [f.copy() for f in ck.flow_history]
    return state


def save_state(state: TrainState, path) -> None:
    ckpt_io.save(path, state_to_checkpoint(state))


def load_state(path, supervisor: SupervisorNet) -> TrainState:
    return state_from_checkpoint(ckpt_io.load(path), supervisor)


def save_supervisor(net: SupervisorNet, path, accuracy: float | None = None) -> None:
    meta = {"channels": list(net.channels), "validation_accuracy": accuracy}
    ckpt_io.save(path, ckpt_io.Checkpoint("supervisor", net.state_dict(), meta=meta))


def load_supervisor(path) -> SupervisorNet:
    ck = ckpt_io.load(path)
    if ck.role != "supervisor":
        raise ValueError(f"expected a 'supervisor' checkpoint, got role {ck.role!r}")
    net = SupervisorNet(np.random.default_rng(0), channels=ck.meta["channels"])
    net.load_state_dict(ck.params)
    net.validation_accuracy = ck.meta.get("validation_accuracy")
    return net.freeze()


# ------------------------------------------------------------------------ fit

def _format_row(row) -> list[str]:
    return [str(row[0]), str(row[1])] + [repr(float(v)) for v in row[2:]]


@dataclass
class FitResult:
    state: TrainState
    log: list[tuple]


def fit(dataset: PairDataset, config: TrainConfig | None = None, supervisor: SupervisorNet | None = None,
        out_dir=None, resume=None, stop_after: int | None = None) -> FitResult:
    """Run training over shuffled batches until the configured step count.

    With ``out_dir`` the per-step losses go to ``train_log.csv`` there and
    checkpoints land in ``checkpoints/`` every ``checkpoint_every`` steps.
    ``resume`` continues from a checkpoint (the log is truncated to its step);
    ``stop_after`` halts early at that step, simulating an interruption.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if resume is not None:
        state = load_state(resume, supervisor)
        config = state.config
    else:
        if config is None or supervisor is None:
            raise ValueError("fit needs a config and a supervisor when not resuming")
        state = init_state(config, supervisor)
    n = len(dataset)
    per_epoch = batches_per_epoch(n, config.batch_size)
    total = config.total_steps(n)

    log_path = ckpt_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        ckpt_dir = out_dir / "checkpoints"
        _truncate_log(log_path, state.step)

    rows = []
    perm_epoch, perm = -1, None
    while state.step < total and (stop_after is None or state.step < stop_after):
        epoch, pos = divmod(state.step, per_epoch)
        if epoch != perm_epoch:
            perm = substream(config.seed, DATA, epoch).permutation(n)
            perm_epoch = epoch
        if pos == 0 and config.t_sampling == "per-epoch":
            state.epoch_t_max = int(state.rng_diffusion.integers(1, config.t_max + 1))
        idx = perm[pos * config.batch_size:(pos + 1) * config.batch_size]
        losses = train_step(state, dataset.sources[idx], dataset.targets[idx])
        row = (state.step, epoch) + tuple(losses)
        rows.append(row)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(_format_row(row))
        if state.step % 10 == 0:
            log.info("step %d/%d hybrid=%.5f diff=%.5f mph=%.5f sup=%.5f", state.step, total, losses.l_hybrid,
                     losses.l_diff, losses.l_mph, losses.l_sup)
        if ckpt_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            save_state(state, ckpt_dir / f"step_{state.step:06d}.dmmc")
    return FitResult(state, rows)


def _truncate_log(path: Path, keep: int) -> None:
    lines = path.read_text().splitlines() if path.exists() else []
    body = lines[1:1 + keep] if lines else []
    if len(body) < keep:
        raise ValueError(f"{path} has {len(body)} rows but the checkpoint is at step {keep}")
    path.write_text("\n".join([",".join(LOG_HEADER)] + body) + "\n")


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()}
            for r in csv.DictReader(fh)
        ]


# ------------------------------------------------------------------ inference

def average_flow(history, k: int = 5) -> np.ndarray:
    """Elementwise mean of the last k (2, H, W) fields."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(history) < k:
        raise ValueError(f"need {k} fields in history, have {len(history)}")
    return np.mean(np.stack([np.asarray(f, dtype=np.float64) for f in history[-k:]]), axis=0)


def synthesize_sequence(x_s: np.ndarray, flow: np.ndarray, etas=CANONICAL_ETAS) -> list[np.ndarray]:
    """Frames warp(x_s, eta * flow) in the given eta order."""
    etas = list(etas)
    if not etas:
        raise ValueError("need at least one eta")
    return [warp(x_s, scale_flow(flow, eta)) for eta in etas]


def infer_flows(state: TrainState, sources: np.ndarray, targets: np.ndarray, t: int | None = None,
                batch_size: int = 8) -> np.ndarray:
    """Per-pair flows (N, 2, H, W) in eval mode.

    The diffusion step defaults to the middle of the schedule and the noise
    comes from the inference sub-stream, so repeated calls agree exactly.
    """
    sched = state.schedule
    t = sched.t_max // 2 if t is None else t
    sources = np.asarray(sources, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    noise = substream(state.config.seed, INFER).standard_normal(targets.shape)
    state.denoiser.eval()
    state.regnet.eval()
    out = []
    with ad.no_grad():
        for s in range(0, len(sources), batch_size):
            xs, xt, nz = sources[s:s + batch_size], targets[s:s + batch_size], noise[s:s + batch_size]
            tt = np.full(len(xs), t)
            xn = forward_perturb(xt, tt, nz, sched)
            n_hat = predict_noise(state.denoiser, xs, xt, xn, tt)
            out.append(predict_flow(state.regnet, xs, n_hat).data)
    return np.concatenate(out)


def evaluate_sup_loss(state: TrainState, dataset: PairDataset) -> float:
    """Supervision loss of the inferred per-pair flows over a whole dataset."""
    flows = infer_flows(state, dataset.sources, dataset.targets)
    with ad.no_grad():
        xs = dataset.sources[:, None]
        return supervision_loss(
            state.supervisor, warp(Tensor(xs), Tensor(0.5 * flows)), warp(Tensor(xs), Tensor(0.75 * flows))
        ).item()
