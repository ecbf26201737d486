"""Two-phase training: key-CNN pretraining, then end-to-end decoder training."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .loss import mse_loss
from .model import BlockCnn, CSVideoNet, ModelConfig, init_params
from .sensing import SensingMatrixSet, sense_array

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd", "adagrad")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "full"
    batch_size: int = 20
    steps: int = 2000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0
    optimizer: str = "adam"
    clip_norm: Optional[float] = 5.0

    def __post_init__(self):
        if self.phase not in ("pretrain", "full"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 0:
            raise ValueError("batch size must be positive and counts non-negative")
        if not self.lr > 0 or not self.eps > 0:
            raise ValueError("learning rate and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive or None")

    @classmethod
    def pretrain_defaults(cls, **kw) -> "TrainConfig":
        base = dict(phase="pretrain", batch_size=100, steps=1000, lr=1e-3, clip_norm=None)
        base.update(kw)
        return cls(**base)

    @classmethod
    def full_defaults(cls, **kw) -> "TrainConfig":
        base = dict(phase="full", batch_size=20, steps=2000, lr=1e-4, clip_norm=5.0)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


# -- optimizers ---------------------------------------------------------------


def _check_finite(grads):
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name}")


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig):
    """Bias-corrected Adam update, applied in place. Returns (params, state)."""
    _check_finite(grads)
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(config.lr * (m / c1) / ((v / c2).sqrt() + config.eps))
    return params, state


@torch.no_grad()
def sgd_step(params, grads, state, config):
    _check_finite(grads)
    state.step += 1
    for name, g in grads.items():
        params[name].sub_(config.lr * g)
    return params, state


@torch.no_grad()
def adagrad_step(params, grads, state, config):
    _check_finite(grads)
    state.step += 1
    for name, g in grads.items():
        if name not in state.v:
            state.v[name] = torch.zeros_like(params[name])
        s = state.v[name]
        s.addcmul_(g, g)
        params[name].sub_(config.lr * g / (s.sqrt() + config.eps))
    return params, state


_STEPS = {"adam": adam_step, "sgd": sgd_step, "adagrad": adagrad_step}


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


# -- data ---------------------------------------------------------------------


@dataclass
class SequenceSet:
    """Training sequences, one per (GOP, grid position).

    y_key (S, mKey), y_nonkey (S, T-1, mNonKey), target (S, T, n).
    """

    y_key: torch.Tensor
    y_nonkey: torch.Tensor
    target: torch.Tensor

    def __len__(self):
        return self.target.shape[0]

    def subset(self, idx) -> "SequenceSet":
        return SequenceSet(self.y_key[idx], self.y_nonkey[idx], self.target[idx])

    def to(self, dtype) -> "SequenceSet":
        return SequenceSet(self.y_key.to(dtype), self.y_nonkey.to(dtype), self.target.to(dtype))


def make_sequence_set(blocks: np.ndarray, mats: SensingMatrixSet) -> SequenceSet:
    """Sense a stacked (G, T, rows, cols, b, b) array and flatten positions into sequences."""
    G, T, R, C, b, _ = blocks.shape
    n = b * b
    key, nonkey = sense_array(mats, blocks)  # (G,R,C,mK), (G,T-1,R,C,mN)
    y_key = torch.from_numpy(key.reshape(G * R * C, -1))
    y_non = torch.from_numpy(np.ascontiguousarray(nonkey.transpose(0, 2, 3, 1, 4)).reshape(G * R * C, T - 1, -1))
    target = torch.from_numpy(
        np.ascontiguousarray(blocks.transpose(0, 2, 3, 1, 4, 5)).reshape(G * R * C, T, n).astype(np.float32)
    )
    return SequenceSet(y_key, y_non, target)


def batch_order(size: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Seeded epoch-wise shuffled minibatch indices; one array per step."""
    rng = np.random.Generator(np.random.PCG64(seed))
    bs = min(batch_size, size)
    out, pool = [], np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if len(pool) < bs:
            pool = np.concatenate([pool, rng.permutation(size)])
        out.append(pool[:bs])
        pool = pool[bs:]
    return out


class _JsonlLog:
    def __init__(self, path):
        self.fh = open(path, "a", buffering=1) if path else None
        self.t0 = time.perf_counter()

    def write(self, **rec):
        if self.fh:
            rec["wall"] = round(time.perf_counter() - self.t0, 4)
            self.fh.write(json.dumps(rec) + "\n")

    def close(self):
        if self.fh:
            self.fh.close()


@torch.no_grad()
def dataset_loss(fn, data: SequenceSet, chunk: int = 200) -> float:
    """Training loss over an entire set, evaluated in chunks."""
    total = 0.0
    for s in range(0, len(data), chunk):
        d = data.subset(slice(s, s + chunk))
        total += float((fn(d) - d.target).double().pow(2).sum())
    return total / (2 * len(data))


def _run(module, loss_fn, data, config: TrainConfig, state, log_path, eval_fn):
    params = dict(module.named_parameters())
    step_fn = _STEPS[config.optimizer]
    history, evals = [], []
    jl = _JsonlLog(log_path)
    try:
        for step, idx in enumerate(batch_order(len(data), config.batch_size, config.steps, config.seed), 1):
            batch = data.subset(torch.from_numpy(idx))
            module.zero_grad(set_to_none=True)
            loss = loss_fn(batch)
            loss.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            if config.clip_norm is not None:
                clip_grad_norm(grads, config.clip_norm)
            step_fn(params, grads, state, config)
            history.append(float(loss.detach()))
            jl.write(step=step, phase=config.phase, loss=history[-1])
            if config.eval_every and step % config.eval_every == 0:
                evals.append((step, eval_fn()))
                jl.write(step=step, phase=config.phase, eval_loss=evals[-1][1])
    finally:
        jl.close()
    return history, evals


@dataclass
class PretrainResult:
    key_cnn: BlockCnn
    history: list
    opt_state: OptimizerState
    eval_history: list = field(default_factory=list)


@dataclass
class TrainResult:
    net: CSVideoNet
    history: list
    opt_state: OptimizerState
    eval_history: list = field(default_factory=list)


def pretrain_key_cnn(
    y_key,
    x_key,
    config: TrainConfig,
    model_config: ModelConfig,
    init_seed: int = 0,
    log_path=None,
) -> PretrainResult:
    """Train the key CNN alone on (key measurement, key block) pairs, one block per batch item."""
    y_key = torch.as_tensor(y_key, dtype=torch.float32)
    if len(y_key) == 0:
        raise TrainingError("empty pretraining dataset")
    x_key = torch.as_tensor(x_key, dtype=torch.float32).reshape(len(y_key), -1)
    cnn = init_params(model_config, init_seed).key_cnn
    data = SequenceSet(y_key, y_key[:, None], x_key)
    fwd = lambda d: cnn(d.y_key).reshape(len(d), -1)
    state = OptimizerState()
    hist, evals = _run(
        cnn, lambda d: mse_loss(fwd(d), d.target), data, config, state, log_path,
        lambda: dataset_loss(fwd, data),
    )
    return PretrainResult(cnn, hist, state, evals)


def key_pairs(data: SequenceSet):
    """(key measurement, key block) pairs of a sequence set."""
    return data.y_key, data.target[:, 0]


def train_full(
    data: SequenceSet,
    config: TrainConfig,
    model_config: ModelConfig,
    pretrained: Optional[BlockCnn] = None,
    init_seed: int = 0,
    mode: str = "full",
    log_path=None,
) -> TrainResult:
    """Joint training on whole GOP sequences.

    The key CNN starts from ``pretrained`` when given; everything else comes
    from :func:`init_params`. ``mode="cnn_only"`` trains the LSTM-free arm.
    """
    if len(data) == 0:
        raise TrainingError("empty training dataset")
    if mode not in ("full", "cnn_only"):
        raise ValueError(f"unknown mode {mode!r}")
    net = init_params(model_config, init_seed)
    if pretrained is not None:
        want = {k: tuple(v.shape) for k, v in net.key_cnn.state_dict().items()}
        got = {k: tuple(v.shape) for k, v in pretrained.state_dict().items()}
        if want != got:
            raise TrainingError(f"pretrained key CNN shapes {got} do not match config {want}")
        net.key_cnn.load_state_dict(pretrained.state_dict())
    fwd = net.forward if mode == "full" else net.cnn_only
    f = lambda d: fwd(d.y_key, d.y_nonkey)
    state = OptimizerState()
    hist, evals = _run(
        net, lambda d: mse_loss(f(d), d.target), data, config, state, log_path,
        lambda: dataset_loss(f, data),
    )
    return TrainResult(net, hist, state, evals)


# -- checkpoints --------------------------------------------------------------

MAGIC = b"CSVNCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    module: torch.nn.Module
    model_config: ModelConfig
    opt_state: Optional[OptimizerState]
    sensing: Optional[dict]
    train_config: Optional[dict]
    step: int
    extra: dict


def save_checkpoint(
    module: torch.nn.Module,
    path,
    model_config: ModelConfig,
    opt_state: Optional[OptimizerState] = None,
    sensing_meta: Optional[dict] = None,
    train_config: Optional[TrainConfig] = None,
    extra: Optional[dict] = None,
) -> None:
    """Write magic, a little-endian u32 header length, a JSON header, then float32 arrays."""
    kind = "key_cnn" if isinstance(module, BlockCnn) else "decoder"
    arrays = [("param/" + k, v) for k, v in module.state_dict().items()]
    if opt_state is not None:
        arrays += [("opt/m/" + k, v) for k, v in sorted(opt_state.m.items())]
        arrays += [("opt/v/" + k, v) for k, v in sorted(opt_state.v.items())]
    entries, chunks, offset = [], [], 0
    for name, t in arrays:
        buf = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "model": model_config.to_dict(),
        "sensing": sensing_meta,
        "train": train_config.to_dict() if train_config else None,
        "step": opt_state.step if opt_state else 0,
        "extra": extra or {},
        "dtype": "<f4",
        "arrays": entries,
        "payloadSha256": hashlib.sha256(payload).hexdigest(),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + len(raw).to_bytes(4, "little") + raw + payload)


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    hlen = int.from_bytes(blob[8:12], "little")
    try:
        header = json.loads(blob[12 : 12 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    payload = blob[12 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payloadSha256"):
        raise CheckpointError("checkpoint payload is corrupt")
    return header, payload


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Checkpoint:
    header, payload = read_checkpoint_header(path)
    try:
        mc = ModelConfig(**header["model"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model config in checkpoint: {exc}") from exc
    if expect is not None:
        for key in ("block_size", "m_key", "m_nonkey", "T", "key_channels", "hidden_size"):
            if getattr(expect, key) != getattr(mc, key):
                raise CheckpointError(
                    f"checkpoint {key}={getattr(mc, key)!r} does not match config {getattr(expect, key)!r}"
                )
    net = init_params(mc, 0)
    module = net.key_cnn if header["kind"] == "key_cnn" else net
    target = module.state_dict()
    loaded, m, v = {}, {}, {}
    for e in header["arrays"]:
        shape = tuple(e["shape"])
        if int(np.prod(shape)) * 4 != e["nbytes"] or e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"array {e['name']} shape metadata is inconsistent")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=e["offset"])
        t = torch.from_numpy(arr.reshape(shape).astype(np.float32))
        kind, _, name = e["name"].partition("/")
        if kind == "param":
            if name not in target or tuple(target[name].shape) != shape:
                raise CheckpointError(f"array {name} with shape {shape} does not fit the model")
            loaded[name] = t
        else:
            which, _, pname = name.partition("/")
            (m if which == "m" else v)[pname] = t
    missing = set(target) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    module.load_state_dict(loaded)
    opt = OptimizerState(m, v, header.get("step", 0)) if (m or v or header.get("step")) else None
    return Checkpoint(
        header["kind"], module, mc, opt, header.get("sensing"), header.get("train"),
        header.get("step", 0), header.get("extra", {}),
    )
