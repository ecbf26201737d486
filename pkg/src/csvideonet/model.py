"""Decoder: multi-rate measurement-to-block CNNs followed by a synthesizing LSTM.

Every grid position of a GOP is an independent sequence of T measurement
vectors. The key CNN turns the first (high-rate) vector into a block, one
shared non-key CNN handles the remaining T-1 low-rate vectors, and the LSTM
consumes the flattened blocks in order and emits the refined GOP.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .loss import mse_loss
from .sensing import MeasurementGop


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    block_size: int = 32
    m_key: int = 40
    m_nonkey: int = 10
    T: int = 10
    key_channels: tuple = (128, 64, 32, 32, 16, 16, 1)
    nonkey_channels: tuple = (64, 16, 1)
    hidden_size: int = 1024
    num_layers: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "key_channels", tuple(self.key_channels))
        object.__setattr__(self, "nonkey_channels", tuple(self.nonkey_channels))
        if self.kernel_size % 2 != 1:
            raise ModelError("kernel size must be odd to preserve spatial size")
        for plan in (self.key_channels, self.nonkey_channels):
            if not plan or plan[-1] != 1 or min(plan) < 1:
                raise ModelError(f"channel plan {plan} must be positive and end in 1")
        if min(self.block_size, self.m_key, self.m_nonkey, self.hidden_size, self.num_layers) < 1:
            raise ModelError("sizes must be positive")
        if self.T < 2:
            raise ModelError("T must be at least 2")

    @property
    def n(self) -> int:
        return self.block_size**2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["key_channels"] = list(self.key_channels)
        d["nonkey_channels"] = list(self.nonkey_channels)
        return d


class BlockCnn(nn.Module):
    """Dense map m -> b*b reshaped to one map, then size-preserving convolutions.

    ReLU follows every stage except the last convolution. No pooling, stride 1.
    """

    def __init__(self, m: int, block_size: int, channels, kernel_size: int = 3):
        super().__init__()
        self.m = m
        self.block_size = block_size
        self.fc = nn.Linear(m, block_size * block_size)
        convs, c_in = [], 1
        for c_out in channels:
            convs.append(nn.Conv2d(c_in, c_out, kernel_size, stride=1, padding=kernel_size // 2))
            c_in = c_out
        self.convs = nn.ModuleList(convs)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.shape[-1] != self.m:
            raise ModelError(f"expected {self.m} measurements, got {y.shape[-1]}")
        lead = y.shape[:-1]
        b = self.block_size
        x = F.relu(self.fc(y.reshape(-1, self.m))).view(-1, 1, b, b)
        last = len(self.convs) - 1
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < last:
                x = F.relu(x)
        return x.view(*lead, b, b)


def lstm_cell(x, h, c, w_ih, w_hh, bias):
    """One LSTM step; gate rows are stacked in (input, forget, candidate, output) order."""
    gates = F.linear(x, w_ih) + F.linear(h, w_hh) + bias
    i, f, g, o = gates.chunk(4, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


class SynthLstm(nn.Module):
    def __init__(self, n: int, hidden_size: int = 1024, num_layers: int = 1):
        super().__init__()
        self.n = n
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        H = hidden_size
        self.w_ih = nn.ParameterList(
            [nn.Parameter(torch.empty(4 * H, n if k == 0 else H)) for k in range(num_layers)]
        )
        self.w_hh = nn.ParameterList([nn.Parameter(torch.empty(4 * H, H)) for _ in range(num_layers)])
        self.bias = nn.ParameterList([nn.Parameter(torch.empty(4 * H)) for _ in range(num_layers)])
        self.proj = nn.Linear(H, n)

    def zero_state(self, batch: int, like: torch.Tensor):
        z = like.new_zeros(batch, self.hidden_size)
        return [(z, z) for _ in range(self.num_layers)]

    def step(self, x: torch.Tensor, state):
        if x.shape[-1] != self.n:
            raise ModelError(f"LSTM input has length {x.shape[-1]}, expected {self.n}")
        new_state = []
        for k, (h, c) in enumerate(state):
            h, c = lstm_cell(x, h, c, self.w_ih[k], self.w_hh[k], self.bias[k])
            new_state.append((h, c))
            x = h
        return new_state

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """(B, T, n) -> (B, T, n)."""
        state = self.zero_state(z.shape[0], z)
        outs = []
        for t in range(z.shape[1]):
            state = self.step(z[:, t], state)
            outs.append(self.proj(state[-1][0]))
        return torch.stack(outs, dim=1)


class CSVideoNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.key_cnn = BlockCnn(c.m_key, c.block_size, c.key_channels, c.kernel_size)
        self.nonkey_cnn = BlockCnn(c.m_nonkey, c.block_size, c.nonkey_channels, c.kernel_size)
        self.lstm = SynthLstm(c.n, c.hidden_size, c.num_layers)

    def _check(self, y_key, y_nonkey):
        c = self.config
        if y_key.ndim != 2 or y_key.shape[1] != c.m_key:
            raise ModelError(f"key measurements must be (B, {c.m_key}), got {tuple(y_key.shape)}")
        if y_nonkey.ndim != 3 or y_nonkey.shape[1:] != (c.T - 1, c.m_nonkey):
            raise ModelError(
                f"non-key measurements must be (B, {c.T - 1}, {c.m_nonkey}), got {tuple(y_nonkey.shape)}"
            )
        if y_key.shape[0] != y_nonkey.shape[0]:
            raise ModelError("key and non-key batch sizes differ")

    def cnn_only(self, y_key: torch.Tensor, y_nonkey: torch.Tensor) -> torch.Tensor:
        """Per-frame CNN reconstructions (B, T, n) with the LSTM bypassed."""
        self._check(y_key, y_nonkey)
        n = self.config.n
        z_key = self.key_cnn(y_key).reshape(-1, 1, n)
        z_non = self.nonkey_cnn(y_nonkey).reshape(y_nonkey.shape[0], -1, n)
        out = torch.cat([z_key, z_non], dim=1)
        if not torch.isfinite(out).all():
            raise ModelError("non-finite CNN activations")
        return out

    def forward(self, y_key: torch.Tensor, y_nonkey: torch.Tensor) -> torch.Tensor:
        return self.lstm(self.cnn_only(y_key, y_nonkey))


def _uniform_(rng: np.random.Generator, p: torch.Tensor, bound: float):
    vals = rng.uniform(-bound, bound, size=tuple(p.shape))
    with torch.no_grad():
        p.copy_(torch.from_numpy(vals))


def _init_block_cnn(cnn: BlockCnn, rng):
    relu_gain = math.sqrt(2.0)
    layers = [cnn.fc, *cnn.convs]
    for i, layer in enumerate(layers):
        fan_in = layer.weight[0].numel()
        gain = 1.0 if i == len(layers) - 1 else relu_gain
        _uniform_(rng, layer.weight, gain * math.sqrt(3.0 / fan_in))
        nn.init.zeros_(layer.bias)


def init_params(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> CSVideoNet:
    """Fan-in scaled uniform weights (He gain before ReLU), zero biases, LSTM forget bias 1.

    Draws come from numpy's PCG64 so the result depends only on (config, seed).
    """
    net = CSVideoNet(config).to(dtype)
    rng = np.random.Generator(np.random.PCG64(seed))
    _init_block_cnn(net.key_cnn, rng)
    _init_block_cnn(net.nonkey_cnn, rng)
    lstm = net.lstm
    H = lstm.hidden_size
    for k in range(lstm.num_layers):
        _uniform_(rng, lstm.w_ih[k], math.sqrt(3.0 / lstm.w_ih[k].shape[1]))
        _uniform_(rng, lstm.w_hh[k], math.sqrt(3.0 / H))
        with torch.no_grad():
            lstm.bias[k].zero_()
            lstm.bias[k][H : 2 * H] = 1.0
    _uniform_(rng, lstm.proj.weight, math.sqrt(3.0 / H))
    nn.init.zeros_(lstm.proj.bias)
    return net


def key_cnn_forward(net: CSVideoNet, y) -> torch.Tensor:
    return net.key_cnn(torch.as_tensor(y, dtype=_dtype(net)))


def nonkey_cnn_forward(net: CSVideoNet, y) -> torch.Tensor:
    return net.nonkey_cnn(torch.as_tensor(y, dtype=_dtype(net)))


def lstm_step(lstm: SynthLstm, x, state=None):
    x = torch.as_tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if state is None:
        state = lstm.zero_state(x.shape[0], x)
    new = lstm.step(x, state)
    if squeeze:
        new = [(h[0], c[0]) for h, c in new]
    return new


def _dtype(net: nn.Module):
    return next(net.parameters()).dtype


def gop_inputs(net: CSVideoNet, mg: MeasurementGop):
    c = net.config
    if mg.cr_meta != (c.m_key, c.m_nonkey, c.T, c.n):
        raise ModelError(f"measurement GOP {mg.cr_meta} does not match model {(c.m_key, c.m_nonkey, c.T, c.n)}")
    dt = _dtype(net)
    rows, cols = mg.grid
    y_key = torch.as_tensor(np.asarray(mg.key), dtype=dt).reshape(rows * cols, c.m_key)
    y_non = torch.as_tensor(np.asarray(mg.nonkey), dtype=dt)
    y_non = y_non.permute(1, 2, 0, 3).reshape(rows * cols, c.T - 1, c.m_nonkey)
    return y_key, y_non


def _to_gop(out: torch.Tensor, grid, block_size) -> np.ndarray:
    rows, cols = grid
    T = out.shape[1]
    arr = out.detach().reshape(rows, cols, T, block_size, block_size).permute(2, 0, 1, 3, 4)
    return arr.cpu().numpy()


@torch.no_grad()
def csvideonet_forward(net: CSVideoNet, mg: MeasurementGop) -> np.ndarray:
    """Reconstruct one GOP; returns (T, rows, cols, b, b)."""
    y_key, y_non = gop_inputs(net, mg)
    return _to_gop(net(y_key, y_non), mg.grid, net.config.block_size)


@torch.no_grad()
def cnn_only_forward(net: CSVideoNet, mg: MeasurementGop) -> np.ndarray:
    y_key, y_non = gop_inputs(net, mg)
    return _to_gop(net.cnn_only(y_key, y_non), mg.grid, net.config.block_size)


def backward(net: CSVideoNet, y_key, y_nonkey, target, mode: str = "full", frames=None):
    """Loss and exact gradients for every named parameter.

    ``target`` is (B, T, n). ``mode`` picks the full decoder or the CNN-only arm;
    ``frames`` optionally restricts the loss to a subset of frame indices.
    Parameters the loss does not touch get zero gradients.
    """
    net.zero_grad(set_to_none=True)
    out = net(y_key, y_nonkey) if mode == "full" else net.cnn_only(y_key, y_nonkey)
    if frames is not None:
        out, target = out[:, frames], target[:, frames]
    loss = mse_loss(out, target)
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in net.named_parameters()
    }
    return loss.detach(), grads
