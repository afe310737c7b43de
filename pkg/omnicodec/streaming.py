"""
Causal convolutions that run either over a whole signal or step by step.

Every layer offers two paths over the same weights:
    forward(x)          batch path used in training, [B, C, T] -> [B, C', T']
    step(x, state)      streaming path, returns (y, new_state)

State for a layer is a plain tensor (or a list of tensors for containers),
created by init_state(batch). A state depends only on the samples already
consumed, so feeding a signal in any sequence of equal-sized steps gives the
same result as feeding it in one step of the same size.
"""

from typing import List, Optional

import torch
from torch import Tensor, nn
from torch.nn import functional as F


class StreamableConv1d(nn.Module):
    """Conv1d with left padding of (effective kernel - stride), never any lookahead"""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, dilation: int = 1):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, out_channels, kernel_size,
                              stride=stride, dilation=dilation)
        self.in_channels = in_channels
        self.stride = stride
        self.effective_kernel = (kernel_size - 1) * dilation + 1
        self.padding_total = self.effective_kernel - stride

    def forward(self, x: Tensor) -> Tensor:
        x = F.pad(x, (self.padding_total, 0))
        return self.conv(x)

    def init_state(self, batch: int = 1) -> Tensor:
        weight = self.conv.weight
        return torch.zeros(batch, self.in_channels, self.padding_total,
                           dtype=weight.dtype, device=weight.device)

    def step(self, x: Tensor, state: Tensor):
        buffer = torch.cat([state, x], dim=-1)
        length = buffer.shape[-1]
        if length < self.effective_kernel:
            return x.new_zeros(x.shape[0], self.conv.out_channels, 0), buffer

        n_out = (length - self.effective_kernel) // self.stride + 1
        used = (n_out - 1) * self.stride + self.effective_kernel
        y = self.conv(buffer[..., :used])
        return y, buffer[..., n_out * self.stride:]


class StreamableConvTranspose1d(nn.Module):
    """
    ConvTranspose1d trimmed on the right by (kernel - stride)

    The streaming path keeps the not-yet-complete overlap tail of the
    previous step and adds it into the next one.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int):
        super().__init__()
        if kernel_size < stride:
            raise ValueError(f"kernel_size {kernel_size} must be >= stride {stride}")
        self.convtr = nn.ConvTranspose1d(in_channels, out_channels, kernel_size, stride=stride)
        self.out_channels = out_channels
        self.stride = stride
        self.trim = kernel_size - stride

    def forward(self, x: Tensor) -> Tensor:
        y = self.convtr(x)
        if self.trim:
            y = y[..., :-self.trim]
        return y

    def init_state(self, batch: int = 1) -> Tensor:
        weight = self.convtr.weight
        return torch.zeros(batch, self.out_channels, self.trim,
                           dtype=weight.dtype, device=weight.device)

    def step(self, x: Tensor, state: Tensor):
        n_in = x.shape[-1]
        if n_in == 0:
            return x.new_zeros(x.shape[0], self.out_channels, 0), state

        y = F.conv_transpose1d(x, self.convtr.weight, None, stride=self.stride)
        if self.trim:
            y = torch.cat([y[..., :self.trim] + state, y[..., self.trim:]], dim=-1)

        n_out = n_in * self.stride
        out = y[..., :n_out] + self.convtr.bias[None, :, None]
        return out, y[..., n_out:]


class SEANetResnetBlock(nn.Module):
    """ELU -> conv(k) -> ELU -> conv(1) with an identity skip"""

    def __init__(self, dim: int, kernel_size: int = 7, compress: int = 2):
        super().__init__()
        hidden = max(1, dim // compress)
        self.conv1 = StreamableConv1d(dim, hidden, kernel_size)
        self.conv2 = StreamableConv1d(hidden, dim, 1)
        self.activation = nn.ELU()

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv1(self.activation(x))
        y = self.conv2(self.activation(y))
        return x + y

    def init_state(self, batch: int = 1) -> List[Tensor]:
        return [self.conv1.init_state(batch), self.conv2.init_state(batch)]

    def step(self, x: Tensor, state: List[Tensor]):
        y, s1 = self.conv1.step(self.activation(x), state[0])
        y, s2 = self.conv2.step(self.activation(y), state[1])
        return x + y, [s1, s2]


class StreamingSequential(nn.Sequential):
    """nn.Sequential whose stateful children are stepped in order"""

    def init_state(self, batch: int = 1) -> List[Optional[object]]:
        return [
            module.init_state(batch) if hasattr(module, "init_state") else None
            for module in self
        ]

    def step(self, x: Tensor, state: List[Optional[object]]):
        new_state = []
        for module, module_state in zip(self, state):
            if hasattr(module, "step"):
                x, module_state = module.step(x, module_state)
            else:
                x = module(x)
            new_state.append(module_state)
        return x, new_state
