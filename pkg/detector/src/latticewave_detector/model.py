"""Receiver-grid convolutional crack detector.

The network consumes a stack of per-receiver displacement histories shaped
(B, 2, 81, T) and emits a (B, 16, 16) grid of damage probabilities:

  extractor  three blocks of [two time-axis convolutions + BN + LeakyReLU]
             followed by max-pooling of step 4 along time
  fusion-1   full-time-extent convolution collapsing the time axis,
             then a reshape of the 81 receivers onto their 9x9 grid
  fusion-2   9x9 convolution collapsing the receiver grid to one vector
  predictor  reshape to (c, 4, 4), two stride-2 transposed convolutions,
             and a sigmoid-activated 1x1 convolution to 16x16
"""

from __future__ import annotations

import torch
from torch import nn


class CrackDetector(nn.Module):
    def __init__(
        self,
        time_steps: int = 2000,
        n_receivers: int = 81,
        in_channels: int = 2,
        block_filters: tuple[int, int, int] = (16, 32, 64),
        time_kernels: tuple[int, int, int] = (9, 7, 5),
        fusion_channels: tuple[int, int] = (128, 256),
        negative_slope: float = 0.01,
    ):
        super().__init__()
        if n_receivers != 81:
            raise ValueError("the receiver stage expects a 9x9 grid (81 receivers)")
        t_hat = time_steps
        for _ in range(3):
            t_hat //= 4
        if t_hat < 1:
            raise ValueError(f"time_steps={time_steps} too short for three pool-4 stages")
        c1, c2 = fusion_channels
        if c2 % 16 != 0:
            raise ValueError("second fusion width must reshape onto a 4x4 grid")
        self.time_steps = time_steps
        self.t_hat = t_hat
        self.predictor_channels = c2 // 16

        blocks = []
        prev = in_channels
        for width, k in zip(block_filters, time_kernels):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, width, (1, k), padding=(0, k // 2)),
                    nn.BatchNorm2d(width),
                    nn.LeakyReLU(negative_slope),
                    nn.Conv2d(width, width, (1, k), padding=(0, k // 2)),
                    nn.BatchNorm2d(width),
                    nn.LeakyReLU(negative_slope),
                    nn.MaxPool2d((1, 4)),
                )
            )
            prev = width
        self.extractor = nn.Sequential(*blocks)
        self.fusion1 = nn.Sequential(
            nn.Conv2d(prev, c1, (1, t_hat)),
            nn.BatchNorm2d(c1),
            nn.LeakyReLU(negative_slope),
        )
        # no batch norm here: the output is 1x1 per sample
        self.fusion2 = nn.Sequential(
            nn.Conv2d(c1, c2, (9, 9)),
            nn.LeakyReLU(negative_slope),
        )
        c = self.predictor_channels
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(c, c // 2, 4, stride=2, padding=1),
            nn.LeakyReLU(negative_slope),
            nn.ConvTranspose2d(c // 2, c // 4, 4, stride=2, padding=1),
            nn.LeakyReLU(negative_slope),
        )
        self.head = nn.Conv2d(c // 4, 1, 1)
        self._shape_checked = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = x.shape[0]
        if x.shape[1:] != (2, 81, self.time_steps):
            raise ValueError(
                f"expected input (B, 2, 81, {self.time_steps}), got {tuple(x.shape)}"
            )
        h = self.extractor(x)
        assert h.shape == (b, self.extractor[-1][0].out_channels, 81, self.t_hat)
        h = self.fusion1(h)
        assert h.shape[2:] == (81, 1)
        h = h.squeeze(-1).reshape(b, h.shape[1], 9, 9)
        h = self.fusion2(h)
        assert h.shape[2:] == (1, 1)
        h = h.reshape(b, self.predictor_channels, 4, 4)
        h = self.decoder(h)
        assert h.shape[2:] == (16, 16)
        h = self.head(h)
        assert h.shape == (b, 1, 16, 16)
        return torch.sigmoid(h).squeeze(1)

    def intermediate_shapes(self, batch: int = 1) -> dict[str, tuple]:
        """Shapes at every published stage for one dry forward pass."""
        shapes = {}
        x = torch.zeros(batch, 2, 81, self.time_steps)
        was_training = self.training
        self.eval()
        with torch.no_grad():
            h = self.extractor(x)
            shapes["extractor"] = tuple(h.shape)
            h = self.fusion1(h)
            shapes["fusion1"] = tuple(h.shape)
            h = h.squeeze(-1).reshape(batch, h.shape[1], 9, 9)
            shapes["receiver_grid"] = tuple(h.shape)
            h = self.fusion2(h)
            shapes["fusion2"] = tuple(h.shape)
            h = h.reshape(batch, self.predictor_channels, 4, 4)
            shapes["pre_predictor"] = tuple(h.shape)
            h = self.decoder(h)
            shapes["pre_output"] = tuple(h.shape)
            shapes["output"] = tuple(torch.sigmoid(self.head(h)).squeeze(1).shape)
        if was_training:
            self.train()
        return shapes
