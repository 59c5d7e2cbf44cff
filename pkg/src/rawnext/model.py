"""Raw-waveform speaker embedding network.

Two operating modes share the same front-end, pooling, and embedding head:

* ``baseline`` -- grouped-convolution residual blocks (cardinality 32),
  stages stacked sequentially with a max-pool at each stage end.
* ``rawnext`` -- each block splits its paths across three temporal
  resolutions (original / downsampled / upsampled) whose outputs are fused
  by a learned per-channel gate, and every stage aggregates its blocks
  iteratively (stage input joins the stage root) and hierarchically
  (an inner node merges the first block pair in 4-block stages).

Feature maps are (batch, channels, time); one frame of the final stage
summarizes 2187 input samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import tensor as T
from .nn import BatchNorm1d, Conv1d, ConvTranspose1d, Linear, Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Topology description; defaults give the full-scale architecture."""

    mode: str = "rawnext"
    frontend_channels: int = 128
    stage_widths: tuple[int, ...] = (256, 256, 512, 512)
    stage_blocks: tuple[int, ...] = (2, 4, 4, 2)
    cardinality_original: int = 16
    cardinality_low: int = 8
    cardinality_high: int = 8
    resample_factor: int = 3
    gate_hidden_div: int = 8
    gate_hidden_min: int = 16
    asp_hidden: int = 128
    embedding_dim: int = 512

    @property
    def cardinality_total(self) -> int:
        return self.cardinality_original + self.cardinality_low + self.cardinality_high

    def validate(self) -> None:
        if self.mode not in ("baseline", "rawnext"):
            raise ValueError(f"mode must be 'baseline' or 'rawnext', got {self.mode!r}")
        if self.cardinality_total != 32:
            raise ValueError(
                f"total cardinality must be 32, got {self.cardinality_total}"
            )
        if len(self.stage_widths) != len(self.stage_blocks):
            raise ValueError("stage_widths and stage_blocks must have equal length")
        for w in self.stage_widths:
            if w % 32 != 0:
                raise ValueError(f"stage width {w} not divisible by 32")
            for g in (self.cardinality_original, self.cardinality_low, self.cardinality_high):
                if w % g != 0:
                    raise ValueError(f"stage width {w} not divisible by branch groups {g}")
        for n in self.stage_blocks:
            if n not in (1, 2, 4):
                raise ValueError(f"stages support 1, 2, or 4 blocks, got {n}")
        if self.resample_factor != 3:
            raise ValueError("resample factor is fixed at 3 by the pooling topology")

    def gate_hidden(self, width: int) -> int:
        return max(width // self.gate_hidden_div, self.gate_hidden_min)


class GateModule(Module):
    """Per-channel soft selection over the three resolution branches.

    Branch features are summarized by their time means, pushed through a
    shared two-layer map, and normalized per channel across the three
    branches; the output mixes the branches under that attention.
    """

    def __init__(self, width: int, hidden: int, *, rng, dtype):
        super().__init__()
        self.lin_hidden = Linear(width, hidden, rng=rng, dtype=dtype)
        self.lin_out = Linear(hidden, width, rng=rng, dtype=dtype)
        # start from the uniform gate: all branches weighted 1/3
        self.lin_out.weight.data[...] = 0

    def attention(self, fl: Tensor, fo: Tensor, fh: Tensor) -> Tensor:
        if fl.shape != fo.shape or fo.shape != fh.shape:
            raise ValueError(
                f"gate branches must share shape, got {fl.shape}, {fo.shape}, {fh.shape}"
            )
        b, c, _ = fo.shape
        rows = [T.reshape(T.mean(f, axis=2), (b, 1, c)) for f in (fl, fo, fh)]
        h = T.concat(rows, axis=1)                       # (B, 3, C)
        flat = T.reshape(h, (b * 3, c))
        w = self.lin_out(T.relu(self.lin_hidden(flat)))
        logits = T.reshape(w, (b, 3, c))
        return T.softmax(logits, axis=1)                 # per-channel over branches

    def forward(self, fl: Tensor, fo: Tensor, fh: Tensor, tap_sink=None):
        a = self.attention(fl, fo, fh)
        b, _, c = a.shape
        terms = []
        for row, f in enumerate((fl, fo, fh)):
            a_row = T.reshape(T.slice_axis(a, 1, row, row + 1), (b, c, 1))
            terms.append(T.mul(f, a_row))
        mixed = T.add(T.add(terms[0], terms[1]), terms[2])
        if tap_sink is not None:
            tap_sink.append(
                BlockTap(
                    low=terms[0].data, original=terms[1].data, high=terms[2].data,
                    mixed=mixed.data, attention=a.data,
                )
            )
        return mixed, a


@dataclass
class BlockTap:
    """Gated branch activations recorded from one block in eval mode."""

    low: np.ndarray
    original: np.ndarray
    high: np.ndarray
    mixed: np.ndarray
    attention: np.ndarray


def _pad_time_to_multiple(x: Tensor, multiple: int) -> tuple[Tensor, int]:
    """Left-pad along time by edge replication up to the next multiple."""
    t = x.shape[2]
    pad = (-t) % multiple
    if pad == 0:
        return x, 0
    edge = T.slice_axis(x, 2, 0, 1)
    return T.concat([edge] * pad + [x], axis=2), pad


class RawNextBlock(Module):
    """Residual block with original-, low-, and high-resolution branches."""

    def __init__(self, in_ch: int, width: int, cfg: ModelConfig, *, rng, dtype):
        super().__init__()
        r = cfg.resample_factor
        self.reduce = Conv1d(in_ch, width, 1, bias=False, rng=rng, dtype=dtype)
        self.reduce_bn = BatchNorm1d(width, dtype=dtype)
        self.conv_orig = Conv1d(width, width, 3, padding=1,
                                groups=cfg.cardinality_original, rng=rng, dtype=dtype)
        self.low_conv = Conv1d(width, width, 3, padding=1,
                               groups=cfg.cardinality_low, rng=rng, dtype=dtype)
        self.low_up = ConvTranspose1d(width, width, r, stride=r,
                                      groups=cfg.cardinality_low, rng=rng, dtype=dtype)
        self.high_up = ConvTranspose1d(width, width, r, stride=r,
                                       groups=cfg.cardinality_high, rng=rng, dtype=dtype)
        self.high_conv = Conv1d(width, width, 3, padding=1,
                                groups=cfg.cardinality_high, rng=rng, dtype=dtype)
        self.gate = GateModule(width, cfg.gate_hidden(width), rng=rng, dtype=dtype)
        if in_ch != width:
            self.proj = Conv1d(in_ch, width, 1, bias=False, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm1d(width, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None
        self.out_bn = BatchNorm1d(width, dtype=dtype)
        self._factor = r

    def forward(self, x: Tensor, tap_sink=None) -> Tensor:
        r = self._factor
        u = T.relu(self.reduce_bn(self.reduce(x)))
        t = u.shape[2]

        fo = self.conv_orig(u)

        padded, pad = _pad_time_to_multiple(u, r)
        fl = self.low_up(self.low_conv(T.avgpool1d(padded, r, r)))
        if pad:
            fl = T.slice_axis(fl, 2, pad, pad + t)

        fh = T.avgpool1d(self.high_conv(self.high_up(u)), r, r)

        mixed, _ = self.gate(fl, fo, fh, tap_sink=tap_sink)
        res = x if self.proj is None else self.proj_bn(self.proj(x))
        return T.relu(self.out_bn(T.add(mixed, res)))


class BaselineBlock(Module):
    """Plain grouped-convolution residual block (cardinality 32)."""

    def __init__(self, in_ch: int, width: int, cfg: ModelConfig, *, rng, dtype):
        super().__init__()
        self.reduce = Conv1d(in_ch, width, 1, bias=False, rng=rng, dtype=dtype)
        self.reduce_bn = BatchNorm1d(width, dtype=dtype)
        self.conv = Conv1d(width, width, 3, padding=1,
                           groups=cfg.cardinality_total, rng=rng, dtype=dtype)
        if in_ch != width:
            self.proj = Conv1d(in_ch, width, 1, bias=False, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm1d(width, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None
        self.out_bn = BatchNorm1d(width, dtype=dtype)

    def forward(self, x: Tensor, tap_sink=None) -> Tensor:
        u = T.relu(self.reduce_bn(self.reduce(x)))
        f = self.conv(u)
        res = x if self.proj is None else self.proj_bn(self.proj(x))
        return T.relu(self.out_bn(T.add(f, res)))


class AggregationNode(Module):
    """Merge feature maps: concat on channels, 1x1 conv, BN+ReLU, opt. pool."""

    def __init__(self, in_ch: int, out_ch: int, pool: bool, *, rng, dtype):
        super().__init__()
        self.conv = Conv1d(in_ch, out_ch, 1, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm1d(out_ch, dtype=dtype)
        self.pool = pool

    def forward(self, inputs: list[Tensor]) -> Tensor:
        t = inputs[0].shape[2]
        for f in inputs[1:]:
            if f.shape[2] != t:
                raise ValueError(
                    f"aggregation inputs must share time length, got "
                    f"{[f.shape[2] for f in inputs]}"
                )
        out = T.relu(self.bn(self.conv(T.concat(inputs, axis=1))))
        if self.pool:
            out = T.maxpool1d(out, 3, 3)
        return out


class Stage(Module):
    """One stage: blocks plus (in rawnext mode) its aggregation tree."""

    def __init__(self, in_ch: int, width: int, n_blocks: int, cfg: ModelConfig,
                 *, rng, dtype):
        super().__init__()
        self.mode = cfg.mode
        self.n_blocks = n_blocks
        block_cls = RawNextBlock if cfg.mode == "rawnext" else BaselineBlock
        chans = [in_ch] + [width] * (n_blocks - 1)
        self.block = [block_cls(c, width, cfg, rng=rng, dtype=dtype) for c in chans]
        if cfg.mode == "rawnext":
            if n_blocks == 4:
                self.node_inner = AggregationNode(2 * width, width, pool=False,
                                                  rng=rng, dtype=dtype)
                root_in = in_ch + 3 * width
            else:
                self.node_inner = None
                root_in = in_ch + n_blocks * width
            self.node_root = AggregationNode(root_in, width, pool=True,
                                             rng=rng, dtype=dtype)
        else:
            self.node_inner = None
            self.node_root = None

    def forward(self, x: Tensor, tap_sink=None) -> Tensor:
        if self.mode == "baseline":
            out = x
            for blk in self.block:
                out = blk(out, tap_sink=tap_sink)
            return T.maxpool1d(out, 3, 3)
        if self.n_blocks == 4:
            b1 = self.block[0](x, tap_sink=tap_sink)
            b2 = self.block[1](b1, tap_sink=tap_sink)
            n1 = self.node_inner([b1, b2])
            b3 = self.block[2](n1, tap_sink=tap_sink)
            b4 = self.block[3](b3, tap_sink=tap_sink)
            return self.node_root([x, n1, b3, b4])
        outs = [x]
        for blk in self.block:
            outs.append(blk(outs[-1], tap_sink=tap_sink))
        return self.node_root(outs)


class Frontend(Module):
    """Strided conv plus two conv/max-pool pairs: 27x temporal reduction."""

    def __init__(self, out_ch: int, *, rng, dtype):
        super().__init__()
        self.conv0 = Conv1d(1, out_ch, 3, stride=3, bias=False, rng=rng, dtype=dtype)
        self.bn0 = BatchNorm1d(out_ch, dtype=dtype)
        self.conv1 = Conv1d(out_ch, out_ch, 3, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm1d(out_ch, dtype=dtype)
        self.conv2 = Conv1d(out_ch, out_ch, 3, padding=1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm1d(out_ch, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.bn0(self.conv0(x)))
        x = T.maxpool1d(T.relu(self.bn1(self.conv1(x))), 3, 3)
        x = T.maxpool1d(T.relu(self.bn2(self.conv2(x))), 3, 3)
        return x


class AttentiveStatsPool(Module):
    """Attention-weighted mean and standard deviation over time frames."""

    def __init__(self, ch: int, hidden: int, *, rng, dtype):
        super().__init__()
        self.lin = Linear(ch, hidden, rng=rng, dtype=dtype)
        self.v = Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(hidden), (1, hidden)).astype(dtype),
            requires_grad=True,
        )

    def forward(self, x: Tensor) -> Tensor:
        b, c, t = x.shape
        frames = T.transpose(x, (0, 2, 1))                   # (B, T, C)
        scores = T.linear(T.tanh(self.lin(frames)), self.v)  # (B, T, 1)
        alpha = T.softmax(T.reshape(scores, (b, t)), axis=1)
        alpha = T.reshape(alpha, (b, 1, t))
        mu = T.tsum(T.mul(x, alpha), axis=2)                 # (B, C)
        ex2 = T.tsum(T.mul(T.mul(x, x), alpha), axis=2)
        var = T.clamp_min(T.sub(ex2, T.mul(mu, mu)), 1e-12)
        return T.concat([mu, T.sqrt(var)], axis=1)           # (B, 2C)


class SpeakerModel(Module):
    """Front-end, four stages, attentive pooling, and the embedding head."""

    def __init__(self, cfg: ModelConfig, *, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x52584E54]))
        self.frontend = Frontend(cfg.frontend_channels, rng=rng, dtype=dtype)
        in_ch = cfg.frontend_channels
        stages = []
        for width, n_blocks in zip(cfg.stage_widths, cfg.stage_blocks):
            stages.append(Stage(in_ch, width, n_blocks, cfg, rng=rng, dtype=dtype))
            in_ch = width
        self.stage = stages
        self.asp = AttentiveStatsPool(in_ch, cfg.asp_hidden, rng=rng, dtype=dtype)
        self.fc = Linear(2 * in_ch, cfg.embedding_dim, rng=rng, dtype=dtype)
        self.dtype = dtype
        self._min_len = None
        for name, p in self.named_parameters():
            p.name = name

    # -- shape algebra -----------------------------------------------------

    def time_chain(self, n_samples: int) -> list[tuple[str, int]]:
        """Declared time lengths at every pipeline landmark, or raise."""

        def conv(t, k, s, p):
            out = (t + 2 * p - k) // s + 1
            if out <= 0:
                raise ValueError(f"length {t} collapses under conv k={k} s={s}")
            return out

        def pool(t):
            if t < 3:
                raise ValueError(f"length {t} shorter than pooling window 3")
            return (t - 3) // 3 + 1

        chain = []
        t = conv(n_samples, 3, 3, 0)
        t = pool(conv(t, 3, 1, 1))
        t = pool(conv(t, 3, 1, 1))
        chain.append(("frontend", t))
        for i in range(len(self.cfg.stage_widths)):
            t = pool(t)  # blocks preserve time; each stage ends in maxpool(3,3)
            chain.append((f"stage{i}", t))
        return chain

    def minimum_input_length(self) -> int:
        if self._min_len is None:
            lo, hi = 1, 3 ** 8
            while lo < hi:
                mid = (lo + hi) // 2
                try:
                    self.time_chain(mid)
                except ValueError:
                    lo = mid + 1
                else:
                    hi = mid
            self._min_len = lo
        return self._min_len

    # -- forward paths -------------------------------------------------------

    def _check_input(self, wave: Tensor) -> Tensor:
        if wave.ndim == 1:
            wave = T.reshape(wave, (1, 1, wave.shape[0]))
        elif wave.ndim == 2:
            wave = T.reshape(wave, (wave.shape[0], 1, wave.shape[1]))
        n = wave.shape[2]
        minimum = self.minimum_input_length()
        if n < minimum:
            raise ValueError(
                f"input length {n} below minimum of {minimum} samples"
            )
        return wave

    def forward(self, wave: Tensor, tap_sink=None, trace=None) -> Tensor:
        x = self.frontend(self._check_input(wave))
        if trace is not None:
            trace.append(("frontend", x.shape))
        for i, stage in enumerate(self.stage):
            x = stage(x, tap_sink=tap_sink)
            if trace is not None:
                trace.append((f"stage{i}", x.shape))
        pooled = self.asp(x)
        if trace is not None:
            trace.append(("asp", pooled.shape))
        emb = self.fc(pooled)
        if trace is not None:
            trace.append(("embedding", emb.shape))
        return emb

    def embed(self, wave: np.ndarray) -> np.ndarray:
        """Inference embedding for one or a batch of waveforms."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self.forward(Tensor(np.asarray(wave, dtype=self.dtype)))
        finally:
            self.train(was_training)
        return out.data

    def activation_taps(self, wave: np.ndarray) -> list[BlockTap]:
        """Gated branch tensors from every block, for activation analysis."""
        if self.cfg.mode != "rawnext":
            raise ValueError("no EDSP branches to tap in baseline mode")
        if self.training:
            raise ValueError("activation taps require eval mode")
        taps: list[BlockTap] = []
        with T.no_grad():
            self.forward(Tensor(np.asarray(wave, dtype=self.dtype)), tap_sink=taps)
        return taps

    def branch_receptive_fields(self) -> tuple[int, int, int]:
        """Input-grid span of one branch-conv kernel: (original, low, high).

        A branch conv with kernel k operating on a grid whose samples are
        ``spacing`` input frames apart covers k * spacing input frames.
        """
        r = Fraction(self.cfg.resample_factor)
        out = []
        for spacing in (Fraction(1), r, 1 / r):
            span = 3 * spacing
            if span.denominator != 1:
                raise AssertionError("receptive field is not an integer frame count")
            out.append(int(span))
        original, low, high = out
        return original, low, high

    def block_count(self) -> int:
        return sum(self.cfg.stage_blocks)
