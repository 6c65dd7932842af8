"""Context-sensing channel attention over frame feature maps.

Per-frame channel weights are produced by a squeeze-excitation bottleneck
whose *hidden* layer is gated multiplicatively by a sequence-level context
vector, so each frame keeps its individuality while sequence-irrelevant
responses are suppressed.  The module also provides the three comparison
variants: a plain per-frame SE module, a video-level SE module shared by
all frames, and the output-layer-modulated combination of the two.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    channel_scale,
    hadamard,
    linear_init,
    matvec,
    reduce_mean,
    sigmoid_map,
    spatial_mean,
    temporal_mean,
)


@dataclass
class CscaParams:
    """Weights of one channel-attention block.

    w_l projects a frame descriptor into the hidden layer, w_g projects the
    sequence descriptor into the gate, and w_1 maps the gated hidden vector
    back to per-channel weights.  The frame and sequence branches do not
    share parameters.  r1 is the bottleneck reduction ratio and must divide
    the channel count.
    """

    w_l: Tensor
    w_g: Tensor
    w_1: Tensor
    r1: int

    def __post_init__(self):
        if self.w_l.shape != self.w_g.shape:
            raise ShapeError(
                f"frame and sequence branches must match: {self.w_l.shape} vs {self.w_g.shape}"
            )
        hidden, channels = self.w_l.shape
        if self.w_1.shape != (channels, hidden):
            raise ShapeError(
                f"output layer must be {(channels, hidden)}, got {self.w_1.shape}"
            )
        if channels % self.r1 != 0 or channels // self.r1 != hidden:
            raise ShapeError(
                f"reduction ratio {self.r1} does not map {channels} channels to {hidden}"
            )

    @property
    def channels(self) -> int:
        return self.w_l.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_l.shape[0]

    @classmethod
    def init(cls, channels: int, r1: int, rng: np.random.Generator) -> "CscaParams":
        if channels % r1 != 0:
            raise ShapeError(f"r1={r1} must divide the channel count {channels}")
        hidden = channels // r1
        return cls(
            w_l=linear_init((hidden, channels), channels, rng),
            w_g=linear_init((hidden, channels), channels, rng),
            w_1=linear_init((channels, hidden), hidden, rng),
            r1=r1,
        )


def squeeze_frame(frame_map: Tensor) -> Tensor:
    """Spatially average a (C, H, W) map into a per-channel descriptor."""
    return spatial_mean(frame_map)


def sequence_gate(zs: list[Tensor], params: CscaParams) -> Tensor:
    """Gate vector from the temporally averaged frame descriptors.

    Values lie in (0, 1) and modulate the hidden layer of every frame's
    excitation path.
    """
    z_bar = reduce_mean(zs, axis="temporal")
    return sigmoid_map(matvec(params.w_g, z_bar))


def attend_frame(z_t: Tensor, z_g: Tensor, params: CscaParams) -> Tensor:
    """Channel weights for one frame given the sequence gate."""
    z_l = matvec(params.w_l, z_t)
    gated = hadamard(z_g, z_l)
    return sigmoid_map(matvec(params.w_1, gated))


def refine(frame_map: Tensor, weights: Tensor) -> Tensor:
    """Apply channel weights to a frame map by channel-wise multiplication."""
    return channel_scale(frame_map, weights)


def csca_forward(
    seq: list[Tensor], params: CscaParams
) -> tuple[list[Tensor], list[Tensor]]:
    """Refine a frame-map sequence with context-sensing channel attention.

    Returns the refined maps and the per-frame channel weights.
    """
    zs = [squeeze_frame(f) for f in seq]
    z_g = sequence_gate(zs, params)
    weights = [attend_frame(z, z_g, params) for z in zs]
    refined = [refine(f, c) for f, c in zip(seq, weights)]
    return refined, weights


def se_frame_weights(seq: list[Tensor], params: CscaParams) -> list[Tensor]:
    """Per-frame SE channel weights with no sequence branch."""
    return [
        sigmoid_map(matvec(params.w_1, matvec(params.w_l, squeeze_frame(f))))
        for f in seq
    ]


def se_video_weights(seq: list[Tensor], params: CscaParams) -> Tensor:
    """One shared channel-weight vector from the temporally averaged maps."""
    mean_map = temporal_mean(seq)
    z = squeeze_frame(mean_map)
    return sigmoid_map(matvec(params.w_1, matvec(params.w_l, z)))


def csca_v_weights(
    seq: list[Tensor], params_frame: CscaParams, params_video: CscaParams
) -> list[Tensor]:
    """Frame-level SE weights modulated by video-level SE weights.

    Modulation happens on the output layer (the channel weights themselves),
    in contrast to csca_forward which modulates the hidden layer.
    """
    frame_w = se_frame_weights(seq, params_frame)
    video_w = se_video_weights(seq, params_video)
    return [hadamard(c, video_w) for c in frame_w]
