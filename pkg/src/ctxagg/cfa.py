"""Contrastive temporal aggregation of frame features.

Each frame gets a consistency score: the mean cosine similarity between its
projected feature and every frame of the sequence.  Scores turn into
aggregation weights contrastively, w_t = s_t * (2 - mean of the other
scores), which is exactly the weighted-pooling form of refining every frame
feature with the quality-scaled features of the other frames and then
averaging.  ``propagate`` implements that refinement route independently so
the equivalence can be checked numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ContractError,
    DegenerateInputError,
    ShapeError,
    Tensor,
    add,
    cmul,
    cosine,
    dot,
    hadamard,
    index,
    linear_init,
    matvec,
    row_mean,
    scalar,
    sigmoid_map,
    smul,
    stack,
    sub,
    temporal_mean,
    tsum,
)


@dataclass
class CfaParams:
    """Shared projection for the similarity computation.

    The two parallel projection layers share this single matrix; r2 is the
    reduction ratio and must divide the frame feature dimension.
    """

    w_2: Tensor
    r2: int

    def __post_init__(self):
        proj, d = self.w_2.shape
        if d % self.r2 != 0 or d // self.r2 != proj:
            raise ShapeError(
                f"reduction ratio {self.r2} does not map dimension {d} to {proj}"
            )

    @property
    def dim(self) -> int:
        return self.w_2.shape[1]

    @classmethod
    def init(cls, dim: int, r2: int, rng: np.random.Generator) -> "CfaParams":
        if dim % r2 != 0:
            raise ShapeError(f"r2={r2} must divide the feature dimension {dim}")
        return cls(w_2=linear_init((dim // r2, dim), dim, rng), r2=r2)


@dataclass
class QanParams:
    """Single projection-to-scalar weight head used by the QAN comparison."""

    v: Tensor

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "QanParams":
        return cls(v=linear_init((dim,), dim, rng))


@dataclass
class QualityScores:
    """Per-frame consistency scores s and derived contrastive weights w."""

    s: Tensor
    w: Tensor


def similarity_matrix(frames: list[Tensor], params: CfaParams) -> Tensor:
    """Pairwise cosine similarities of the projected frame features.

    Symmetric with an exact unit diagonal (the self-similarity is the
    constant 1, which also has zero derivative).  A frame whose projection
    has ~zero norm raises DegenerateInputError naming the frame index.
    """
    if len(frames) == 0:
        raise ContractError("similarity_matrix: empty sequence")
    thetas = [matvec(params.w_2, f) for f in frames]
    for i, th in enumerate(thetas):
        if np.linalg.norm(th.data) < 1e-12:
            raise DegenerateInputError(f"projected feature of frame {i} has ~zero norm")
    t = len(frames)
    one = scalar(1.0)
    rows: list[list[Tensor]] = [[one for _ in range(t)] for _ in range(t)]
    for i in range(t):
        for j in range(i + 1, t):
            x_ij = cosine(thetas[i], thetas[j])
            rows[i][j] = x_ij
            rows[j][i] = x_ij
    return stack([stack(r) for r in rows])


def quality_scores(x: Tensor) -> Tensor:
    """Row means of a square similarity matrix."""
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"quality_scores expects a square matrix, got {x.shape}")
    return row_mean(x)


def propagate(frames: list[Tensor], s: Tensor) -> list[Tensor]:
    """Refine each frame feature with the quality-scaled other frames.

    f_hat_t = s_t f_t + (1 - s_t) * mean over i != t of s_i f_i.
    Needs at least two frames because the second term averages the others.
    """
    t = len(frames)
    if t < 2:
        raise ContractError("propagate needs at least 2 frames")
    if s.shape != (t,):
        raise ShapeError(f"scores {s.shape} do not match {t} frames")
    s_parts = [index(s, i) for i in range(t)]
    scaled = [smul(s_i, f) for s_i, f in zip(s_parts, frames)]
    out = []
    for i in range(t):
        others = None
        for j in range(t):
            if j == i:
                continue
            others = scaled[j] if others is None else add(others, scaled[j])
        others = cmul(others, 1.0 / (t - 1))
        rest = smul(sub(scalar(1.0), s_parts[i]), others)
        out.append(add(scaled[i], rest))
    return out


def contrastive_weights(s: Tensor) -> Tensor:
    """Closed-form aggregation weights w_t = s_t * (2 - mean of other scores)."""
    t = s.shape[0]
    if t < 2:
        raise ContractError("contrastive_weights needs at least 2 scores")
    total = tsum(s)
    others_mean = cmul(sub(total, s), 1.0 / (t - 1))
    return hadamard(s, sub(scalar(2.0), others_mean))


def aggregate(frames: list[Tensor], w: Tensor) -> Tensor:
    """Weighted temporal average h = (1/T) * sum_t w_t f_t."""
    t = len(frames)
    if t == 0:
        raise ContractError("aggregate: empty sequence")
    if w.shape != (t,):
        raise ShapeError(f"weights {w.shape} do not match {t} frames")
    return temporal_mean([smul(index(w, i), f) for i, f in enumerate(frames)])


def cfa_forward(frames: list[Tensor], params: CfaParams) -> tuple[Tensor, QualityScores]:
    """Score, weight and aggregate a frame-feature sequence."""
    if len(frames) < 2:
        raise ContractError("cfa_forward needs at least 2 frames")
    x = similarity_matrix(frames, params)
    s = quality_scores(x)
    w = contrastive_weights(s)
    return aggregate(frames, w), QualityScores(s=s, w=w)


def cfa_v_weights(s: Tensor) -> Tensor:
    """Consistency scores used directly as frame weights."""
    return s


def qan_weights(frames: list[Tensor], params: QanParams) -> Tensor:
    """Content-only frame weights sigmoid(v . f_t), independent across frames."""
    return stack([sigmoid_map(dot(params.v, f)) for f in frames])
