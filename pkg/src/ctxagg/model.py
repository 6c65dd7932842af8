"""Video feature head: channel attention + pooling + weighted aggregation.

Assembles the attention and aggregation blocks into one trainable head,
computes the cross-entropy + batch-hard triplet objective on video
features, and runs seeded SGD with momentum and weight decay.  Also owns
the CSAH checkpoint format and the flat key-value run-config files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cfa import (
    CfaParams,
    QanParams,
    aggregate,
    cfa_forward,
    cfa_v_weights,
    qan_weights,
    quality_scores,
    similarity_matrix,
)
from .csca import (
    CscaParams,
    csca_forward,
    csca_v_weights,
    refine,
    se_frame_weights,
    se_video_weights,
    squeeze_frame,
)
from .synthdata import ConfigError, SequenceBatch, SyntheticDataset
from .tensor import (
    ContractError,
    ParamStore,
    ShapeError,
    Tape,
    Tensor,
    add,
    cadd,
    cosine,
    cross_entropy_logits,
    linear_init,
    matvec,
    relu,
    scalar,
    stack,
    sub,
    tape_backward,
    temporal_mean,
    tmean,
    vmax,
    vmin,
)


ATTENTION_KINDS = ("none", "csca", "se_frame", "se_video", "csca_v")
WEIGHTING_KINDS = ("mean", "cfa", "cfa_v", "qan")

# ablation table rows: method name -> (attention, weighting)
METHODS = {
    "baseline": ("none", "mean"),
    "csca": ("csca", "mean"),
    "cfa": ("none", "cfa"),
    "csa_net": ("csca", "cfa"),
    "se_frame": ("se_frame", "mean"),
    "se_video": ("se_video", "mean"),
    "csca_v": ("csca_v", "mean"),
    "cfa_v": ("none", "cfa_v"),
    "qan": ("none", "qan"),
}


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class HyperParams:
    """Architecture and optimization settings.

    Field names double as the flat keys of run-config files.  C and d are
    desk-scale by default; the reduction ratios, sequence length, margin and
    optimizer settings keep their standard values (r1=4, r2=2, T=8, margin
    0.25, SGD momentum 0.9, weight decay 5e-4, lr 0.01 decayed x0.1 on a
    step schedule).  p x k is the identities-times-sequences batch layout.
    """

    C: int = 64
    d: int = 16
    r1: int = 4
    r2: int = 2
    T: int = 8
    margin: float = 0.25
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 200
    lr_decay_every: int = 60
    lr_decay_factor: float = 0.1
    p: int = 4
    k: int = 4

    def __post_init__(self):
        if self.lr_decay_every < 1:
            raise ConfigError("lr_decay_every must be at least 1")
        if self.C % self.r1 != 0:
            raise ConfigError(f"r1={self.r1} must divide C={self.C}")
        if self.d % self.r2 != 0:
            raise ConfigError(f"r2={self.r2} must divide d={self.d}")


@dataclass
class HeadParams:
    """All learnable weights of one head plus its variant configuration."""

    csca: CscaParams
    csca_video: CscaParams
    cfa: CfaParams
    qan: QanParams
    fc: Tensor  # (d, C)
    classifier: Tensor  # (num_classes, d)
    hyper: HyperParams
    attention: str = "csca"
    weighting: str = "cfa"

    def __post_init__(self):
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.attention!r}")
        if self.weighting not in WEIGHTING_KINDS:
            raise ConfigError(f"unknown weighting kind {self.weighting!r}")

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[0]


def init_head(
    hyper: HyperParams,
    num_classes: int,
    seed: int,
    attention: str = "csca",
    weighting: str = "cfa",
) -> HeadParams:
    """Seeded initialization of every parameter group.

    All groups are always allocated so checkpoints have a uniform schema;
    groups the variant does not touch simply receive zero gradients.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return HeadParams(
        csca=CscaParams.init(hyper.C, hyper.r1, rng),
        csca_video=CscaParams.init(hyper.C, hyper.r1, rng),
        cfa=CfaParams.init(hyper.d, hyper.r2, rng),
        qan=QanParams.init(hyper.d, rng),
        fc=linear_init((hyper.d, hyper.C), hyper.C, rng),
        classifier=linear_init((num_classes, hyper.d), hyper.d, rng),
        hyper=hyper,
        attention=attention,
        weighting=weighting,
    )


def method_head(hyper: HyperParams, num_classes: int, seed: int, method: str) -> HeadParams:
    """Build a head configured for one named ablation method."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    attention, weighting = METHODS[method]
    return init_head(hyper, num_classes, seed, attention=attention, weighting=weighting)


def param_store(head: HeadParams) -> ParamStore:
    """Canonically named view of every learnable tensor."""
    store = ParamStore()
    store.add("csca.w_l", head.csca.w_l)
    store.add("csca.w_g", head.csca.w_g)
    store.add("csca.w_1", head.csca.w_1)
    store.add("csca_video.w_l", head.csca_video.w_l)
    store.add("csca_video.w_g", head.csca_video.w_g)
    store.add("csca_video.w_1", head.csca_video.w_1)
    store.add("fc", head.fc)
    store.add("cfa.w_2", head.cfa.w_2)
    store.add("qan.v", head.qan.v)
    store.add("classifier", head.classifier)
    return store


def frame_features(refined: list[Tensor], fc: Tensor) -> list[Tensor]:
    """Spatially pool each refined map and project it to a frame feature."""
    return [matvec(fc, squeeze_frame(m)) for m in refined]


@dataclass
class Diagnostics:
    """Inspection values from one forward pass."""

    channel_weights: list[Tensor] | None
    s: Tensor | None
    w: Tensor | None


def video_feature(seq: list[Tensor], head: HeadParams) -> tuple[Tensor, Diagnostics]:
    """Full path from frame maps to one video feature.

    Applies the configured channel attention, pools and projects each frame,
    then aggregates with the configured weighting.  Contrastive weighting
    falls back to the single frame feature when the sequence has one frame.
    """
    if len(seq) == 0:
        raise ContractError("video_feature: empty sequence")

    if head.attention == "none":
        refined, weights = list(seq), None
    elif head.attention == "csca":
        refined, weights = csca_forward(seq, head.csca)
    elif head.attention == "se_frame":
        weights = se_frame_weights(seq, head.csca)
        refined = [refine(f, c) for f, c in zip(seq, weights)]
    elif head.attention == "se_video":
        shared = se_video_weights(seq, head.csca)
        weights = [shared for _ in seq]
        refined = [refine(f, shared) for f in seq]
    else:  # csca_v
        weights = csca_v_weights(seq, head.csca, head.csca_video)
        refined = [refine(f, c) for f, c in zip(seq, weights)]

    frames = frame_features(refined, head.fc)

    s = w = None
    if head.weighting == "mean":
        h = temporal_mean(frames)
    elif head.weighting == "cfa":
        if len(frames) == 1:
            h = frames[0]
        else:
            h, qs = cfa_forward(frames, head.cfa)
            s, w = qs.s, qs.w
    elif head.weighting == "cfa_v":
        s = quality_scores(similarity_matrix(frames, head.cfa))
        w = cfa_v_weights(s)
        h = aggregate(frames, w)
    else:  # qan
        w = qan_weights(frames, head.qan)
        h = aggregate(frames, w)
    return h, Diagnostics(channel_weights=weights, s=s, w=w)


@dataclass
class Batch:
    """P x K training batch: frame-map sequences with class labels."""

    sequences: list[list[Tensor]]
    labels: list[int]


def total_loss(batch: Batch, head: HeadParams) -> Tensor:
    """Cross-entropy on classifier logits plus batch-hard triplet loss.

    The triplet term uses cosine distance on video features with the
    configured margin; each anchor takes its hardest positive and hardest
    negative in the batch.
    """
    if len(batch.sequences) != len(batch.labels):
        raise ShapeError(
            f"{len(batch.sequences)} sequences but {len(batch.labels)} labels"
        )
    if len(set(batch.labels)) < 2:
        raise ContractError("triplet loss needs at least 2 identities per batch")
    hs = [video_feature(seq, head)[0] for seq in batch.sequences]

    ce = tmean(
        stack(
            [
                cross_entropy_logits(matvec(head.classifier, h), y)
                for h, y in zip(hs, batch.labels)
            ]
        )
    )

    n = len(hs)
    dist: dict[tuple[int, int], Tensor] = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist[(i, j)] = sub(scalar(1.0), cosine(hs[i], hs[j]))
    labels = batch.labels
    hinges = []
    for a in range(n):
        pos = [dist[tuple(sorted((a, j)))] for j in range(n) if j != a and labels[j] == labels[a]]
        neg = [dist[tuple(sorted((a, j)))] for j in range(n) if labels[j] != labels[a]]
        if not pos or not neg:
            continue
        hardest = sub(vmax(stack(pos)), vmin(stack(neg)))
        hinges.append(relu(cadd(hardest, head.hyper.margin)))
    if not hinges:
        raise ContractError("no anchor has both a positive and a negative")
    return add(ce, tmean(stack(hinges)))


def sample_frames(seq_len: int, t: int, mode: str, rng=None) -> list[int]:
    """Frame index selection for one tracklet.

    Training splits the sequence into t/2 equal segments and draws two
    distinct frames per segment (sorted); sequences shorter than t are
    filled cyclically.  Testing keeps every frame below 128 and otherwise
    takes two deterministic mid-half picks from each of 64 segments.
    """
    if seq_len < 1:
        raise ContractError("sample_frames: sequence must have at least 1 frame")
    if mode == "train":
        if t % 2 != 0:
            raise ConfigError(f"training sample length T={t} must be even")
        if seq_len < t:
            return sorted(i % seq_len for i in range(t))
        segments = t // 2
        bounds = [seq_len * i // segments for i in range(segments + 1)]
        out: list[int] = []
        for a, b in zip(bounds, bounds[1:]):
            pick = rng.choice(np.arange(a, b), size=2, replace=False)
            out.extend(sorted(int(x) for x in pick))
        return out
    if mode == "test":
        if seq_len < 128:
            return list(range(seq_len))
        segments = 64
        bounds = [seq_len * i // segments for i in range(segments + 1)]
        out = []
        for a, b in zip(bounds, bounds[1:]):
            size = b - a
            out.extend([a + size // 4, a + (3 * size) // 4])
        return out
    raise ContractError(f"unknown sampling mode {mode!r}")


def sequence_tensors(seq: SequenceBatch, idxs: list[int] | None = None) -> list[Tensor]:
    """Frame maps of one stored sequence as float64 tensors."""
    if idxs is None:
        idxs = range(seq.num_frames)
    return [Tensor(seq.maps[i].astype(np.float64)) for i in idxs]


def train(
    dataset: SyntheticDataset | list[SequenceBatch],
    head: HeadParams,
    seed: int,
) -> tuple[HeadParams, list[float]]:
    """SGD with momentum, weight decay and step lr decay; seeded end to end.

    Returns the trained head and the per-epoch mean loss curve.  Raises
    TrainingDivergedError as soon as the loss stops being finite.
    """
    seqs = dataset.train if isinstance(dataset, SyntheticDataset) else list(dataset)
    if not seqs:
        raise ContractError("train: empty dataset")
    hyper = head.hyper
    label_of = {ident: i for i, ident in enumerate(sorted({s.identity for s in seqs}))}
    if head.num_classes != len(label_of):
        raise ConfigError(
            f"classifier has {head.num_classes} classes but the dataset "
            f"has {len(label_of)} train identities"
        )
    by_label: dict[int, list[SequenceBatch]] = {}
    for s in seqs:
        by_label.setdefault(label_of[s.identity], []).append(s)
    all_labels = sorted(by_label)
    if len(all_labels) < 2:
        raise ContractError("training needs at least 2 identities")

    batch_rng, frame_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)
    )
    params = param_store(head)
    velocity = {name: np.zeros_like(p.data) for name, p in params.items()}
    steps = max(1, len(seqs) // (hyper.p * hyper.k))
    p_eff = min(hyper.p, len(all_labels))

    curve: list[float] = []
    for epoch in range(hyper.epochs):
        lr = hyper.lr * hyper.lr_decay_factor ** (epoch // hyper.lr_decay_every)
        losses = []
        for _ in range(steps):
            chosen = batch_rng.choice(all_labels, size=p_eff, replace=False)
            batch_seqs, batch_labels = [], []
            for label in chosen:
                pool = by_label[int(label)]
                picks = batch_rng.choice(
                    len(pool), size=hyper.k, replace=len(pool) < hyper.k
                )
                for si in picks:
                    s = pool[int(si)]
                    idxs = sample_frames(s.num_frames, hyper.T, "train", frame_rng)
                    batch_seqs.append(sequence_tensors(s, idxs))
                    batch_labels.append(int(label))
            with Tape() as tape:
                params.watch(tape)
                loss = total_loss(Batch(batch_seqs, batch_labels), head)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDivergedError(
                    f"loss became {val} at epoch {epoch}; aborting"
                )
            params.set_grads(tape_backward(tape, loss))
            for name, p in params.items():
                g = params.grads[name] + hyper.weight_decay * p.data
                v = velocity[name]
                v *= hyper.momentum
                v += g
                p.data -= lr * v
            losses.append(val)
        curve.append(float(np.mean(losses)))
    return head, curve


# ---------------------------------------------------------------------------
# CSAH checkpoints (binary, little-endian) and flat run-config files
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CSAH"
_CKPT_VERSION = 1


def save_checkpoint(path, head: HeadParams) -> None:
    """Write every named parameter block of a head, bit-exactly."""
    params = param_store(head)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        for name, p in params.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}I", *p.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint_blocks(path) -> dict[str, np.ndarray]:
    """Read the named parameter blocks of a CSAH file."""
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ConfigError(f"{path} is not a CSAH checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _CKPT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    offset = 8
    blocks: dict[str, np.ndarray] = {}
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        blocks[name] = data.reshape(dims).astype(np.float64)
    return blocks


def load_checkpoint(
    path,
    hyper: HyperParams,
    attention: str = "csca",
    weighting: str = "cfa",
) -> HeadParams:
    """Rebuild a head from a checkpoint; class count comes from the file."""
    blocks = load_checkpoint_blocks(path)
    return HeadParams(
        csca=CscaParams(
            w_l=Tensor(blocks["csca.w_l"]),
            w_g=Tensor(blocks["csca.w_g"]),
            w_1=Tensor(blocks["csca.w_1"]),
            r1=hyper.r1,
        ),
        csca_video=CscaParams(
            w_l=Tensor(blocks["csca_video.w_l"]),
            w_g=Tensor(blocks["csca_video.w_g"]),
            w_1=Tensor(blocks["csca_video.w_1"]),
            r1=hyper.r1,
        ),
        cfa=CfaParams(w_2=Tensor(blocks["cfa.w_2"]), r2=hyper.r2),
        qan=QanParams(v=Tensor(blocks["qan.v"])),
        fc=Tensor(blocks["fc"]),
        classifier=Tensor(blocks["classifier"]),
        hyper=hyper,
        attention=attention,
        weighting=weighting,
    )


def save_run_config(path, values: dict) -> None:
    """Flat ``key = value`` file; keys match the HyperParams field names."""
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def load_run_config(path) -> dict:
    """Parse a flat key = value file into typed values."""
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = _parse_value(val)
    return values
