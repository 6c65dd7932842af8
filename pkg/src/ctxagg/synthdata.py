"""Synthetic corrupted-sequence benchmark in backbone feature space.

Stands in for a CNN backbone plus real tracklets: every identity owns a
fixed soft-sparse channel prototype, a clean frame map broadcasts that
prototype over the spatial grid, and per-frame jitter models pose and
viewpoint variation.  Corrupted frames either mix in another identity's
prototype (interference), zero a contiguous channel block (occlusion), or
add white noise (detection error).  Jitter is applied after corruption, so
even a fully occluded frame keeps a small noise floor and stays usable by
the cosine-based scoring downstream.  Every generator is a pure function
of (config, seed).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


CORRUPTION_KINDS = ("interference", "occlusion", "detection_noise")

_MAGIC = b"CSAF"
_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unsatisfiable generation configuration."""


@dataclass(frozen=True)
class CorruptionSpec:
    """What fraction of frames get corrupted, how, and how badly."""

    kind: str
    rate: float
    severity: float

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"rate must be in [0, 1], got {self.rate}")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError(f"severity must be in [0, 1], got {self.severity}")


@dataclass
class IdentityBank:
    """Unit-norm channel prototypes, pairwise separable by construction."""

    prototypes: np.ndarray  # (num_ids, C) float64, rows unit norm
    seed: int

    @property
    def num_ids(self) -> int:
        return self.prototypes.shape[0]

    @property
    def channels(self) -> int:
        return self.prototypes.shape[1]


@dataclass
class SequenceBatch:
    """One tracklet: frame maps, identity, and per-frame quality labels."""

    maps: np.ndarray  # (T, C, H, W) float32
    identity: int
    quality: np.ndarray  # (T,) float32, 1 on clean frames, 1 - severity otherwise
    spec: CorruptionSpec
    seed: int
    other_identity: int | None = None

    @property
    def num_frames(self) -> int:
        return self.maps.shape[0]

    @property
    def corrupted(self) -> np.ndarray:
        return self.quality < 1.0


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _round(x: float) -> int:
    # plain half-up rounding; python round() would round half to even
    return int(np.floor(x + 0.5))


def make_identity_bank(
    num_ids: int,
    channels: int,
    seed: int,
    cos_cap: float = 0.5,
    sharpness: float = 3.0,
    retry_budget: int = 2000,
) -> IdentityBank:
    """Draw separable unit-norm prototypes, rejecting near-collinear pairs.

    A prototype is |g|^sharpness of a Gaussian draw, normalized; the power
    concentrates mass on a few channels so channel-level attention has
    something to select, while keeping pairwise cosines low.  Raises
    ConfigError when the separability cap cannot be met within the retry
    budget.
    """
    if num_ids < 2:
        raise ConfigError("an identity bank needs at least 2 identities")
    rng = _rng(seed)
    protos: list[np.ndarray] = []
    for i in range(num_ids):
        for _ in range(retry_budget):
            v = np.abs(rng.standard_normal(channels)) ** sharpness
            v /= np.linalg.norm(v)
            if all(abs(float(v @ p)) <= cos_cap for p in protos):
                protos.append(v)
                break
        else:
            raise ConfigError(
                f"could not place prototype {i} under cos cap {cos_cap} "
                f"within {retry_budget} tries"
            )
    return IdentityBank(prototypes=np.stack(protos), seed=seed)


def make_sequence(
    bank: IdentityBank,
    identity: int,
    other_identity: int | None,
    t_raw: int,
    spec: CorruptionSpec,
    seed: int,
    height: int = 4,
    width: int = 4,
    jitter: float = 0.1,
    view_noise: float = 0.0,
    noise_scale: float = 1.0,
) -> SequenceBatch:
    """Generate one tracklet with round(rate * t_raw) corrupted frames.

    Clean frames broadcast the identity prototype over the spatial grid
    plus white per-channel jitter of norm ~``jitter``.  ``view_noise`` adds
    a fixed per-sequence perturbation of the prototype, modelling viewpoint
    change between tracklets of the same identity (0 disables it).
    ``noise_scale`` sets the detection-noise norm at severity 1, relative
    to the unit prototype norm.
    """
    if t_raw < 1:
        raise ConfigError("t_raw must be at least 1")
    if spec.kind == "interference" and (
        other_identity is None or other_identity == identity
    ):
        raise ConfigError("interference needs a distinct other_identity")
    rng = _rng(seed)
    channels = bank.channels
    proto = bank.prototypes[identity]

    base = proto
    if view_noise > 0.0:
        offset = rng.standard_normal(channels) / np.sqrt(channels)
        base = proto + view_noise * offset
        base = base / np.linalg.norm(base)

    n_corrupt = _round(spec.rate * t_raw)
    corrupted = np.zeros(t_raw, dtype=bool)
    if n_corrupt > 0:
        corrupted[rng.choice(t_raw, size=n_corrupt, replace=False)] = True

    alpha = spec.severity
    maps = np.empty((t_raw, channels, height, width), dtype=np.float32)
    quality = np.ones(t_raw, dtype=np.float32)
    for t in range(t_raw):
        signal = base.copy()
        if corrupted[t]:
            if spec.kind == "interference":
                signal += alpha * bank.prototypes[other_identity]
            elif spec.kind == "occlusion":
                block = _round(alpha * channels)
                start = int(rng.integers(0, channels))
                idx = (start + np.arange(block)) % channels
                signal[idx] = 0.0
            else:  # detection_noise
                signal += alpha * noise_scale * rng.standard_normal(channels) / np.sqrt(channels)
            quality[t] = 1.0 - alpha
        vec = signal + jitter * rng.standard_normal(channels) / np.sqrt(channels)
        maps[t] = np.broadcast_to(
            vec.astype(np.float32)[:, None, None], (channels, height, width)
        )
    return SequenceBatch(
        maps=maps,
        identity=identity,
        quality=quality,
        spec=spec,
        seed=seed,
        other_identity=other_identity,
    )


@dataclass(frozen=True)
class DatasetConfig:
    """Benchmark layout: identities, splits, dimensions and corruption."""

    num_ids: int = 50
    seqs_per_id: int = 4
    eval_fraction: float = 0.4
    channels: int = 64
    height: int = 4
    width: int = 4
    t_raw: int = 16
    rate: float = 0.3
    severity: float = 1.0
    kinds: tuple[str, ...] = CORRUPTION_KINDS
    jitter: float = 0.1
    view_noise: float = 0.0
    noise_scale: float = 1.0
    cos_cap: float = 0.5

    def __post_init__(self):
        for kind in self.kinds:
            if kind not in CORRUPTION_KINDS:
                raise ConfigError(f"unknown corruption kind {kind!r}")
        if not self.kinds:
            raise ConfigError("kinds must be nonempty")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must be in (0, 1)")


@dataclass
class SyntheticDataset:
    """Generated splits with disjoint train and eval identities."""

    train: list[SequenceBatch]
    query: list[SequenceBatch]
    gallery: list[SequenceBatch]
    bank: IdentityBank
    config: DatasetConfig
    seed: int

    @property
    def train_ids(self) -> list[int]:
        return sorted({s.identity for s in self.train})

    def label_index(self) -> dict[int, int]:
        """Map train identities to contiguous class indices."""
        return {identity: i for i, identity in enumerate(self.train_ids)}


def make_dataset(config: DatasetConfig, seed: int) -> SyntheticDataset:
    """Generate disjoint train/query/gallery splits, deterministic per seed.

    Eval identities contribute their first half of sequences as queries and
    the rest as gallery entries (at least one of each).
    """
    n_eval = _round(config.num_ids * config.eval_fraction)
    n_train = config.num_ids - n_eval
    if n_eval < 1 or n_train < 1:
        raise ConfigError(
            f"eval_fraction {config.eval_fraction} leaves an empty split "
            f"for {config.num_ids} identities"
        )
    if config.seqs_per_id < 2:
        raise ConfigError("eval identities need at least 2 sequences each")

    root = np.random.SeedSequence(seed)
    bank_seed, split_seed, seq_entropy = root.spawn(3)
    bank = make_identity_bank(
        config.num_ids,
        config.channels,
        seed=int(bank_seed.generate_state(1)[0]),
        cos_cap=config.cos_cap,
    )

    rng = _rng(split_seed)
    order = rng.permutation(config.num_ids)
    eval_ids = sorted(int(i) for i in order[:n_eval])
    train_ids = sorted(int(i) for i in order[n_eval:])

    seq_rng = _rng(seq_entropy)

    def build(identity: int, pool: list[int]) -> SequenceBatch:
        # interfering pedestrians come from the same split, so eval-time
        # interference points at identities that exist in the gallery
        kind = config.kinds[int(seq_rng.integers(0, len(config.kinds)))]
        other = identity
        while other == identity:
            other = pool[int(seq_rng.integers(0, len(pool)))]
        return make_sequence(
            bank,
            identity,
            other,
            config.t_raw,
            CorruptionSpec(kind=kind, rate=config.rate, severity=config.severity),
            seed=int(seq_rng.integers(0, 2**63 - 1)),
            height=config.height,
            width=config.width,
            jitter=config.jitter,
            view_noise=config.view_noise,
            noise_scale=config.noise_scale,
        )

    train = [build(i, train_ids) for i in train_ids for _ in range(config.seqs_per_id)]
    query: list[SequenceBatch] = []
    gallery: list[SequenceBatch] = []
    n_query = max(1, config.seqs_per_id // 2)
    for identity in eval_ids:
        seqs = [build(identity, eval_ids) for _ in range(config.seqs_per_id)]
        query.extend(seqs[:n_query])
        gallery.extend(seqs[n_query:])
    return SyntheticDataset(
        train=train, query=query, gallery=gallery, bank=bank, config=config, seed=seed
    )


# ---------------------------------------------------------------------------
# CSAF sequence files (binary, little-endian) with human-readable manifests
# ---------------------------------------------------------------------------


def write_sequence(path, seq: SequenceBatch) -> None:
    """Write one sequence as a CSAF file plus a JSON sidecar manifest."""
    path = Path(path)
    t, c, h, w = seq.maps.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIII", _VERSION, t, c, h, w))
        f.write(np.ascontiguousarray(seq.maps, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(seq.quality, dtype="<f4").tobytes())
    manifest = {
        "identity": seq.identity,
        "other_identity": seq.other_identity,
        "seed": seq.seed,
        "kind": seq.spec.kind,
        "rate": seq.spec.rate,
        "severity": seq.spec.severity,
    }
    path.with_suffix(".json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def read_sequence(path) -> SequenceBatch:
    """Read a CSAF file and its sidecar manifest back into a SequenceBatch."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise ConfigError(f"{path} is not a CSAF file (bad magic {raw[:4]!r})")
    version, t, c, h, w = struct.unpack_from("<IIIII", raw, 4)
    if version != _VERSION:
        raise ConfigError(f"unsupported CSAF version {version}")
    offset = 4 + 20
    n_payload = t * c * h * w
    maps = np.frombuffer(raw, dtype="<f4", count=n_payload, offset=offset)
    offset += 4 * n_payload
    quality = np.frombuffer(raw, dtype="<f4", count=t, offset=offset)
    manifest = json.loads(path.with_suffix(".json").read_text())
    return SequenceBatch(
        maps=maps.reshape(t, c, h, w).copy(),
        identity=int(manifest["identity"]),
        quality=quality.copy(),
        spec=CorruptionSpec(
            kind=manifest["kind"],
            rate=float(manifest["rate"]),
            severity=float(manifest["severity"]),
        ),
        seed=int(manifest["seed"]),
        other_identity=(
            None if manifest["other_identity"] is None else int(manifest["other_identity"])
        ),
    )
