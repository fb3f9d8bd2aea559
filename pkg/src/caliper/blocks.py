"""Basic-block matchers.

A basic block is any model that can tell the enrolled user (or device)
apart from chaff.  Two families are provided: feature-threshold matchers
standing in for biometric classifiers, and disk-block hash comparators that
verify the device itself.  Real and chaff models serialize to the same
layout so nothing in a model table gives ground truth away.
"""

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .encoding import (DIGEST_LEN, as_int, digest, pack_fields, strip_version, u8, u32, u64,
                       unpack_fields, versioned)
from .entropy import as_entropy
from .errors import ModalityUnavailable

FRAC_BITS = 16
SCALE = 1 << FRAC_BITS
THRESHOLD_FLOOR = 1 / 256
MARGIN = 1.5


class MatcherKind(IntEnum):
    FEATURE_THRESHOLD = 1
    BLOCK_HASH = 2


@dataclass(frozen=True)
class Modality:
    name: str
    mid: int
    kind: MatcherKind
    dim: int = 0


MODALITIES = {
    "face": Modality("face", 1, MatcherKind.FEATURE_THRESHOLD, 8),
    "voice": Modality("voice", 2, MatcherKind.FEATURE_THRESHOLD, 8),
    "keystroke": Modality("keystroke", 3, MatcherKind.FEATURE_THRESHOLD, 8),
    "device": Modality("device", 16, MatcherKind.BLOCK_HASH),
}
BY_MID = {m.mid: m for m in MODALITIES.values()}


@dataclass(frozen=True)
class MatcherModel:
    kind: MatcherKind
    payload: bytes
    mid: int

    def to_bytes(self) -> bytes:
        return versioned(pack_fields(u8(self.kind), u8(self.mid), self.payload))

    @classmethod
    def from_bytes(cls, data: bytes) -> "MatcherModel":
        kind, mid, payload = unpack_fields(strip_version(data), 3)
        model = cls(MatcherKind(as_int(kind)), payload, as_int(mid))
        model.parsed()  # reject payloads that do not match their kind
        return model

    def parsed(self):
        if self.kind == MatcherKind.FEATURE_THRESHOLD:
            return FeatureThresholdModel.from_payload(self.payload)
        return BlockHashModel.from_payload(self.payload)


@dataclass(frozen=True)
class FeatureThresholdModel:
    template: tuple  # Q16.16 fixed point
    threshold: int   # squared distance, Q.16 fixed point

    def __post_init__(self):
        if len(self.template) < 1 or self.threshold <= 0:
            raise ValueError("feature model needs d >= 1 and a positive threshold")

    @property
    def d(self) -> int:
        return len(self.template)

    def template_array(self) -> np.ndarray:
        return np.asarray(self.template, dtype=np.float64) / SCALE

    def threshold_value(self) -> float:
        return self.threshold / SCALE

    def to_payload(self) -> bytes:
        return pack_fields(u32(self.d), struct.pack(f">{self.d}i", *self.template),
                           u64(self.threshold))

    @classmethod
    def from_payload(cls, payload: bytes) -> "FeatureThresholdModel":
        d, tmpl, thr = unpack_fields(payload, 3)
        d = as_int(d)
        if len(tmpl) != 4 * d:
            raise ValueError("template length does not match d")
        return cls(struct.unpack(f">{d}i", tmpl), as_int(thr))

    def to_model(self, mid: int) -> MatcherModel:
        return MatcherModel(MatcherKind.FEATURE_THRESHOLD, self.to_payload(), mid)


@dataclass(frozen=True)
class BlockHashModel:
    lba: int
    block_size: int
    block_digest: bytes

    def __post_init__(self):
        if len(self.block_digest) != DIGEST_LEN:
            raise ValueError("block digest must be 32 bytes")

    def to_payload(self) -> bytes:
        return pack_fields(u64(self.lba), u32(self.block_size), self.block_digest)

    @classmethod
    def from_payload(cls, payload: bytes) -> "BlockHashModel":
        lba, size, dg = unpack_fields(payload, 3)
        return cls(as_int(lba), as_int(size), dg)

    def to_model(self, mid: int = MODALITIES["device"].mid) -> MatcherModel:
        return MatcherModel(MatcherKind.BLOCK_HASH, self.to_payload(), mid)


def _quantize(x) -> np.ndarray:
    q = np.round(np.asarray(x, dtype=np.float64) * SCALE)
    return np.clip(q, -(2**31), 2**31 - 1).astype(np.int64)


class FeatureThresholdMatcher(BaseEstimator):
    """Mean-template matcher with a squared-distance acceptance radius.

    ``fit`` sets ``template_`` to the quantized sample mean and
    ``threshold_`` to ``margin`` times the largest training distance
    (never below ``floor``).  ``score_samples`` returns negative squared
    distances, so larger is a better match.
    """

    def __init__(self, mid=1, margin=MARGIN, floor=THRESHOLD_FLOOR):
        self.mid = mid
        self.margin = margin
        self.floor = floor

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        tq = _quantize(X.mean(axis=0))
        template = tq / SCALE
        spread = float(((X - template) ** 2).sum(axis=1).max())
        thr = max(self.floor, self.margin * spread)
        self.template_ = template
        self.threshold_ = int(np.ceil(thr * SCALE)) / SCALE
        self.n_features_in_ = X.shape[1]
        self._tq = tuple(int(v) for v in tq)
        return self

    def score_samples(self, X):
        check_is_fitted(self, "template_")
        X = check_array(X, dtype=np.float64)
        return -((X - self.template_) ** 2).sum(axis=1)

    def predict(self, X):
        return (-self.score_samples(X) <= self.threshold_).astype(int)

    def to_model(self) -> MatcherModel:
        check_is_fitted(self, "template_")
        ftm = FeatureThresholdModel(self._tq, int(round(self.threshold_ * SCALE)))
        return ftm.to_model(self.mid)

    @classmethod
    def from_model(cls, model: MatcherModel) -> "FeatureThresholdMatcher":
        ftm = model.parsed()
        est = cls(mid=model.mid)
        est.template_ = ftm.template_array()
        est.threshold_ = ftm.threshold_value()
        est.n_features_in_ = ftm.d
        est._tq = tuple(ftm.template)
        return est


def train_feature_matcher(samples, mid) -> MatcherModel:
    samples = np.asarray(samples, dtype=np.float64) if len(samples) else None
    if samples is None or samples.ndim != 2:
        raise ValueError("need at least one sample and a consistent dimension")
    return FeatureThresholdMatcher(mid=mid).fit(samples).to_model()


@dataclass(frozen=True)
class PopulationParams:
    """Distribution that chaff templates (and synthetic users) are drawn from."""

    mean: tuple
    spread: float = 10.0
    threshold_range: tuple = (0.5, 4.0)

    @property
    def dim(self) -> int:
        return len(self.mean)

    @classmethod
    def default(cls, dim: int = 8) -> "PopulationParams":
        return cls(tuple([0.0] * dim))


def generate_chaff(population: PopulationParams, mid: int, rng) -> MatcherModel:
    rng = as_entropy(rng)
    template = rng.normal(np.asarray(population.mean), population.spread)
    lo, hi = population.threshold_range
    thr = float(rng.uniform(lo, hi))
    ftm = FeatureThresholdModel(tuple(int(v) for v in _quantize(template)),
                                max(1, int(np.ceil(thr * SCALE))))
    return ftm.to_model(mid)


def read_block(image: bytes, lba: int, block_size: int) -> bytes:
    return bytes(image[lba * block_size:(lba + 1) * block_size])


def score(model: MatcherModel, sample) -> float:
    if model.kind == MatcherKind.FEATURE_THRESHOLD:
        if isinstance(sample, (bytes, bytearray)):
            raise ValueError("feature model scored against a device image")
        ftm = model.parsed()
        x = np.asarray(sample, dtype=np.float64)
        if x.shape != (ftm.d,):
            raise ValueError(f"sample shape {x.shape} does not match d={ftm.d}")
        return -float(((x - ftm.template_array()) ** 2).sum())
    if not isinstance(sample, (bytes, bytearray)):
        raise ValueError("block-hash model scored against a feature vector")
    bhm = model.parsed()
    block = read_block(sample, bhm.lba, bhm.block_size)
    if len(block) != bhm.block_size:
        return 0.0
    return 1.0 if digest(block) == bhm.block_digest else 0.0


def classify_row(candidates, live) -> tuple[int, float]:
    """Pick the column whose model best explains the live samples.

    Returns ``(best_index, margin)`` where margin is the gap between the best
    and second-best mean score.  Ties go to the lowest index.
    """
    candidates = list(candidates)
    if len(candidates) < 2:
        raise ValueError("a row needs at least two candidates")
    if len({c.kind for c in candidates}) != 1:
        raise ValueError("candidates in a row must share a matcher kind")
    live = list(live) if live is not None else []
    if not live:
        raise ModalityUnavailable("no live samples for this row")
    means = np.array([np.mean([score(c, s) for s in live]) for c in candidates])
    best = int(np.argmax(means))
    ranked = np.sort(means)[::-1]
    return best, float(ranked[0] - ranked[1])


def make_block_ensemble(device_image: bytes, block_size: int, count: int, rng, choices: int = 2):
    """Real block-hash models at random LBAs, each paired with ``choices - 1`` chaff.

    Chaff carry random digests at LBAs inside the image, so their layout and
    address range match the real ones.
    """
    rng = as_entropy(rng)
    if block_size < 1 or len(device_image) < block_size:
        raise ValueError("image is smaller than one block")
    n_blocks = len(device_image) // block_size
    if count > n_blocks:
        raise ValueError(f"{count} blocks requested, image has {n_blocks}")
    mid = MODALITIES["device"].mid
    out = []
    for lba in rng.sample(n_blocks, count):
        real = BlockHashModel(lba, block_size,
                              digest(read_block(device_image, lba, block_size))).to_model(mid)
        chaff = tuple(BlockHashModel(rng.randbelow(n_blocks), block_size,
                                     rng.bytes(DIGEST_LEN)).to_model(mid)
                      for _ in range(choices - 1))
        out.append((real, chaff))
    return out


@dataclass(frozen=True)
class UserProfile:
    """Synthetic ground truth driving a user's sensor streams (simulation only)."""

    means: dict
    sigma: dict
    seed: int

    def __post_init__(self):
        if any(s < 0 for s in self.sigma.values()):
            raise ValueError("sigma must be non-negative")

    @classmethod
    def generate(cls, seed: int, sigma: float = 0.5, population: PopulationParams | None = None,
                 modalities=("face", "voice", "keystroke")) -> "UserProfile":
        population = population or PopulationParams.default()
        rng = as_entropy(seed).spawn("profile")
        means = {m: tuple(float(v) for v in rng.normal(np.asarray(population.mean),
                                                        population.spread))
                 for m in modalities}
        return cls(means, {m: sigma for m in modalities}, seed)

    def sample(self, modality: str, rng, count: int = 1) -> np.ndarray:
        mean = np.asarray(self.means[modality])
        sigma = self.sigma[modality]
        if sigma == 0:
            return np.tile(mean, (count, 1))
        return mean + as_entropy(rng).normal(0.0, sigma, (count, len(mean)))
