"""Synthetic near-field/far-field parallel corpus and its file formats.

The corpus models enrollment/test mismatch: every speaker has a latent
identity vector; each utterance perturbs it with content noise and projects
to feature space. The near-field recording is the clean projection plus
light noise; the far-field recording passes the clean projection through
one of a few fixed per-channel linear distortions and adds heavier noise.
Train and eval speakers are disjoint, so verification is open-set.

Feature file format (little-endian): magic "XFSV", u32 version, u32 record
count, then per record: u16 id length + UTF-8 id, u32 speaker, u8 domain
(0 = near_field, 1 = far_field), u16 channel, u32 dim, dim x f64 features.
Trial lists are text: "<enroll_id> <test_id> target|nontarget" per line.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateBatchError,
    FormatError,
    ParameterError,
    ShapeError,
)
from .numerics import Rng

NEAR = "near_field"
FAR = "far_field"

FEATURE_MAGIC = b"XFSV"
FEATURE_VERSION = 1

# Scale of the per-utterance content perturbation in latent space, relative
# to the unit-Gaussian speaker identity.
CONTENT_STD = 0.3

# Feature-space gain of the latent->input projection. Kept below 1 so the
# embeddings of a Glorot/relu extractor stay near unit norm: the
# Gram-matching loss gradient grows with the cube of the embedding norm and
# the default optimizer settings are only stable in that regime.
PROJECTION_GAIN = 0.40

# Entry scale of the per-channel distortion matrices, in units of 1/sqrt(D).
# At 2.5 a channel_strength of 0.6 distorts the clean far-field signal by
# roughly its own magnitude, which is what makes enrollment/test mismatch
# the dominant error source for a near+far-trained model.
CHANNEL_GAIN = 2.5

_MAX_BATCH_RETRIES = 1000


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: int
    domain: str
    channel: int
    features: np.ndarray

    def __post_init__(self):
        if self.domain not in (NEAR, FAR):
            raise ParameterError(f"unknown domain {self.domain!r}")
        if self.domain == NEAR and self.channel != 0:
            raise ParameterError("near-field utterances must have channel 0")
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 1 or not np.all(np.isfinite(f)):
            raise ShapeError(f"features of {self.id!r} must be a finite 1-D vector")
        object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class ParallelPair:
    near: Utterance
    far: Utterance

    def __post_init__(self):
        if self.near.speaker != self.far.speaker:
            raise ParameterError("pair members must share a speaker")
        if self.near.domain != NEAR or self.far.domain != FAR:
            raise ParameterError("pair must be (near_field, far_field)")


@dataclass(frozen=True)
class CorpusConfig:
    num_speakers: int = 50
    num_eval_speakers: int = 20
    utterances_per_speaker: int = 40
    latent_dim: int = 8
    input_dim: int = 24
    num_far_channels: int = 4
    channel_strength: float = 0.6
    noise_near: float = 0.05
    noise_far: float = 0.3
    seed: int = 0

    def __post_init__(self):
        counts = (self.num_speakers, self.num_eval_speakers, self.utterances_per_speaker,
                  self.latent_dim, self.input_dim, self.num_far_channels)
        if any(int(c) < 1 for c in counts):
            raise ParameterError(f"all corpus counts must be >= 1, got {counts}")
        if self.noise_near < 0 or self.noise_far < 0:
            raise ParameterError("noise std devs must be >= 0")
        if not np.isfinite(self.channel_strength):
            raise ParameterError("channel_strength must be finite")


@dataclass(frozen=True)
class Corpus:
    config: CorpusConfig
    pairs: list[ParallelPair]
    eval_utterances: list[Utterance]

    @property
    def train_utterances(self) -> list[Utterance]:
        out = []
        for p in self.pairs:
            out.append(p.near)
            out.append(p.far)
        return out


def synth_corpus(config: CorpusConfig) -> Corpus:
    """Generate the parallel corpus deterministically from config.seed.

    Train speakers get labels [0, num_speakers); eval speakers follow with
    higher indices and never appear in pairs.
    """
    rng = Rng(config.seed)
    dim_l, dim_d = config.latent_dim, config.input_dim
    projection = rng.normal((dim_l, dim_d), scale=PROJECTION_GAIN / np.sqrt(dim_l))
    channels = [rng.normal((dim_d, dim_d), scale=CHANNEL_GAIN / np.sqrt(dim_d))
                for _ in range(config.num_far_channels)]

    total = config.num_speakers + config.num_eval_speakers
    identities = rng.normal((total, dim_l))

    pairs: list[ParallelPair] = []
    eval_utts: list[Utterance] = []
    for spk in range(total):
        is_train = spk < config.num_speakers
        for u in range(config.utterances_per_speaker):
            content = rng.normal(dim_l, scale=CONTENT_STD)
            clean = (identities[spk] + content) @ projection
            near_feats = clean + rng.normal(dim_d, scale=config.noise_near)
            chan = int(rng.integers(1, config.num_far_channels + 1))
            distorted = clean + config.channel_strength * (clean @ channels[chan - 1].T)
            far_feats = distorted + rng.normal(dim_d, scale=config.noise_far)
            stem = f"spk{spk:04d}_utt{u:03d}"
            near = Utterance(id=f"{stem}_near", speaker=spk, domain=NEAR, channel=0,
                             features=near_feats)
            far = Utterance(id=f"{stem}_far", speaker=spk, domain=FAR, channel=chan,
                            features=far_feats)
            if is_train:
                pairs.append(ParallelPair(near=near, far=far))
            else:
                eval_utts.append(near)
                eval_utts.append(far)
    return Corpus(config=config, pairs=pairs, eval_utterances=eval_utts)


@dataclass(frozen=True)
class PairBatch:
    """Aligned near/far feature matrices for one sampled batch."""

    near: np.ndarray
    far: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def _stack_pairs(pairs: list[ParallelPair], idx) -> PairBatch:
    near = np.stack([pairs[i].near.features for i in idx])
    far = np.stack([pairs[i].far.features for i in idx])
    labels = np.array([pairs[i].near.speaker for i in idx], dtype=np.int64)
    return PairBatch(near=near, far=far, labels=labels, indices=np.asarray(idx, dtype=np.int64))


def sample_batch(pairs: list[ParallelPair], batch_size: int, rng: Rng) -> PairBatch:
    """Uniformly sample `batch_size` pairs without replacement.

    Guarantees >= 2 distinct speaker labels, resampling a bounded number of
    times before giving up.
    """
    if batch_size < 2:
        raise DegenerateBatchError(f"batch_size must be >= 2, got {batch_size}")
    if len(pairs) < batch_size:
        raise DegenerateBatchError(
            f"pool of {len(pairs)} pairs cannot fill a batch of {batch_size}")
    speakers = {p.near.speaker for p in pairs}
    if len(speakers) < 2:
        raise DegenerateBatchError("pair pool contains a single speaker")
    for _ in range(_MAX_BATCH_RETRIES):
        idx = rng.choice(len(pairs), batch_size, replace=False)
        batch = _stack_pairs(pairs, idx)
        if np.unique(batch.labels).size >= 2:
            return batch
    raise DegenerateBatchError("could not sample a batch with 2 distinct speakers")


_DOMAIN_CODE = {NEAR: 0, FAR: 1}
_DOMAIN_NAME = {v: k for k, v in _DOMAIN_CODE.items()}


def write_features(utterances: list[Utterance], path) -> None:
    buf = io.BytesIO()
    buf.write(FEATURE_MAGIC)
    buf.write(struct.pack("<II", FEATURE_VERSION, len(utterances)))
    for utt in utterances:
        ident = utt.id.encode("utf-8")
        buf.write(struct.pack("<H", len(ident)))
        buf.write(ident)
        buf.write(struct.pack("<IBHI", utt.speaker, _DOMAIN_CODE[utt.domain],
                              utt.channel, utt.features.size))
        buf.write(np.ascontiguousarray(utt.features, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_features(path) -> list[Utterance]:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("feature file truncated")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != FEATURE_MAGIC:
        raise FormatError("not a feature file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}")
    utts = []
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        ident = take(id_len).decode("utf-8")
        speaker, domain_code, channel, dim = struct.unpack("<IBHI", take(11))
        if domain_code not in _DOMAIN_NAME:
            raise FormatError(f"unknown domain code {domain_code}")
        feats = np.frombuffer(take(dim * 8), dtype="<f8").copy()
        utts.append(Utterance(id=ident, speaker=speaker, domain=_DOMAIN_NAME[domain_code],
                              channel=channel, features=feats))
    if pos != len(data):
        raise FormatError("trailing bytes after feature records")
    return utts


def pairs_from_utterances(utterances: list[Utterance]) -> list[ParallelPair]:
    """Rebuild parallel pairs from a flat utterance list.

    Near and far recordings of one utterance event share an id stem
    (`<stem>_near` / `<stem>_far`). Every utterance must pair up.
    """
    near: dict[str, Utterance] = {}
    far: dict[str, Utterance] = {}
    order: list[str] = []
    for u in utterances:
        stem = _recording_stem(u.id)
        bucket = near if u.domain == NEAR else far
        if stem in bucket:
            raise FormatError(f"duplicate {u.domain} recording for stem {stem!r}")
        if stem not in near and stem not in far:
            order.append(stem)
        bucket[stem] = u
    unmatched = set(near) ^ set(far)
    if unmatched:
        raise FormatError(f"unpaired recordings for stems: {sorted(unmatched)[:5]}")
    return [ParallelPair(near=near[s], far=far[s]) for s in order]


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    is_target: bool


TrialList = list  # list[Trial]

CONDITIONS = ("mismatched", "near_near", "far_far")


def _by_speaker(utterances: list[Utterance], domain: str) -> dict[int, list[Utterance]]:
    out: dict[int, list[Utterance]] = {}
    for u in utterances:
        if u.domain == domain:
            out.setdefault(u.speaker, []).append(u)
    return out


def _recording_stem(utt_id: str) -> str:
    """Utterance-event key: parallel near/far recordings of one utterance
    share a stem and must never be paired inside a trial (the shared clean
    content would leak into the score)."""
    for suffix in ("_near", "_far"):
        if utt_id.endswith(suffix):
            return utt_id[:-len(suffix)]
    return utt_id


def _draw_trials(enroll_pool, test_pool, num_target, num_nontarget, rng: Rng):
    speakers = sorted(set(enroll_pool) & set(test_pool))
    if len(speakers) < 2:
        raise ParameterError("need enroll and test utterances for >= 2 speakers")
    trials = []
    for _ in range(num_target):
        for _ in range(_MAX_BATCH_RETRIES):
            spk = speakers[int(rng.integers(0, len(speakers)))]
            enroll = enroll_pool[spk][int(rng.integers(0, len(enroll_pool[spk])))]
            candidates = [u for u in test_pool[spk]
                          if _recording_stem(u.id) != _recording_stem(enroll.id)]
            if candidates:
                test = candidates[int(rng.integers(0, len(candidates)))]
                trials.append(Trial(enroll.id, test.id, True))
                break
        else:
            raise ParameterError("could not build a target trial; too few utterances")
    for _ in range(num_nontarget):
        i = int(rng.integers(0, len(speakers)))
        j = int(rng.integers(0, len(speakers) - 1))
        if j >= i:
            j += 1
        s1, s2 = speakers[i], speakers[j]
        enroll = enroll_pool[s1][int(rng.integers(0, len(enroll_pool[s1])))]
        test = test_pool[s2][int(rng.integers(0, len(test_pool[s2])))]
        trials.append(Trial(enroll.id, test.id, False))
    return trials


def make_trials(eval_utterances: list[Utterance], num_target: int, num_nontarget: int,
                rng: Rng) -> dict[str, list[Trial]]:
    """Build the mismatched (near enroll / far test) trial list plus the two
    matched-condition lists (near/near and far/far).

    Target trials share a speaker, nontarget trials do not, and enroll and
    test are never the same recording. Counts are exact per condition.
    """
    if num_target < 1 or num_nontarget < 1:
        raise ParameterError("need at least one target and one nontarget trial")
    near = _by_speaker(eval_utterances, NEAR)
    far = _by_speaker(eval_utterances, FAR)
    if len(set(near) & set(far)) < 2:
        raise ParameterError("eval set must cover both domains for >= 2 speakers")
    return {
        "mismatched": _draw_trials(near, far, num_target, num_nontarget, rng),
        "near_near": _draw_trials(near, near, num_target, num_nontarget, rng),
        "far_far": _draw_trials(far, far, num_target, num_nontarget, rng),
    }


def write_trials(trials: list[Trial], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            label = "target" if t.is_target else "nontarget"
            fh.write(f"{t.enroll_id} {t.test_id} {label}\n")


def read_trials(path) -> list[Trial]:
    trials = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise FormatError(f"bad trial line {line_no}: {line!r}")
            trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return trials
