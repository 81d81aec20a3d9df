"""Feature archives, CMVN, trial lists and a synthetic speaker generator.

Binary feature archive layout (all integers little-endian u32)::

    b"GNFV" | version | count
    | count * (len | id utf-8 | len | speaker utf-8 | T | F | T*F float64 LE)
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

FEATURE_MAGIC = b"GNFV"
FEATURE_VERSION = 1
CMVN_VAR_FLOOR = 1e-8


class FeatureFormatError(ValueError):
    pass


class TrialFormatError(ValueError):
    pass


@dataclass
class Utterance:
    features: np.ndarray  # (T, F)
    speaker: str


@dataclass
class FeatureArchive:
    """Ordered mapping of utterance id to features and speaker."""

    utterances: dict[str, Utterance] = field(default_factory=dict)

    def add(self, utt_id: str, features, speaker: str) -> None:
        if utt_id in self.utterances:
            raise FeatureFormatError(f"duplicate utterance id {utt_id!r}")
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise FeatureFormatError(f"{utt_id}: features must be a (T>=1, F) matrix, got {feats.shape}")
        if self.utterances and feats.shape[1] != self.feat_dim:
            raise FeatureFormatError(f"{utt_id}: feature dim {feats.shape[1]} != archive dim {self.feat_dim}")
        self.utterances[utt_id] = Utterance(feats, speaker)

    @property
    def feat_dim(self) -> int:
        return next(iter(self.utterances.values())).features.shape[1]

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[str]:
        return iter(self.utterances)

    def __getitem__(self, utt_id: str) -> Utterance:
        return self.utterances[utt_id]

    def speakers(self) -> list[str]:
        return sorted({u.speaker for u in self.utterances.values()})

    def subset(self, ids) -> "FeatureArchive":
        out = FeatureArchive()
        for i in ids:
            u = self.utterances[i]
            out.add(i, u.features, u.speaker)
        return out

    def map_features(self, fn) -> "FeatureArchive":
        out = FeatureArchive()
        for i, u in self.utterances.items():
            out.add(i, fn(u.features), u.speaker)
        return out


def cmvn(features: np.ndarray) -> np.ndarray:
    """Per-utterance mean and variance normalisation of each feature dimension."""
    x = np.asarray(features, dtype=np.float64)
    centred = x - x.mean(axis=0)
    # a second pass removes the rounding left by the first, which the
    # variance floor would otherwise amplify on constant dimensions
    centred -= centred.mean(axis=0)
    var = (centred ** 2).mean(axis=0)
    return centred / np.sqrt(np.maximum(var, CMVN_VAR_FLOOR))


# ---------------------------------------------------------------------------
# synthetic speakers
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    num_speakers: int = 20
    utts_per_speaker: int = 30
    frames: tuple[int, int] = (200, 200)
    feat_dim: int = 39
    spread: float = 1.0
    noise: float = 1.0
    correlation: float = 0.5
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.num_speakers < 1 or self.utts_per_speaker < 1 or self.feat_dim < 1:
            raise ValueError("speakers, utterances per speaker and feature dim must be positive")
        lo, hi = self.frames
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid frame range {self.frames}")
        if self.spread <= 0 or self.noise <= 0:
            raise ValueError("spread and noise must be positive")
        if not 0.0 <= self.correlation < 1.0:
            raise ValueError("correlation must lie in [0, 1)")
        return self


def _ar1(rng: np.random.Generator, n: int, dim: int, rho: float, sigma: float) -> np.ndarray:
    eps = rng.normal(0.0, sigma, size=(n, dim))
    out = np.empty_like(eps)
    # stationary start, then innovations scaled to keep the marginal variance at sigma^2
    out[0] = eps[0]
    scale = np.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        out[t] = rho * out[t - 1] + scale * eps[t]
    return out


def generate_synthetic(spec: SynthSpec) -> FeatureArchive:
    """Gaussian speakers with first-order autocorrelated frames around a speaker mean."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    means = rng.normal(0.0, spec.spread, size=(spec.num_speakers, spec.feat_dim))
    archive = FeatureArchive()
    width = len(str(spec.num_speakers - 1))
    uwidth = len(str(spec.utts_per_speaker - 1))
    lo, hi = spec.frames
    for s in range(spec.num_speakers):
        spk = f"spk{s:0{width}d}"
        for u in range(spec.utts_per_speaker):
            n = int(rng.integers(lo, hi + 1))
            frames = means[s] + _ar1(rng, n, spec.feat_dim, spec.correlation, spec.noise)
            archive.add(f"{spk}-utt{u:0{uwidth}d}", frames, spk)
    return archive


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def feature_bytes(archive: FeatureArchive) -> bytes:
    parts = [FEATURE_MAGIC, struct.pack("<II", FEATURE_VERSION, len(archive))]
    for utt_id, u in archive.utterances.items():
        t, f = u.features.shape
        parts += [_pack_str(utt_id), _pack_str(u.speaker), struct.pack("<II", t, f),
                  np.ascontiguousarray(u.features, dtype="<f8").tobytes()]
    return b"".join(parts)


def write_features(archive: FeatureArchive, path) -> None:
    Path(path).write_bytes(feature_bytes(archive))


def read_features(path) -> FeatureArchive:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FeatureFormatError(f"{path}: truncated feature file at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: not a feature archive (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    archive = FeatureArchive()
    for _ in range(count):
        try:
            utt_id = take(struct.unpack("<I", take(4))[0]).decode("utf-8")
            speaker = take(struct.unpack("<I", take(4))[0]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FeatureFormatError(f"{path}: corrupt string field: {exc}") from None
        t, f = struct.unpack("<II", take(8))
        data = np.frombuffer(take(8 * t * f), dtype="<f8").reshape(t, f)
        archive.add(utt_id, data.astype(np.float64), speaker)
    if pos != len(buf):
        raise FeatureFormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return archive


def read_features_csv(path) -> FeatureArchive:
    """Plain-text import: one frame per row as ``utt_id,speaker,x1,...,xF``.

    Rows of one utterance must be contiguous.
    """
    rows: dict[str, list] = {}
    speakers: dict[str, str] = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) < 3:
                raise FeatureFormatError(f"{path}:{lineno}: expected utt_id,speaker,values...")
            utt, spk = row[0], row[1]
            if utt in speakers and speakers[utt] != spk:
                raise FeatureFormatError(f"{path}:{lineno}: speaker changes within {utt}")
            speakers[utt] = spk
            rows.setdefault(utt, []).append([float(v) for v in row[2:]])
    archive = FeatureArchive()
    for utt, frames in rows.items():
        archive.add(utt, np.array(frames), speakers[utt])
    return archive


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    enroll: str
    test: str
    is_target: bool | None = None


def read_trials(path) -> list[Trial]:
    """Parse ``enroll test target|nontarget`` lines, keeping file order."""
    trials = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3 or fields[2] not in ("target", "nontarget"):
                raise TrialFormatError(f"{path}:{lineno}: expected 'enroll test target|nontarget'")
            key = (fields[0], fields[1])
            if key in seen:
                raise TrialFormatError(f"{path}:{lineno}: duplicate trial {fields[0]} {fields[1]}")
            seen.add(key)
            trials.append(Trial(fields[0], fields[1], fields[2] == "target"))
    return trials


def write_trials(trials, path) -> None:
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{t.enroll} {t.test} {'target' if t.is_target else 'nontarget'}\n")


def holdout_split(archive: FeatureArchive, holdout: int, enroll: int):
    """Hold out the last ``holdout`` utterances of every speaker.

    The first ``enroll`` held-out utterances per speaker are enrollment
    utterances and the rest are tests; trials pair every enrollment utterance
    with every test utterance across all speakers.

    Returns ``(train_archive, eval_archive, trials)``.
    """
    if not 0 < enroll < holdout:
        raise ValueError(f"need 0 < enroll ({enroll}) < holdout ({holdout})")
    by_spk: dict[str, list[str]] = {}
    for utt, u in archive.utterances.items():
        by_spk.setdefault(u.speaker, []).append(utt)
    train_ids, enroll_ids, test_ids = [], [], []
    for spk in sorted(by_spk):
        ids = by_spk[spk]
        if len(ids) <= holdout:
            raise ValueError(f"speaker {spk} has {len(ids)} utterances; cannot hold out {holdout}")
        train_ids += ids[:-holdout]
        enroll_ids += ids[-holdout:][:enroll]
        test_ids += ids[-holdout:][enroll:]
    trials = [Trial(e, t, archive[e].speaker == archive[t].speaker)
              for e in enroll_ids for t in test_ids]
    return archive.subset(train_ids), archive.subset(enroll_ids + test_ids), trials
