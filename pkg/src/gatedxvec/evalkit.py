"""Verification scoring backends and detection metrics (EER, minDCF, DET)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .data import Trial

LDA_REG = 1e-6


class ScoreFormatError(ValueError):
    pass


class TrialMismatchError(ValueError):
    pass


@dataclass
class ScoreSet:
    trials: list[Trial]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.trials) != len(self.scores):
            raise ValueError(f"{len(self.trials)} trials but {len(self.scores)} scores")

    def labels(self) -> np.ndarray:
        if any(t.is_target is None for t in self.trials):
            raise ValueError("score set has unlabeled trials; attach a trial list first")
        return np.array([t.is_target for t in self.trials], dtype=bool)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        lab = self.labels()
        tar, non = self.scores[lab], self.scores[~lab]
        if tar.size == 0 or non.size == 0:
            raise ValueError(f"metrics need targets and nontargets; got {tar.size} and {non.size}")
        return tar, non


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must lie in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


DEFAULT_DCF_POINTS = (DcfParams(0.01), DcfParams(0.005))


# ---------------------------------------------------------------------------
# backends
# ---------------------------------------------------------------------------

def cosine_score(e1, e2) -> float:
    a = np.asarray(e1, dtype=np.float64)
    b = np.asarray(e2, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine score of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def scatter_matrices(x: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Between- and within-class scatter, each normalised by the sample count."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    mu = x.mean(axis=0)
    d = x.shape[1]
    sb, sw = np.zeros((d, d)), np.zeros((d, d))
    for c in np.unique(labels):
        xc = x[labels == c]
        mc = xc.mean(axis=0)
        sb += len(xc) * np.outer(mc - mu, mc - mu)
        sw += (xc - mc).T @ (xc - mc)
    return sb / len(x), sw / len(x)


def lda_project(embeddings, labels, out_dim: int) -> np.ndarray:
    """Projection matrix ``(D, out_dim)`` maximising between/within scatter."""
    x = np.asarray(embeddings, dtype=np.float64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("LDA needs at least two classes")
    if not 1 <= out_dim <= min(x.shape[1], len(classes) - 1):
        raise ValueError(f"out_dim must lie in [1, {min(x.shape[1], len(classes) - 1)}]")
    sb, sw = scatter_matrices(x, labels)
    sw = sw + LDA_REG * np.eye(x.shape[1])
    try:
        vals, vecs = scipy.linalg.eigh(sb, sw)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"LDA scatter is degenerate: {exc}") from None
    order = np.argsort(vals)[::-1][:out_dim]
    return vecs[:, order]


def center_and_project(emb: np.ndarray, mean: np.ndarray | None, proj: np.ndarray | None) -> np.ndarray:
    out = emb if mean is None else emb - mean
    return out if proj is None else out @ proj


def score_trials(embeddings: dict[str, np.ndarray], trials: list[Trial],
                 mean: np.ndarray | None = None, projection: np.ndarray | None = None) -> ScoreSet:
    cache = {}

    def vec(utt):
        if utt not in cache:
            if utt not in embeddings:
                raise KeyError(f"no embedding for utterance {utt!r}")
            cache[utt] = center_and_project(embeddings[utt], mean, projection)
        return cache[utt]

    return ScoreSet(list(trials), np.array([cosine_score(vec(t.enroll), vec(t.test)) for t in trials]))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def operating_points(scores: ScoreSet):
    """Miss and false-alarm rates at every candidate threshold.

    Thresholds are ``-inf``, the midpoints between adjacent distinct scores
    and ``+inf``; a trial is accepted when its score exceeds the threshold.
    Returns ``(thresholds, p_miss, p_fa)`` with thresholds ascending.
    """
    tar, non = scores.split()
    uniq = np.unique(np.concatenate([tar, non]))
    thr = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    miss = np.searchsorted(np.sort(tar), thr, side="left")
    fa = non.size - np.searchsorted(np.sort(non), thr, side="right")
    return thr, miss / tar.size, fa / non.size


def eer_from_curve(thr, p_miss, p_fa) -> tuple[float, float]:
    i = int(np.argmax(p_miss >= p_fa))
    if i == 0:
        return float(p_miss[0]), float(thr[0])
    a0, a1, b0, b1 = p_miss[i - 1], p_miss[i], p_fa[i - 1], p_fa[i]
    s = (b0 - a0) / ((a1 - a0) - (b1 - b0))
    eer = a0 + s * (a1 - a0)
    t0, t1 = thr[i - 1], thr[i]
    if np.isinf(t0) or np.isinf(t1):
        th = t1 if np.isinf(t0) else t0
    else:
        th = t0 + s * (t1 - t0)
    return float(eer), float(th)


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold, interpolated linearly at the crossing."""
    return eer_from_curve(*operating_points(scores))


def dcf_curve(p_miss, p_fa, params: DcfParams) -> np.ndarray:
    cost = params.c_miss * params.p_target * p_miss + params.c_fa * (1.0 - params.p_target) * p_fa
    return cost / min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target))


def compute_min_dcf(scores: ScoreSet, params: DcfParams = DcfParams()) -> tuple[float, float]:
    """Minimum normalised detection cost and the threshold achieving it."""
    thr, p_miss, p_fa = operating_points(scores)
    dcf = dcf_curve(p_miss, p_fa, params)
    i = int(np.argmin(dcf))
    return float(dcf[i]), float(thr[i])


def det_points(scores: ScoreSet) -> list[tuple[float, float]]:
    _, p_miss, p_fa = operating_points(scores)
    return list(zip(p_fa.tolist(), p_miss.tolist()))


def fuse_scores(sets: list[ScoreSet], weights) -> ScoreSet:
    """Per-trial weighted mean of several score sets over the same trial list."""
    weights = [float(w) for w in weights]
    if not sets or len(weights) != len(sets):
        raise ValueError(f"{len(sets)} score sets but {len(weights)} weights")
    total = sum(weights)
    if total <= 0:
        raise ValueError("fusion weights must have a positive sum")
    ref = sets[0].trials
    for k, s in enumerate(sets[1:], start=2):
        if len(s.trials) != len(ref):
            raise TrialMismatchError(f"set {k} has {len(s.trials)} trials, set 1 has {len(ref)}")
        for i, (a, b) in enumerate(zip(ref, s.trials)):
            if (a.enroll, a.test) != (b.enroll, b.test):
                raise TrialMismatchError(
                    f"trial {i + 1} differs: '{a.enroll} {a.test}' vs '{b.enroll} {b.test}' in set {k}")
    fused = sum((w / total) * s.scores for w, s in zip(weights, sets))
    # where every set agrees the mean is that value; return it exactly rather
    # than a rounded reconstruction of it
    agree = np.all([s.scores == sets[0].scores for s in sets[1:]], axis=0)
    return ScoreSet(list(ref), np.where(agree, sets[0].scores, fused))


@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    min_dcf: dict[DcfParams, tuple[float, float]]
    det: list[tuple[float, float]] = field(repr=False, default_factory=list)
    n_target: int = 0
    n_nontarget: int = 0

    @property
    def min_dcf_avg(self) -> float:
        return float(np.mean([v[0] for v in self.min_dcf.values()]))

    @property
    def primary_min_dcf(self) -> float:
        return next(iter(self.min_dcf.values()))[0]

    def summary_line(self) -> str:
        return f"EER% {100 * self.eer:.4f} minDCF {self.primary_min_dcf:.4f}"

    def table(self, system: str = "system") -> str:
        width = max(len(system), 6)
        head = f"{'system':<{width}}  {'EER%':>8}  {'minDCF':>8}"
        row = f"{system:<{width}}  {100 * self.eer:>8.2f}  {self.primary_min_dcf:>8.3f}"
        return "\n".join([head, row])

    def key_values(self) -> str:
        lines = [f"eer={self.eer!r}", f"eer_threshold={self.eer_threshold!r}",
                 f"n_target={self.n_target}", f"n_nontarget={self.n_nontarget}"]
        for p, (v, th) in self.min_dcf.items():
            tag = f"p{p.p_target:g}_cmiss{p.c_miss:g}_cfa{p.c_fa:g}"
            lines += [f"min_dcf[{tag}]={v!r}", f"min_dcf_threshold[{tag}]={th!r}"]
        lines.append(f"min_dcf_avg={self.min_dcf_avg!r}")
        return "\n".join(lines)


def evaluate(scores: ScoreSet, dcf_points=DEFAULT_DCF_POINTS) -> EvalReport:
    thr, p_miss, p_fa = operating_points(scores)
    eer, eer_th = eer_from_curve(thr, p_miss, p_fa)
    dcfs = {}
    for p in dcf_points:
        curve = dcf_curve(p_miss, p_fa, p)
        i = int(np.argmin(curve))
        dcfs[p] = (float(curve[i]), float(thr[i]))
    lab = scores.labels()
    return EvalReport(eer, eer_th, dcfs, list(zip(p_fa.tolist(), p_miss.tolist())),
                      int(lab.sum()), int((~lab).sum()))


# ---------------------------------------------------------------------------
# score files
# ---------------------------------------------------------------------------

def write_scores(scores: ScoreSet, path) -> None:
    with open(path, "w") as fh:
        for t, s in zip(scores.trials, scores.scores):
            fh.write(f"{t.enroll} {t.test} {float(s)!r}\n")


def read_scores(path) -> ScoreSet:
    trials, values = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise ScoreFormatError(f"{path}:{lineno}: expected 'enroll test score'")
            try:
                values.append(float(fields[2]))
            except ValueError:
                raise ScoreFormatError(f"{path}:{lineno}: bad score {fields[2]!r}") from None
            trials.append(Trial(fields[0], fields[1]))
    return ScoreSet(trials, np.array(values))


def attach_labels(scores: ScoreSet, trials: list[Trial]) -> ScoreSet:
    """Label a score set from a trial list; every scored pair must appear in it."""
    lookup = {(t.enroll, t.test): t.is_target for t in trials}
    labeled = []
    for t in scores.trials:
        key = (t.enroll, t.test)
        if key not in lookup:
            raise TrialMismatchError(f"scored trial '{t.enroll} {t.test}' is not in the trial list")
        labeled.append(Trial(t.enroll, t.test, lookup[key]))
    return ScoreSet(labeled, scores.scores.copy())


def write_det_csv(report: EvalReport, path) -> None:
    Path(path).write_text("p_fa,p_miss\n" + "".join(f"{a!r},{b!r}\n" for a, b in report.det))
