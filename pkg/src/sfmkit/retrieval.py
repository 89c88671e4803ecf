"""Keyframe database with an inverted index and the loop-detection pipeline:
BoW candidate ranking -> descriptor matching -> fundamental-matrix validation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DuplicateFrame, InsufficientMatches, NoConsensus
from .features import match_features, verify_fundamental
from .vocabulary import BowVector, VocabularyTree, bow_from_counts, word_counts


@dataclass(frozen=True)
class LoopClosure:
    query_frame: int
    map_frame: int
    inlier_matches: tuple
    inlier_count: int
    bow_score: float

    def __post_init__(self):
        if self.query_frame == self.map_frame:
            raise ValueError("loop closure cannot link a frame to itself")
        if self.inlier_count != len(self.inlier_matches):
            raise ValueError("inlier count does not match match list")


@dataclass
class LoopParams:
    top_n: int = 5
    min_score: float = 0.05
    min_inliers: int = 25
    exclusion: int = 30
    ratio: float = 0.8
    ransac_threshold_px: float = 2.0
    ransac_iters: int = 1000
    seed: int = 42


class KeyframeDatabase:
    """Per-frame BoW vectors plus a word -> frames inverted index.

    idf weights are recomputed lazily from the indexed frames, so BoW vectors
    (and hence scores) always reflect the current database contents.
    """

    def __init__(self, vocabulary: VocabularyTree):
        self.vocabulary = vocabulary
        self.counts = {}        # frame_id -> {word: count}
        self.features = {}      # frame_id -> FeatureSet
        self.inverted = {}      # word -> [frame_id, ...] in insertion order
        self.order = []
        self._idf_fresh = False
        self._bow_cache = {}

    def __len__(self):
        return len(self.order)

    def add(self, frame_id, features):
        if frame_id in self.counts:
            raise DuplicateFrame(f"frame {frame_id} already indexed")
        counts = word_counts(self.vocabulary, features)
        self.counts[frame_id] = counts
        self.features[frame_id] = features
        for word in sorted(counts):
            self.inverted.setdefault(word, []).append(frame_id)
        self.order.append(frame_id)
        self._idf_fresh = False
        self._bow_cache.clear()

    def _refresh_idf(self):
        if self._idf_fresh:
            return
        n = len(self.order)
        df = np.zeros(self.vocabulary.num_words)
        for counts in self.counts.values():
            for word in counts:
                df[word] += 1
        with np.errstate(divide="ignore"):
            idf = np.where(df > 0, np.log(np.maximum(n, 1) / np.maximum(df, 1)), 0.0)
        self.vocabulary.idf = idf
        self._idf_fresh = True

    def bow(self, frame_id) -> BowVector:
        self._refresh_idf()
        cached = self._bow_cache.get(frame_id)
        if cached is None:
            cached = bow_from_counts(self.counts[frame_id], self.vocabulary.idf)
            self._bow_cache[frame_id] = cached
        return cached

    def bow_of(self, features) -> BowVector:
        self._refresh_idf()
        return bow_from_counts(word_counts(self.vocabulary, features),
                               self.vocabulary.idf)

    def query(self, features, top_n=5, exclusion=0, query_id=None):
        """Ranked (frame_id, score) over frames sharing at least one word.

        Uses the inverted index but is score-identical to dense all-pairs
        scoring.  Frames within `exclusion` ids of `query_id` are omitted.
        Ties rank the lower frame_id first.
        """
        if not self.order:
            return []
        qbow = self.bow_of(features)
        scores = {}
        for word, qw in qbow.weights.items():
            for fid in self.inverted.get(word, ()):
                fbow = self.bow(fid)
                w = fbow.weights.get(word)
                if w is not None:
                    scores[fid] = scores.get(fid, 0.0) + qw * w
        if query_id is not None:
            scores = {f: s for f, s in scores.items()
                      if abs(f - query_id) > exclusion}
        ranked = sorted(((f, s) for f, s in scores.items() if s > 0),
                        key=lambda fs: (-fs[1], fs[0]))
        return ranked[:top_n]


def db_add(db: KeyframeDatabase, frame_id, features) -> KeyframeDatabase:
    db.add(frame_id, features)
    return db


def query_candidates(db, features, top_n=5, exclusion=0, query_id=None):
    return db.query(features, top_n=top_n, exclusion=exclusion, query_id=query_id)


def detect_loops(db: KeyframeDatabase, frame_ids=None, params=LoopParams()):
    """Run candidate ranking + matching + geometric validation per frame.

    Only candidates earlier in the ordering are considered, so each
    (query, candidate) pair yields at most one closure.  Failed candidates
    (too few matches, no RANSAC consensus) are skipped silently.
    """
    if frame_ids is None:
        frame_ids = list(db.order)
    closures = []
    for qid in frame_ids:
        qfs = db.features[qid]
        candidates = db.query(qfs, top_n=params.top_n,
                              exclusion=params.exclusion, query_id=qid)
        for cid, score in candidates:
            if cid >= qid or score < params.min_score:
                continue
            cfs = db.features[cid]
            matches = match_features(qfs, cfs, ratio=params.ratio)
            if len(matches) < max(8, params.min_inliers):
                continue
            try:
                mask, _ = verify_fundamental(
                    matches, qfs.xy, cfs.xy,
                    threshold_px=params.ransac_threshold_px,
                    max_iters=params.ransac_iters, seed=params.seed)
            except (InsufficientMatches, NoConsensus):
                continue
            inliers = tuple(m for m, ok in zip(matches, mask) if ok)
            if len(inliers) >= params.min_inliers:
                closures.append(LoopClosure(qid, cid, inliers, len(inliers),
                                            float(score)))
    return closures
