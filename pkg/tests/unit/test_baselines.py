"""
Unit tests for evsign/baselines.py.
Tests segment labelling, majority smoothing and the nearest-neighbour recognizer.
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from evsign.baselines import (
    FrameMajorityBaseline, collapse_labels, frame_majority_report, majority_filter, segment_features, segment_labels,
)
from evsign.data_kits.synth_data import GlossTemplate, load_corpus

STROKE = ((0.1, 0.1), (0.9, 0.9))


def dot_clip(positions, B=2, size=8):
    """One lit pixel per segment; ``None`` leaves the segment silent."""
    voxels = torch.zeros(len(positions), B, size, size)
    for k, pos in enumerate(positions):
        if pos is not None:
            voxels[k, :, pos[0], pos[1]] = 1.0
    return voxels


@pytest.mark.unit
class TestSegmentLabels:
    """Tests for segment_labels."""

    def test_midpoints_pick_the_covering_stroke(self):
        templates = [GlossTemplate(1, "G01", STROKE, 100), GlossTemplate(2, "G02", STROKE, 200)]
        # strokes cover [0, 100) and [150, 350) ms; 7 windows of 50 ms
        labels = segment_labels([1, 2], 50, templates, 7)
        assert labels.tolist() == [1, 1, 0, 2, 2, 2, 2]

    def test_single_segment(self):
        templates = [GlossTemplate(1, "G01", STROKE, 100)]
        assert segment_labels([1], 80, templates, 1).tolist() == [1]


@pytest.mark.unit
class TestSmoothing:
    """Tests for majority_filter and collapse_labels."""

    def test_isolated_label_is_voted_out(self):
        labels = np.array([1, 1, 2, 1, 1, 0, 0, 0])
        assert majority_filter(labels, 3).tolist() == [1, 1, 1, 1, 1, 0, 0, 0]

    def test_tie_keeps_centre(self):
        assert majority_filter(np.array([1, 2]), 3).tolist() == [1, 2]

    def test_width_one_is_identity(self):
        labels = np.array([3, 0, 2, 2, 1])
        assert majority_filter(labels, 1).tolist() == labels.tolist()

    @pytest.mark.parametrize("width", [0, 2, 4])
    def test_width_must_be_odd(self, width):
        with pytest.raises(ValueError):
            majority_filter(np.array([1, 2, 3]), width)

    def test_collapse(self):
        assert collapse_labels([0, 1, 1, 0, 1, 2, 2, 0]) == [1, 1, 2]
        assert collapse_labels([0, 0]) == []


@pytest.mark.unit
class TestFrameMajorityBaseline:
    """Tests for the nearest-neighbour recognizer on hand-built clips."""

    def test_features(self):
        feats, active = segment_features(dot_clip([(1, 1), None, (6, 6)]))
        assert active.tolist() == [True, False, True]
        torch.testing.assert_close(feats[active].norm(dim=1), torch.ones(2))
        assert torch.count_nonzero(feats[1]) == 0

    def test_recognizes_nearby_strokes(self):
        train = dot_clip([(1, 1), (1, 1), None, (6, 6), (6, 6), (6, 6)])
        baseline = FrameMajorityBaseline(width=1).fit([train], [np.array([1, 1, 0, 2, 2, 2])])
        test = dot_clip([(1, 2), (2, 1), None, None, (6, 5), (5, 6)])
        assert baseline.segment_predictions(test).tolist() == [1, 1, 0, 0, 2, 2]
        assert baseline.predict(test) == [1, 2]

    def test_needs_an_active_training_segment(self):
        with pytest.raises(ValueError, match="active"):
            FrameMajorityBaseline().fit([dot_clip([None, None])], [np.array([0, 0])])

    def test_width_validated(self):
        with pytest.raises(ValueError):
            FrameMajorityBaseline(width=2)


@pytest.mark.integration
class TestFrameMajorityReport:
    """frame_majority_report on the tiny corpus."""

    def test_scores_every_clip(self, tiny_config, tiny_corpus_dir):
        corpus = load_corpus(tiny_corpus_dir)
        report = frame_majority_report(tiny_config, corpus, "test")
        assert report.n_clips == len(corpus.splits["test"])
        assert report.wer >= 0.0 and report.bleu is None

    def test_limit(self, tiny_config, tiny_corpus_dir):
        corpus = load_corpus(tiny_corpus_dir)
        assert frame_majority_report(tiny_config, corpus, "test", limit=1).n_clips == 1
