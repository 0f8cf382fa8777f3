"""Unsupervised gland segmentation at desk scale.

Pipeline stages: synthetic data generation, morphology-cue proposal mining,
semantic-grouping training of a small segmentation network, prediction and
evaluation. Everything runs on numpy arrays in channels-first layout.
"""

__version__ = "0.1.0"
