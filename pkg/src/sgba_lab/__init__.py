"""Scapegoat backdoor attack laboratory.

A small research library for studying split-trigger data poisoning with
scapegoat camouflage and weight-variance-limited training, together with
the model-inspection defenses such attacks aim to evade: trigger
reverse-engineering with a MAD anomaly index (plus search-area-clipped
variants), population weight statistics, and a lightweight meta-classifier
over query-set outputs.

Subpackages
-----------
datasets    deterministic dataset loading, splitting, and a synthetic fixture
modelkit    small CNN architectures, seeded training, checkpoints, weight stats
reversal    per-class trigger reversal, stamping, anomaly index
attack      scapegoat derivation, split triggers, poisoning, variance-limited training
inspectors  shadow-model zoo, variance gap report, meta-detector
bench       experiment orchestration, reports, and the CLI entry points
"""

from . import attack, bench, config, datasets, inspectors, modelkit, reversal, zoo

__all__ = [
    "attack",
    "bench",
    "config",
    "datasets",
    "inspectors",
    "modelkit",
    "reversal",
    "zoo",
]

__version__ = "0.1.0"
