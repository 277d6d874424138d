"""Named model configurations and tuning grids.

Names: ``mlp{L}_{W}`` (L tanh layers of W units), ``gbm{d}``, ``dart{d}`` and
``drf{d}`` (max depth d), with an optional ``_{n}`` suffix for the tree count
of the ensembles.
"""
from __future__ import annotations

import re
from dataclasses import replace
from itertools import product

from ..errors import ValidationError
from .mlp import MlpSpec
from .trees import TreeSpec

L1_GRID = (1e-2, 1e-3, 1e-4, 1e-5)
SAMPLE_RATE_GRID = (0.8, 1.0)

_MLP = re.compile(r"^mlp(\d+)_(\d+)$")
_TREE = re.compile(r"^(gbm|dart|drf)(\d+)(?:_(\d+))?$")


def spec_from_name(name: str, seed: int = 0, **overrides):
    name = name.strip().lower()
    m = _MLP.match(name)
    if m:
        layers, width = int(m.group(1)), int(m.group(2))
        if layers < 1 or width < 1:
            raise ValidationError(f"bad network name {name!r}")
        spec = MlpSpec(hidden_sizes=(width,) * layers, seed=seed, name=name)
        return replace(spec, **overrides) if overrides else spec
    m = _TREE.match(name)
    if m:
        family, depth = m.group(1), int(m.group(2))
        kind = {"gbm": "GBM", "dart": "DART", "drf": "RF"}[family]
        n_trees = int(m.group(3)) if m.group(3) else (200 if kind == "RF" else 100)
        spec = TreeSpec(kind=kind, max_depth=depth, n_trees=n_trees, seed=seed, name=name)
        if kind == "RF":
            spec = replace(spec, col_sample_rate=0.5)
        return replace(spec, **overrides) if overrides else spec
    raise ValidationError(f"unknown model name {name!r}")


def tuning_grid(spec):
    """Hyperparameter candidates around ``spec``: L1 strength for networks, sample rates for trees."""
    if isinstance(spec, MlpSpec):
        return [replace(spec, l1_lambda=l1) for l1 in L1_GRID]
    if spec.kind == "RF":
        return [replace(spec, row_sample_rate=r) for r in SAMPLE_RATE_GRID]
    return [replace(spec, row_sample_rate=r, col_sample_rate=c) for r, c in product(SAMPLE_RATE_GRID, repeat=2)]


# the model line-up used by the full pipeline
DEFAULT_MODELS = ("mlp1_32", "mlp2_32", "gbm2", "gbm8", "dart8", "drf8")
