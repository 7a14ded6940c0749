"""Selective fine-tuning regimes over a BatchNorm backbone, with subgroup
fairness evaluation. Thin wrappers over the C++ core."""

import json as _json

from bnfair._core import (  # noqa: F401
    RngStream,
    __version__,
    calibrate_thresholds,
    f1_from_counts,
    fairness_report,
    generate_dataset,
    nt_xent,
    quantile_inverse,
    recalibration_scenario,
    resnet50_accounting,
    rho,
    splitmix64,
)
from bnfair import _core as _impl


def run_experiment(config, out_dir):
    """Run the full pipeline. `config` may be a dict or a JSON string."""
    if isinstance(config, dict):
        config = _json.dumps(config)
    return _impl.run_experiment(config, out_dir)
