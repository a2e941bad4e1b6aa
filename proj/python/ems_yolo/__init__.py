"""Fully spiking object detection toolkit."""

import json

from ._core import (
    EmsError,
    bin_events,
    iou,
    layer_energy,
    lif_forward,
    nms,
    read_events,
    surrogate_grad,
    write_events,
)
from . import _core

__all__ = [
    "EmsError",
    "bin_events",
    "gne_report",
    "iou",
    "layer_energy",
    "lif_forward",
    "nms",
    "normalize_config",
    "read_events",
    "surrogate_grad",
    "train",
    "write_events",
]


def normalize_config(config=None):
    """Validated config dict with every default filled in."""
    return json.loads(_core.normalize_config(json.dumps(config or {})))


def train(config, out_dir):
    """Trains from a config dict; returns (per-epoch metrics, checkpoint path)."""
    return _core.train(json.dumps(config), str(out_dir))


def gne_report(config=None, n_probes=256, depths=(10, 18, 34), apply_init=True):
    """GNE diagnostics of the configured network as a dict."""
    text = _core.gne_report(json.dumps(config or {}), n_probes, list(depths), apply_init)
    return json.loads(text)
