import json

import numpy as np
import pytest

import ems_yolo as ey


def test_lif_hand_sequence():
    spikes, membrane = ey.lif_forward(np.array([0.3, 0.3, 0.6], dtype=np.float32).reshape(3, 1, 1, 1), 3)
    assert spikes.ravel().tolist() == [0.0, 0.0, 1.0]
    assert np.allclose(membrane.ravel(), [0.3, 0.375, 0.69375], atol=1e-7)


def test_surrogate_window():
    assert ey.surrogate_grad(0.0) == 1.0
    assert ey.surrogate_grad(1.0) == 1.0
    assert ey.surrogate_grad(1.01) == 0.0


def test_nms_and_iou():
    assert ey.iou([0, 0, 10, 10], [0, 2.5, 10, 10]) == pytest.approx(0.6)
    kept = ey.nms([[0, 2.5, 10, 10], [0, 0, 10, 10]], [0.8, 0.9], [0, 0], 0.5)
    assert len(kept) == 1
    assert kept[0][1] == pytest.approx(0.9)


def test_event_binning_and_files(tmp_path):
    ev = np.array([[100, 5, 7, 1], [1500, 5, 7, -1]])
    frames = ey.bin_events(ev, 2, 1000, 16, 16)
    assert frames.shape == (2, 2, 16, 16)
    assert frames[0, 0, 7, 5] == 1.0 and frames[1, 1, 7, 5] == 1.0 and frames.sum() == 2.0
    for name in ("a.csv", "a.evs"):
        ey.write_events(str(tmp_path / name), ev)
        assert np.array_equal(ey.read_events(str(tmp_path / name)), ev)


def test_energy_examples():
    assert ey.layer_energy(10000, 0.25, 4) == 9000.0
    assert ey.layer_energy(10000, 0.0, 4, mac=True) == 184000.0


def test_config_defaults_and_errors():
    cfg = ey.normalize_config()
    assert cfg["model"]["steps"] == 4
    assert cfg["model"]["v_th"] == 0.5
    with pytest.raises(ey.EmsError, match="E_CONFIG"):
        ey.normalize_config({"modle": {}})


def test_tiny_training(tmp_path):
    cfg = {
        "model": {"steps": 1, "head_channels": 32, "init": "default"},
        "train": {"epochs": 1, "batch_size": 4},
        "data": {"height": 32, "width": 32,
                 "train": {"synth": {"seed": 0, "n_images": 8}},
                 "eval": {"synth": {"seed": 1, "n_images": 4}}},
    }
    epochs, ckpt = ey.train(cfg, tmp_path)
    assert len(epochs) == 1
    assert 0.0 <= epochs[0]["map50"] <= 1.0
    assert (tmp_path / "metrics.csv").exists()
    assert ckpt.endswith(".ckpt")


def test_gne_report_shape():
    rep = ey.gne_report({}, n_probes=4, depths=[10])
    assert rep["depth"] == 10
    assert abs(rep["encode"]["alpha2"] - 3.0) < 0.15
    assert {"phi", "moments", "depth", "all"} <= set(rep["pass"])
    json.dumps(rep)
