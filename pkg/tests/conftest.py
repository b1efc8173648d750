import json

import pytest

from conda_cl.config import default_config_dict


def tiny_config_dict(seed=0, out="run"):
    """Four domains at 16x16 with tiny networks: a full run takes a few seconds."""
    doc = default_config_dict(seed)
    doc.update({
        "image_size": [16, 16],
        "dataset": {"n_train": 16, "n_val": 4},
        "segnet": {"widths": [4, 8], "epochs": 2, "batch": 8},
        "flow": {"scales": 2, "blocks_per_scale": 2, "hidden_channels": 4, "epochs": 1, "batch": 8},
        "adapt": {"epochs_per_stage": 1, "batch": 8},
        "output_dir": out,
    })
    return doc


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config_dict(out=str(tmp_path / "run"))))
    return path
