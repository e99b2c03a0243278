import sys
from pathlib import Path

import numpy as np
import pytest

from convasr.layers import ConvBlockConfig
from convasr.model import ModelConfig
from convasr.tensor import precision

ROOT = Path(__file__).resolve().parents[1]
for sub in ("agents", "orchestrator"):
    if str(ROOT / sub) not in sys.path:
        sys.path.append(str(ROOT / sub))


def tiny_config(**updates) -> ModelConfig:
    values = dict(
        input_dim=8,
        encoder_conv_blocks=[ConvBlockConfig(num_layers=1, kernel=3, channels=3, pool=2)],
        decoder_conv=ConvBlockConfig(num_layers=2, kernel=3, channels=[6, 8]),
        enc_layers=1,
        dec_layers=1,
        d_model=8,
        heads=2,
        ffn_width=12,
        vocab_size=7,
        emb_dim=4,
        dropout=0.0,
    )
    values.update(updates)
    return ModelConfig(**values)


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def double():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)
