import numpy as np
import pytest

from slm import tensor
from slm.backbones import SpeechEncoder, TextLM
from slm.config import AdapterConfig, Config, SpeechEncoderConfig, TextLMConfig
from slm.rng import make_rng
from slm.sandwich import Adapter, SandwichModel, Subsampler


@pytest.fixture
def f64():
    with tensor.precision("f64"):
        yield


def tiny_model(seed=0, D=8, E=12, L=1, V=8, F=4, mode="strided", vocab=None):
    """Random-weight sandwich small enough for exhaustive finite differences."""
    enc = SpeechEncoder(SpeechEncoderConfig(feature_dim=F, dim=D, num_layers=1, num_heads=2), make_rng(seed, "se"))
    lm = TextLM(TextLMConfig(dim=E, num_layers=1, num_heads=2, vocab_size=V if vocab is None else vocab),
                make_rng(seed, "lm"))
    enc.store.freeze()
    lm.store.freeze()
    adapter = Adapter(D, E, AdapterConfig(num_layers=L, num_heads=2), make_rng(seed, "ad"))
    return SandwichModel(enc, adapter, lm, Subsampler(4, mode, seed))


def small_config(**overrides) -> Config:
    """Full-vocabulary config with narrow widths and tiny corpora, for fast runs."""
    pairs = {
        "speech_encoder.dim": 16, "speech_encoder.num_layers": 1,
        "text_lm.dim": 24, "text_lm.num_layers": 1,
        "adapter.num_layers": 1,
        "corpus.recognize": 40, "corpus.translate": 40, "corpus.instruct": 40, "corpus.held_out": 12,
        "pretrain.speech_corpus": 60, "pretrain.lm_corpus": 120, "pretrain.held_out": 12,
        "pretrain.speech_batch_size": 8, "pretrain.lm_batch_size": 8,
        "train.batch_size": 4, "train.checkpoint_every": 0, "train.eval_every": 0,
        "bias.entities": 20, "bias.split_size": 6, "bias.finetune_size": 12,
        "cascade.size": 6,
    }
    pairs.update(overrides)
    return Config.from_pairs({k: str(v) for k, v in pairs.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
