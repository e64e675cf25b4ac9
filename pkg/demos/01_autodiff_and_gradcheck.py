"""
Autodiff tape and gradient checks
=================================

Every op records a backward closure on the active tape, and only when one of
its inputs requires a gradient. Frozen tensors therefore cost nothing in the
backward pass.
"""

# %%
import numpy as np

from slm import tensor as T
from slm.gradcheck import check_gradients
from slm.tensor import Tape, Tensor

rng = np.random.default_rng(0)
w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
x = Tensor(rng.standard_normal((2, 4)))

with Tape() as tape:
    loss = T.sum_all(T.gelu(T.matmul(x, w)))
    tape.backward(loss)
print("loss", float(loss.data), "grad norm", np.linalg.norm(w.grad))

# %%
# Central differences in 64-bit mode agree with the tape closely.
with T.precision("f64"):
    w64 = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    mix = Tensor(rng.standard_normal((2, 3)))
    errs = check_gradients(lambda: T.sum_all(T.softmax_rows(T.matmul(x, w64)) * mix), {"w": w64})
print(errs)

# %%
# The same check over a whole (tiny) adapter sandwich: backbones frozen,
# gradients flow only into the adapter.
from slm.backbones import SpeechEncoder, TextLM
from slm.config import AdapterConfig, SpeechEncoderConfig, TextLMConfig
from slm.rng import make_rng
from slm.sandwich import Adapter, SandwichModel, Subsampler, forward

with T.precision("f64"):
    enc = SpeechEncoder(SpeechEncoderConfig(feature_dim=4, dim=8, num_layers=1, num_heads=2), make_rng(0, "se"))
    lm = TextLM(TextLMConfig(dim=12, num_layers=1, num_heads=2, vocab_size=8), make_rng(0, "lm"))
    enc.store.freeze()
    lm.store.freeze()
    model = SandwichModel(enc, Adapter(8, 12, AdapterConfig(1, 2), make_rng(0, "ad")), lm, Subsampler(4, "strided"))
    model.store.astype(np.float64)
    speech = rng.standard_normal((9, 4))
    errs = check_gradients(lambda: forward(model, [3, 4], speech, [5, 6, 7]),
                           {n: model.store[n] for n in model.adapter_names()})
print("worst adapter tensor:", max(errs, key=errs.get), max(errs.values()))
