import numpy as np
import pytest

from sparsevqa import autodiff as ad
from sparsevqa.autodiff import Tensor, grad_check
from sparsevqa.data import SynthSpec
from sparsevqa.model import ModelConfig


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(d_model=32, d_ffn=48, heads=2, lang_layers=2,
                       vis_layers=1, cross_layers=1, vocab_size=32,
                       vis_dim=8, answers=6, pooled_dim=32)


@pytest.fixture
def tiny_synth():
    return SynthSpec(answers=6, prototypes=6, beta=0.9, gamma=0.9,
                     train_size=384, test_size=192, seed=5,
                     vis_dim=8, vis_len=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def primitive_grad_errors(seed):
    """Central-difference error of every primitive on random small tensors."""
    rng = np.random.default_rng(seed)
    g = Tensor(rng.normal(size=6))
    b = Tensor(rng.normal(size=6))
    c2 = Tensor(rng.normal(size=(3, 6)))
    w = Tensor(rng.normal(size=(6, 4)))
    bias = Tensor(rng.normal(size=4))
    c3 = Tensor(rng.normal(size=(3, 4)))
    k = Tensor(rng.normal(size=(2, 2, 5, 3)))
    v = Tensor(rng.normal(size=(2, 2, 5, 3)))
    c4 = Tensor(rng.normal(size=(2, 2, 4, 3)))
    ids = rng.integers(0, 8, size=(3, 2))
    c63 = Tensor(rng.normal(size=(6, 3)))
    c324 = Tensor(rng.normal(size=(3, 2, 4)))
    cases = {
        "add": lambda x: ad.sum_(ad.mul(ad.add(x, g), c2)),
        "sub": lambda x: ad.sum_(ad.mul(ad.sub(x, g), c2)),
        "mul": lambda x: ad.sum_(ad.mul(ad.mul(x, g), c2)),
        "neg": lambda x: ad.sum_(ad.mul(ad.neg(x), c2)),
        "matmul": lambda x: ad.sum_(ad.mul(ad.matmul(x, w), c3)),
        "linear": lambda x: ad.sum_(ad.mul(ad.linear(x, w, bias), c3)),
        "softmax": lambda x: ad.sum_(ad.mul(ad.softmax(x), c2)),
        "sigmoid": lambda x: ad.sum_(ad.mul(ad.sigmoid(x), c2)),
        "softplus": lambda x: ad.sum_(ad.mul(ad.softplus(x), c2)),
        "tanh": lambda x: ad.sum_(ad.mul(ad.tanh(x), c2)),
        "gelu": lambda x: ad.sum_(ad.mul(ad.gelu(x), c2)),
        "relu": lambda x: ad.sum_(ad.mul(ad.relu(x), c2)),
        "log": lambda x: ad.sum_(ad.mul(ad.log(ad.add(ad.mul(x, x), 0.3)), c2)),
        "layer_norm": lambda x: ad.sum_(ad.mul(ad.layer_norm(x, g, b), c2)),
        "mean": lambda x: ad.mean_(ad.mul(x, c2)),
        "reshape": lambda x: ad.sum_(ad.mul(ad.reshape(x, (6, 3)), c63)),
        "transpose": lambda x: ad.sum_(ad.mul(ad.transpose(x), c63)),
        "take": lambda x: ad.sum_(ad.mul(ad.take(x, 1, 0), g)),
    }
    errs = {}
    for name, f in cases.items():
        x = Tensor(rng.normal(size=(3, 6)))
        errs[name] = grad_check(f, x, step=1e-5)
    x4 = Tensor(rng.normal(size=(2, 2, 4, 3)))
    errs["attention"] = grad_check(
        lambda t: ad.sum_(ad.mul(ad.attention(t, k, v), c4)), x4, step=1e-5)
    table = Tensor(rng.normal(size=(8, 4)))
    errs["embedding"] = grad_check(
        lambda t: ad.sum_(ad.mul(ad.embedding(t, ids), c324)), table, step=1e-5)
    return errs
