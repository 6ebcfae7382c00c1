"""Finite-difference verification for every registered backward rule.

Each entry in CASES draws random small inputs and returns a scalar-valued
function exercising exactly one differentiable input of one op; the suite
compares backward() against central differences at 64-bit precision. The
case table must cover the BACKWARD rule table exactly, so adding an op
without a check is an error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

TOLERANCE = 1e-4
DEFAULT_CASES_PER_OP = 100

# op name -> generator(rng) -> (scalar function of Tensor, probe Tensor)
CASES: dict[str, Callable] = {}


def _case(name: str):
    def deco(fn):
        CASES[name] = fn
        return fn

    return deco


def _arr(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _weights(rng, shape):
    # random readout makes the check sensitive to every output coordinate
    return T.Tensor(rng.normal(size=shape))


def _shape2(rng):
    return tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 3))))


@_case("add")
def _c_add(rng):
    s = _shape2(rng)
    other = T.Tensor(_arr(rng, *s))
    probe = T.Tensor(_arr(rng, *s[rng.integers(0, len(s)):]) if rng.random() < 0.5
                     else _arr(rng, *s))
    w = _weights(rng, s)
    if rng.random() < 0.5:
        return (lambda x: T.sum_(T.mul(T.add(x, other), w))), probe
    return (lambda x: T.sum_(T.mul(T.add(other, x), w))), probe


@_case("mul")
def _c_mul(rng):
    s = _shape2(rng)
    other = T.Tensor(_arr(rng, *s))
    probe = T.Tensor(_arr(rng, *s[rng.integers(0, len(s)):]) if rng.random() < 0.5
                     else _arr(rng, *s))
    w = _weights(rng, s)
    if rng.random() < 0.5:
        return (lambda x: T.sum_(T.mul(T.mul(x, other), w))), probe
    return (lambda x: T.sum_(T.mul(T.mul(other, x), w))), probe


@_case("scale")
def _c_scale(rng):
    s = _shape2(rng)
    c = float(rng.uniform(-3, 3))
    w = _weights(rng, s)
    return (lambda x: T.sum_(T.mul(T.scale(x, c), w))), T.Tensor(_arr(rng, *s))


@_case("exp")
def _c_exp(rng):
    s = _shape2(rng)
    w = _weights(rng, s)
    return (lambda x: T.sum_(T.mul(T.exp(x), w))), T.Tensor(_arr(rng, *s, lo=-1, hi=1))


@_case("log")
def _c_log(rng):
    s = _shape2(rng)
    w = _weights(rng, s)
    return (lambda x: T.sum_(T.mul(T.log(x), w))), T.Tensor(_arr(rng, *s, lo=0.2, hi=3.0))


@_case("power")
def _c_power(rng):
    s = _shape2(rng)
    p = float(rng.choice([0.0, 0.5, 1.0, 2.0, 3.0]))
    w = _weights(rng, s)
    return (lambda x: T.sum_(T.mul(T.power(x, p), w))), T.Tensor(_arr(rng, *s, lo=0.2, hi=2.0))


@_case("sigmoid")
def _c_sigmoid(rng):
    s = _shape2(rng)
    w = _weights(rng, s)
    return (lambda x: T.sum_(T.mul(T.sigmoid(x), w))), T.Tensor(_arr(rng, *s, lo=-4, hi=4))


@_case("log_sigmoid")
def _c_log_sigmoid(rng):
    s = _shape2(rng)
    w = _weights(rng, s)
    return (lambda x: T.sum_(T.mul(T.log_sigmoid(x), w))), T.Tensor(_arr(rng, *s, lo=-4, hi=4))


@_case("focal_binary_term")
def _c_focal(rng):
    s = _shape2(rng)
    gamma = float(rng.choice([0.0, 0.5, 1.0, 2.0]))
    w = _weights(rng, s)
    return (lambda x: T.sum_(T.mul(T.focal_binary_term(x, gamma), w))), \
        T.Tensor(_arr(rng, *s, lo=-4, hi=4))


@_case("gelu")
def _c_gelu(rng):
    s = _shape2(rng)
    w = _weights(rng, s)
    return (lambda x: T.sum_(T.mul(T.gelu(x), w))), T.Tensor(_arr(rng, *s, lo=-3, hi=3))


@_case("matmul")
def _c_matmul(rng):
    m, k, n = (int(rng.integers(1, 5)) for _ in range(3))
    batched = rng.random() < 0.5
    sa = (int(rng.integers(1, 3)), m, k) if batched else (m, k)
    sb = sa[:-2] + (k, n) if (batched and rng.random() < 0.5) else (k, n)
    out_shape = sa[:-2] + (m, n)
    w = _weights(rng, out_shape)
    a = T.Tensor(_arr(rng, *sa))
    b = T.Tensor(_arr(rng, *sb))
    if rng.random() < 0.5:
        return (lambda x: T.sum_(T.mul(T.matmul(x, b), w))), a
    return (lambda x: T.sum_(T.mul(T.matmul(a, x), w))), b


@_case("linear")
def _c_linear(rng):
    b, m, k, n = (int(rng.integers(1, 4)) for _ in range(4))
    x = T.Tensor(_arr(rng, b, m, k))
    wt = T.Tensor(_arr(rng, k, n))
    bias = T.Tensor(_arr(rng, n))
    w = _weights(rng, (b, m, n))
    role = rng.integers(0, 3)
    if role == 0:
        return (lambda t: T.sum_(T.mul(T.linear(t, wt, bias), w))), x
    if role == 1:
        return (lambda t: T.sum_(T.mul(T.linear(x, t, bias), w))), wt
    return (lambda t: T.sum_(T.mul(T.linear(x, wt, t), w))), bias


@_case("sum")
def _c_sum(rng):
    s = tuple(int(rng.integers(1, 4)) for _ in range(3))
    axis = [None, 0, 1, 2, (0, 2), (-1,)][rng.integers(0, 6)]
    probe = T.Tensor(_arr(rng, *s))
    red = np.sum(np.zeros(s), axis=axis)
    w = _weights(rng, red.shape)
    return (lambda x: T.sum_(T.mul(T.sum_(x, axis=axis), w))), probe


@_case("reshape")
def _c_reshape(rng):
    a, b = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    w = _weights(rng, (a * b,))
    return (lambda x: T.sum_(T.mul(T.reshape(x, (a * b,)), w))), T.Tensor(_arr(rng, a, b))


@_case("transpose")
def _c_transpose(rng):
    s = tuple(int(rng.integers(1, 4)) for _ in range(3))
    axes = tuple(rng.permutation(3).tolist())
    w = _weights(rng, tuple(s[ax] for ax in axes))
    return (lambda x: T.sum_(T.mul(T.transpose(x, axes), w))), T.Tensor(_arr(rng, *s))


@_case("concat")
def _c_concat(rng):
    d = int(rng.integers(1, 4))
    n1, n2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    axis = int(rng.integers(0, 2))
    s1 = (n1, d) if axis == 0 else (d, n1)
    s2 = (n2, d) if axis == 0 else (d, n2)
    other = T.Tensor(_arr(rng, *s2))
    out_shape = tuple(s1[i] + (s2[i] if i == axis else 0) for i in range(2))
    w = _weights(rng, out_shape)
    probe = T.Tensor(_arr(rng, *s1))
    if rng.random() < 0.5:
        return (lambda x: T.sum_(T.mul(T.concat([x, other], axis), w))), probe
    return (lambda x: T.sum_(T.mul(T.concat([other, x], axis), w))), probe


@_case("narrow")
def _c_narrow(rng):
    n, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
    start = int(rng.integers(0, n - 1))
    length = int(rng.integers(1, n - start + 1))
    w = _weights(rng, (length, d))
    return (lambda x: T.sum_(T.mul(T.narrow(x, 0, start, length), w))), T.Tensor(_arr(rng, n, d))


@_case("embedding")
def _c_embedding(rng):
    v, d, t = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    ids = rng.integers(0, v, size=(t,))
    w = _weights(rng, (t, d))
    return (lambda x: T.sum_(T.mul(T.embedding(x, ids), w))), T.Tensor(_arr(rng, v, d))


@_case("gather_last")
def _c_gather_last(rng):
    b, v = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    ids = rng.integers(0, v, size=(b,))
    w = _weights(rng, (b,))
    return (lambda x: T.sum_(T.mul(T.gather_last(x, ids), w))), T.Tensor(_arr(rng, b, v))


@_case("layer_norm")
def _c_layer_norm(rng):
    b, d = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    gain = T.Tensor(_arr(rng, d, lo=0.5, hi=1.5))
    bias = T.Tensor(_arr(rng, d, lo=-0.5, hi=0.5))
    xv = T.Tensor(_arr(rng, b, d))
    w = _weights(rng, (b, d))
    role = rng.integers(0, 3)
    if role == 0:
        return (lambda x: T.sum_(T.mul(T.layer_norm(x, gain, bias), w))), xv
    if role == 1:
        return (lambda x: T.sum_(T.mul(T.layer_norm(xv, x, bias), w))), gain
    return (lambda x: T.sum_(T.mul(T.layer_norm(xv, gain, x), w))), bias


@_case("masked_softmax")
def _c_masked_softmax(rng):
    b, n = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    mask = rng.random((b, n)) < 0.7
    mask[np.arange(b), rng.integers(0, n, size=b)] = True  # no empty rows
    w = _weights(rng, (b, n))
    return (lambda x: T.sum_(T.mul(T.masked_softmax(x, mask), w))), T.Tensor(_arr(rng, b, n))


@_case("log_softmax")
def _c_log_softmax(rng):
    b, n = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    w = _weights(rng, (b, n))
    return (lambda x: T.sum_(T.mul(T.log_softmax(x), w))), T.Tensor(_arr(rng, b, n))


@_case("l2_normalize")
def _c_l2_normalize(rng):
    b, d = int(rng.integers(1, 4)), int(rng.integers(1, 5))
    x = _arr(rng, b, d)
    x += np.sign(x) * 0.5  # keep rows away from the zero-norm kink
    w = _weights(rng, (b, d))
    return (lambda t: T.sum_(T.mul(T.l2_normalize(t), w))), T.Tensor(x)


@_case("masked_mean")
def _c_masked_mean(rng):
    b, t, d = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(1, 4))
    mask = rng.random((b, t)) < 0.7
    mask[:, 0] = True
    w = _weights(rng, (b, d))
    return (lambda x: T.sum_(T.mul(T.masked_mean(x, mask), w))), T.Tensor(_arr(rng, b, t, d))


@_case("resize_bilinear")
def _c_resize_bilinear(rng):
    h, wid, c = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 3))
    oh, ow = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    w = _weights(rng, (oh, ow, c))
    return (lambda x: T.sum_(T.mul(T.resize_bilinear(x, oh, ow), w))), T.Tensor(_arr(rng, h, wid, c))


@dataclass
class OpReport:
    name: str
    cases: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check_op(name: str, cases: int = DEFAULT_CASES_PER_OP, seed: int = 0) -> OpReport:
    gen = CASES[name]
    worst = 0.0
    with T.precision(64):
        for i in range(cases):
            rng = np.random.default_rng((hash(name) & 0xFFFF) * 100003 + seed + i)
            f, x = gen(rng)
            worst = max(worst, T.finite_diff_check(f, x))
    return OpReport(name, cases, worst)


def run_op_suite(cases_per_op: int = DEFAULT_CASES_PER_OP, seed: int = 0) -> list[OpReport]:
    missing = sorted(set(T.BACKWARD) - set(CASES))
    extra = sorted(set(CASES) - set(T.BACKWARD))
    if missing or extra:
        raise RuntimeError(f"gradcheck coverage mismatch: missing={missing} extra={extra}")
    return [check_op(name, cases_per_op, seed) for name in sorted(CASES)]


def end_to_end_check(seed: int = 0) -> OpReport:
    """Finite-difference the full two-pass loss on a 2-pair batch.

    Every parameter of a miniature model is perturbed; the analytic gradient
    comes from one backward() through the combined objective.
    """
    from . import losses
    from .data import SceneConfig, Vocabulary, make_batch
    from .model import Mammut, MammutConfig

    with T.precision(64):
        scene_cfg = SceneConfig(canvas_size=8, grid_size=2, max_objects=1,
                                patch_size=4)
        vocab = Vocabulary.canonical(scene_cfg)
        cfg = MammutConfig(vision_layers=1, vision_dim=8, vision_heads=2,
                           decoder_layers=2, decoder_dim=8, decoder_heads=2,
                           cross_attention_every_k=2, vocab_size=len(vocab),
                           max_text_len=6, patch_grid=2, patch_dim=3 * 4 * 4)
        model = Mammut(cfg, init_seed=seed)
        batch = make_batch(scene_cfg, vocab, seeds=[seed + 1, seed + 2],
                           max_text_len=cfg.max_text_len)
        weights = losses.LossWeights(caption=1.0, focal=1.0, gamma=2.0)

        params = model.parameters()
        names = sorted(params)
        base = {n: params[n].data.copy() for n in names}

        def total() -> T.Tensor:
            vis, v = model.encode_and_pool(batch.patches)
            l = model.contrastive_pass(batch.tokens)
            logits = model.generative_pass(batch.tokens, vis)
            cap = losses.captioning_loss(logits, batch.tokens)
            foc = losses.focal_contrastive_loss(v, l, model.temperature(),
                                                weights.gamma)
            return losses.total_loss(cap, foc, weights)

        T.backward(total())
        analytic = {n: (params[n].grad.copy() if params[n].grad is not None
                        else np.zeros_like(base[n])) for n in names}

        worst = 0.0
        h = 1e-5
        count = 0
        with T.no_grad():
            for n in names:
                flat = base[n].reshape(-1)
                for i in range(flat.size):
                    hi = h * max(1.0, abs(float(flat[i])))
                    vals = []
                    for sign in (+1.0, -1.0):
                        fb = flat.copy()
                        fb[i] += sign * hi
                        params[n].data = fb.reshape(base[n].shape)
                        vals.append(total().item())
                    params[n].data = base[n]
                    cd = (vals[0] - vals[1]) / (2 * hi)
                    a = float(analytic[n].reshape(-1)[i])
                    err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
                    worst = max(worst, err)
                    count += 1
        return OpReport("end_to_end_two_pass_loss", count, worst)
