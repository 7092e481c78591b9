"""Central finite-difference gradient checking.

All checks run at float64 with step h=1e-5; float32 cannot reach the
tolerances. The comparison metric is max|analytic - numeric| normalized by
the largest numeric gradient magnitude of the same input, which stays
meaningful when individual entries are near zero.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


class GradcheckFailure(AssertionError):
    pass


def numerical_gradient(fn, inputs, wrt, h=1e-5):
    """Central differences of scalar fn w.r.t. inputs[wrt].

    ``fn(*inputs)`` must return a scalar Tensor and must not mutate its
    inputs. Gradient tracking is disabled during probing.
    """
    target = inputs[wrt]
    flat = target.data.reshape(-1)
    grad = np.zeros_like(flat)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            fm = float(fn(*inputs).data)
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(target.shape)


def check_gradients(fn, inputs, h=1e-5, tol=1e-4, names=None):
    """Compare analytic gradients of scalar fn against central differences.

    Returns the worst relative error over all requires_grad inputs; raises
    GradcheckFailure above tol.
    """
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    ad.backward(loss)

    worst = 0.0
    worst_name = None
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        name = names[i] if names else f"input{i}"
        if t.grad is None:
            raise GradcheckFailure(f"{name}: no gradient reached a requires_grad input")
        num = numerical_gradient(fn, inputs, i, h=h)
        scale = max(np.abs(num).max(), np.abs(t.grad).max(), 1e-6)
        rel = np.abs(t.grad - num).max() / scale
        if rel > worst:
            worst, worst_name = rel, name
    if worst > tol:
        raise GradcheckFailure(f"gradient mismatch on {worst_name}: rel err {worst:.3e} > {tol:g}")
    return worst


def random_tensor(rng, shape, requires_grad=True, scale=1.0):
    data = rng.standard_normal(shape) * scale
    return ad.Tensor(data.astype(np.float64), requires_grad=requires_grad)


def _suite_cases():
    """Every differentiable op with a scalar probe; (name, tol, builder).

    Builders take an rng and return (fn, inputs). Probes wrap outputs in
    tanh+sum so gradients stay O(1) and every element matters.
    """
    from . import geometry as geo
    from .contrastive import info_nce
    from .layers import GRUCell

    def probe(x):
        return ad.sum_all(ad.tanh(x))

    def matmul(rng):
        return (
            lambda a, b: probe(ad.matmul(a, b)),
            [random_tensor(rng, (4, 5)), random_tensor(rng, (5, 2))],
        )

    def elementwise(rng):
        def fn(a, b):
            return probe(ad.mul(ad.relu(ad.add(a, b)), ad.sigmoid(ad.sub(a, b))))

        return fn, [random_tensor(rng, (3, 4)), random_tensor(rng, (3, 4))]

    def linear_op(rng):
        return (
            lambda x, w, b: probe(ad.linear(x, w, b)),
            [random_tensor(rng, (3, 4)), random_tensor(rng, (4, 2)), random_tensor(rng, (2,))],
        )

    def conv2d_op(rng):
        return (
            lambda x, w, b: probe(ad.conv2d(x, w, b, stride=1, pad=1)),
            [
                random_tensor(rng, (2, 3, 5, 5)),
                random_tensor(rng, (4, 3, 3, 3), scale=0.5),
                random_tensor(rng, (4,)),
            ],
        )

    def conv2d_strided(rng):
        return (
            lambda x, w, b: probe(ad.conv2d(x, w, b, stride=2, pad=1)),
            [
                random_tensor(rng, (2, 2, 6, 6)),
                random_tensor(rng, (3, 2, 4, 4), scale=0.5),
                random_tensor(rng, (3,)),
            ],
        )

    def conv3d_op(rng):
        return (
            lambda x, w, b: probe(ad.conv3d(x, w, b, stride=1, pad=1)),
            [
                random_tensor(rng, (2, 2, 4, 4, 4)),
                random_tensor(rng, (3, 2, 3, 3, 3), scale=0.5),
                random_tensor(rng, (3,)),
            ],
        )

    def batch_norm_train(rng):
        def fn(x, g, b):
            rm = np.zeros(3)
            rv = np.ones(3)
            return probe(ad.batch_norm(x, g, b, rm, rv, training=True))

        return fn, [
            random_tensor(rng, (4, 3, 3, 3)),
            random_tensor(rng, (3,), scale=0.5),
            random_tensor(rng, (3,)),
        ]

    def batch_norm_eval(rng):
        rm = rng.standard_normal(3) * 0.3
        rv = 1.0 + 0.2 * rng.random(3)

        def fn(x, g, b):
            return probe(ad.batch_norm(x, g, b, rm, rv, training=False))

        return fn, [
            random_tensor(rng, (4, 3, 3, 3)),
            random_tensor(rng, (3,), scale=0.5),
            random_tensor(rng, (3,)),
        ]

    def softmax_ce(rng):
        targets = rng.integers(0, 5, size=6)
        return (
            lambda logits: ad.softmax_cross_entropy(logits, targets),
            [random_tensor(rng, (6, 5))],
        )

    def embedding_op(rng):
        idx = rng.integers(0, 7, size=(3, 4))
        return lambda w: probe(ad.embedding(w, idx)), [random_tensor(rng, (7, 5))]

    def pool_concat_reshape(rng):
        def fn(a, b):
            c = ad.concat([a, b], axis=1)
            c = ad.reshape(c, (2, 6, 4))
            return probe(ad.global_avg_pool(c, 1))

        return fn, [random_tensor(rng, (2, 3, 4)), random_tensor(rng, (2, 3, 4))]

    def film(rng):
        return (
            lambda x, g, b: probe(ad.channel_affine(x, g, b)),
            [
                random_tensor(rng, (2, 4, 3, 3)),
                random_tensor(rng, (2, 4)),
                random_tensor(rng, (2, 4)),
            ],
        )

    def gru_cell(rng):
        seed = int(rng.integers(1 << 31))
        cell = GRUCell(3, 4, np.random.default_rng(seed), dtype=np.float64)
        params = [p for _, p in cell.named_parameters()]
        x = random_tensor(rng, (2, 3), requires_grad=False)
        h = random_tensor(rng, (2, 4), requires_grad=False)

        def fn(*ps):
            return probe(cell.step(x, h))

        return fn, params

    def grid_sample(rng):
        vol = random_tensor(rng, (2, 2, 3, 4, 4))
        grid = ad.Tensor(
            rng.uniform(-1.2, 1.2, size=(2, 3, 4, 4, 3)).astype(np.float64), requires_grad=True
        )
        return lambda v, g: probe(geo.grid_sample_trilinear(v, g)), [vol, grid]

    def transform(rng):
        vol = random_tensor(rng, (1, 2, 4, 4, 4))
        pose = random_tensor(rng, (1, 6), scale=0.3)
        return lambda v, p: probe(geo.transform_volume(v, p)), [vol, pose]

    def nce(rng):
        return (
            lambda a, b: info_nce(a, b, tau=0.5),
            [random_tensor(rng, (5, 4)), random_tensor(rng, (5, 4))],
        )

    return [
        ("matmul", 1e-4, matmul),
        ("elementwise_chain", 1e-4, elementwise),
        ("linear", 1e-4, linear_op),
        ("conv2d", 1e-4, conv2d_op),
        ("conv2d_strided", 1e-4, conv2d_strided),
        ("conv3d", 1e-4, conv3d_op),
        ("batch_norm_train", 1e-4, batch_norm_train),
        ("batch_norm_eval", 1e-4, batch_norm_eval),
        ("softmax_cross_entropy", 1e-4, softmax_ce),
        ("embedding", 1e-4, embedding_op),
        ("pool_concat_reshape", 1e-4, pool_concat_reshape),
        ("film_modulate", 1e-4, film),
        ("gru_cell", 1e-4, gru_cell),
        ("grid_sample_trilinear", 1e-4, grid_sample),
        ("transform_volume", 1e-3, transform),
        ("info_nce", 1e-4, nce),
    ]


def run_gradient_suite(n_seeds=20, seed0=1234, log=None):
    """Finite-difference check of every differentiable op over many seeds.

    Returns (all_passed, results) where results maps op name to the worst
    relative error observed.
    """
    results = {}
    all_ok = True
    for name, tol, builder in _suite_cases():
        worst = 0.0
        status = "ok"
        for k in range(n_seeds):
            rng = np.random.default_rng(seed0 + 7919 * k)
            fn, inputs = builder(rng)
            try:
                rel = check_gradients(fn, inputs, tol=tol)
            except GradcheckFailure as e:
                status = f"FAIL ({e})"
                all_ok = False
                break
            worst = max(worst, rel)
        results[name] = {"worst_rel_err": worst, "tol": tol, "status": status}
        if log:
            log(f"[gradcheck] {name:24s} worst {worst:.3e} (tol {tol:g}) {status}")
    return all_ok, results
