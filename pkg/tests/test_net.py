import numpy as np
import pytest

from trajdist import net
from trajdist.errors import ValidationError


def fd_gradient(params, x, y, loss_kind, h=1e-5):
    """Central finite differences of the batch-mean loss over every parameter."""
    theta = params.flatten()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        lp = net.batch_loss(net.forward(params.unflatten(tp), x), y, loss_kind)
        lm = net.batch_loss(net.forward(params.unflatten(tm), x), y, loss_kind)
        grad[i] = (lp - lm) / (2 * h)
    return grad


def kink_safe(params, x, margin=1e-4):
    """True when no backbone pre-activation sits within `margin` of zero, so
    finite differences cannot cross a rectifier kink."""
    trace = net.forward(params, x)
    return all(np.min(np.abs(pre)) > margin for pre in trace.pre) if trace.pre else True


def make_config(seed, input_dim=5, hidden=(7, 6), n_classes=3, n_samples=4):
    """Seeded params + batch, re-seeding until finite differences are safe."""
    for s in range(seed, seed + 100):
        rng = np.random.default_rng(s)
        params = net.init_params(input_dim, hidden, n_classes, rng)
        for _w, b in params.backbone:
            b += rng.normal(scale=0.1, size=b.shape)
        params.head_b += rng.normal(scale=0.1, size=params.head_b.shape)
        x = rng.normal(size=(n_samples, input_dim))
        if kink_safe(params, x):
            y = net.one_hot(rng.integers(0, n_classes, size=n_samples), n_classes)
            return params, x, y
    raise AssertionError("no kink-safe configuration found")


class TestForward:
    def test_zero_params_uniform(self):
        params = net.ModelParams(
            backbone=[(np.zeros((4, 3)), np.zeros(4))],
            head_w=np.zeros((5, 4)),
            head_b=np.zeros(5),
        )
        trace = net.forward(params, np.array([1.0, -2.0, 3.0]))
        assert np.allclose(trace.logits, 0.0)
        assert np.allclose(trace.probs, 0.2)

    def test_linear_single_layer(self):
        rng = np.random.default_rng(0)
        head_w = rng.normal(size=(4, 3))
        head_b = rng.normal(size=4)
        params = net.ModelParams(backbone=[], head_w=head_w, head_b=head_b)
        e1 = np.array([1.0, 0.0, 0.0])
        trace = net.forward(params, e1)
        assert np.allclose(trace.logits[0], head_w[:, 0] + head_b)

    def test_probs_normalized(self):
        params, x, _ = make_config(1)
        trace = net.forward(params, x)
        assert np.max(np.abs(np.sum(trace.probs, axis=1) - 1.0)) <= 1e-12
        assert np.all(trace.probs >= 0.0) and np.all(trace.probs <= 1.0)

    def test_dimension_mismatch(self):
        params, _, _ = make_config(2)
        with pytest.raises(ValidationError):
            net.forward(params, np.ones(3))


class TestLosses:
    def test_ce_perfect(self):
        y = np.array([0.0, 1.0, 0.0])
        assert net.ce_loss(y, y) <= 1e-11

    def test_ce_uniform(self):
        p = np.full(4, 0.25)
        y = np.array([1.0, 0.0, 0.0, 0.0])
        assert abs(net.ce_loss(p, y) - np.log(4)) <= 1e-12

    def test_ce_matches_direct_sum(self):
        rng = np.random.default_rng(3)
        p = rng.dirichlet(np.ones(6))
        y = rng.dirichlet(np.ones(6))
        direct = -sum(float(yi) * float(np.log(max(pi, 1e-12))) for pi, yi in zip(p, y))
        assert abs(net.ce_loss(p, y) - direct) <= 1e-12

    def test_dice_onehot(self):
        y = np.array([1.0, 0.0, 0.0])
        # matched class: 1 - 2/(1+1) = 0; each unmatched contributes 1
        assert abs(net.dice_loss(y, y) - 2.0) <= 1e-12

    def test_dice_uniform_two_class(self):
        p = np.array([0.5, 0.5])
        assert abs(net.dice_loss(p, p) - 1.0) <= 1e-12

    def test_dice_range(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            c = int(rng.integers(2, 6))
            p = rng.dirichlet(np.ones(c))
            y = rng.dirichlet(np.ones(c))
            val = net.dice_loss(p, y)
            assert 0.0 <= val <= c


class TestBackward:
    def test_ce_head_gradient_closed_form(self):
        params, x, y = make_config(5)
        trace = net.forward(params, x[:1])
        grads = net.backward(params, trace, y[:1], "ce")
        p = trace.probs[0]
        expected_w = np.outer(p - y[0], trace.z[0])
        assert np.max(np.abs(grads.head_w - expected_w)) <= 1e-12
        assert np.max(np.abs(grads.head_b - (p - y[0]))) <= 1e-12

    def test_zero_input_backbone(self):
        rng = np.random.default_rng(6)
        params = net.init_params(4, (5,), 3, rng)
        params.backbone[0] = (params.backbone[0][0], np.abs(rng.normal(size=5)) + 0.1)
        x = np.zeros((1, 4))
        y = net.one_hot(np.array([1]), 3)
        trace = net.forward(params, x)
        grads = net.backward(params, trace, y, "ce")
        dw, db = grads.backbone[0]
        assert np.allclose(dw, 0.0)
        assert np.any(db != 0.0)

    @pytest.mark.parametrize("loss_kind", ["ce", "dice"])
    def test_finite_differences(self, loss_kind):
        params, x, y = make_config(7)
        trace = net.forward(params, x)
        analytic = net.backward(params, trace, y, loss_kind).flatten()
        numeric = fd_gradient(params, x, y, loss_kind)
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert np.max(np.abs(analytic - numeric) / denom) <= 1e-4

    @pytest.mark.parametrize("loss_kind", ["ce", "dice"])
    def test_finite_differences_two_hidden_32(self, loss_kind):
        params, x, y = make_config(11, input_dim=8, hidden=(32, 32), n_classes=4)
        trace = net.forward(params, x)
        analytic = net.backward(params, trace, y, loss_kind).flatten()
        numeric = fd_gradient(params, x, y, loss_kind)
        denom = np.maximum(np.abs(numeric), 1e-6)
        assert np.max(np.abs(analytic - numeric) / denom) <= 1e-4

    def test_softmax_shift_invariance(self):
        params, x, y = make_config(8)
        shifted = params.clone()
        shifted.head_b = shifted.head_b + 3.7
        t0 = net.forward(params, x)
        t1 = net.forward(shifted, x)
        assert np.max(np.abs(t0.probs - t1.probs)) <= 1e-10
        for kind in ("ce", "dice"):
            l0 = net.batch_loss(t0, y, kind)
            l1 = net.batch_loss(t1, y, kind)
            assert abs(l0 - l1) <= 1e-10
            g0 = net.backward(params, t0, y, kind).flatten()
            g1 = net.backward(shifted, t1, y, kind).flatten()
            assert np.max(np.abs(g0 - g1)) <= 1e-10


class TestPerSampleGradients:
    def test_single_sample_matches_backward(self):
        params, x, y = make_config(9)
        g = net.per_sample_head_gradients(params, x[:1], y[:1], "ce")
        trace = net.forward(params, x[:1])
        full = net.backward(params, trace, y[:1], "ce")
        assert np.max(np.abs(g[0].vector - full.head_flat())) <= 1e-12

    def test_duplicated_sample(self):
        params, x, y = make_config(10)
        xx = np.vstack([x[0], x[0]])
        yy = np.vstack([y[0], y[0]])
        g = net.per_sample_head_gradients(params, xx, yy, "ce")
        assert np.array_equal(g[0].vector, g[1].vector)

    def test_mean_matches_batch_gradient(self):
        params, x, y = make_config(12)
        mat = net.head_gradient_matrix(net.forward(params, x), y, "ce")
        batch = net.backward(params, net.forward(params, x), y, "ce").head_flat()
        assert np.max(np.abs(mat.mean(axis=0) - batch)) <= 1e-10

    def test_closed_form_layout(self):
        params, x, y = make_config(13)
        trace = net.forward(params, x)
        mat = net.head_gradient_matrix(trace, y, "ce")
        i = 2
        p, z = trace.probs[i], trace.z[i]
        expected = np.concatenate([np.outer(p - y[i], z).ravel(), p - y[i]])
        assert np.array_equal(mat[i], expected)

    def test_empty_batch(self):
        params, _, _ = make_config(14)
        with pytest.raises(ValidationError):
            net.per_sample_head_gradients(params, np.zeros((0, 5)), np.zeros((0, 3)))


class TestFactorizationCheck:
    def test_uniform_logits_zero(self):
        params = net.ModelParams(
            backbone=[], head_w=np.zeros((3, 4)), head_b=np.zeros(3)
        )
        lhs, rhs = net.ce_factorization_check(params, np.ones(4))
        assert lhs <= 1e-12 and rhs <= 1e-12

    def test_hand_case(self):
        # c=2, z=(1,0); choose logits giving p=(0.9, 0.1)
        logit_gap = np.log(9.0)
        params = net.ModelParams(
            backbone=[],
            head_w=np.array([[logit_gap, 0.0], [0.0, 0.0]]),
            head_b=np.zeros(2),
        )
        lhs, rhs = net.ce_factorization_check(params, np.array([1.0, 0.0]))
        assert abs(lhs - 0.8) <= 1e-12
        assert abs(rhs - 0.8) <= 1e-12

    def test_seeded_identity(self):
        for seed in range(30):
            rng = np.random.default_rng(seed)
            params = net.init_params(5, (6,), 4, rng)
            x = rng.normal(size=5)
            lhs, rhs = net.ce_factorization_check(params, x)
            assert abs(lhs - rhs) <= 1e-9 * max(abs(rhs), 1e-12)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params, _, _ = make_config(15)
        path = tmp_path / "model.ckpt"
        net.save_checkpoint(params, path)
        loaded = net.load_checkpoint(path)
        assert np.array_equal(params.flatten(), loaded.flatten())
        # re-save gives identical bytes
        path2 = tmp_path / "model2.ckpt"
        net.save_checkpoint(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_no_hidden_layers(self, tmp_path):
        rng = np.random.default_rng(16)
        params = net.ModelParams(
            backbone=[], head_w=rng.normal(size=(3, 5)), head_b=rng.normal(size=3)
        )
        path = tmp_path / "flat.ckpt"
        net.save_checkpoint(params, path)
        loaded = net.load_checkpoint(path)
        assert np.array_equal(params.flatten(), loaded.flatten())

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("not a checkpoint\n")
        with pytest.raises(ValidationError):
            net.load_checkpoint(path)
