import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipforge import tensor as T
from lipforge.attacks import (PAPER_EPSILONS, AttackConfig, AttackError, epsilon_sweep, fgsm, loss_and_grad, pgd,
                              pgd_margin, random_search_attack, run_attack, transfer_attack)
from lipforge.network import Dense, Layer, Model, insert_forge, mlp
from lipforge.tensor import ContractError, Tensor
from lipforge.train import calibrate_forge
from oracles import grid_search_max


def logistic(w=2.0):
    """Two logits (0, w*x): a 1-D logistic model in softmax form."""
    return Model([Dense(np.array([[0.0], [w]]), np.zeros(2))], (1,), 2)


def linear2(W, b=None):
    W = np.asarray(W, dtype=float)
    return Model([Dense(W, np.zeros(W.shape[0]) if b is None else b)], (W.shape[1],), W.shape[0])


class Bilinear(Layer):
    """Logits (-x1*x2, x1*x2) built from tape ops."""

    tag = "bilinear"

    def output_shape(self, in_shape):
        return (2,)

    def __call__(self, x):
        a = T.matmul(x, Tensor([[1.0], [0.0]]))
        b = T.matmul(x, Tensor([[0.0], [1.0]]))
        return T.matmul(T.mul(a, b), Tensor([[-1.0, 1.0]]))


@pytest.fixture(scope="module")
def trained():
    from lipforge.data import synth_blobs
    from lipforge.train import TrainConfig, train

    full = synth_blobs(3, 10, 400, 2.0, seed=1)
    tr, te = full.split_off(100)
    model = train(mlp(10, (16,), 3, seed=0), tr, TrainConfig(epochs=8, lr=0.05)).model
    return model, te


def feasible(x_adv, x, eps, lo=0.0, hi=1.0):
    return np.all(np.abs(x_adv - x) <= eps + 1e-12) and np.all(x_adv >= lo) and np.all(x_adv <= hi)


class TestFGSM:
    def test_logistic_closed_form(self):
        m = logistic()
        _, _, g = loss_and_grad(m, np.array([[0.0]]), np.array([1]))
        assert g[0, 0] == pytest.approx(-1.0, rel=1e-15)
        assert fgsm(m, np.array([[0.0]]), [1], 0.1)[0, 0] == 0.0
        assert fgsm(m, np.array([[0.5]]), [1], 0.1)[0, 0] == pytest.approx(0.4)

    def test_zero_epsilon(self, trained):
        model, te = trained
        np.testing.assert_array_equal(fgsm(model, te.inputs, te.labels, 0.0), te.inputs)

    def test_linear_two_class_direction(self):
        W = np.array([[1.0, -2.0, 0.5, 3.0], [-1.0, 1.0, 2.0, 3.5]])
        m = linear2(W)
        x = np.full((1, 4), 0.5)
        eps = 0.1
        expected = x + eps * np.sign(W[1] - W[0])
        np.testing.assert_allclose(fgsm(m, x, [0], eps), expected, rtol=0, atol=1e-15)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_gradient_names_sample(self):
        m = linear2([[0.0], [1e308]], np.array([0.0, 1e308]))
        with pytest.raises(AttackError, match="sample 1"):
            fgsm(m, np.array([[0.0], [1.0]]), [0, 0], 0.1)

    def test_negative_epsilon(self):
        with pytest.raises(ContractError):
            fgsm(logistic(), np.zeros((1, 1)), [0], -0.1)


class TestPGD:
    def test_one_step_equals_fgsm(self, trained):
        model, te = trained
        eps = 0.05
        cfg = AttackConfig(epsilon=eps, steps=1, step_size=eps)
        np.testing.assert_array_equal(pgd(model, te.inputs, te.labels, cfg), fgsm(model, te.inputs, te.labels, eps))

    def test_loss_at_least_fgsm_two_class(self):
        rng = np.random.default_rng(0)
        m = mlp(5, (8,), 2, seed=3)
        x = rng.uniform(size=(60, 5))
        y = rng.integers(0, 2, 60)
        for seed in range(3):
            cfg = AttackConfig(epsilon=0.1, steps=7, restarts=2, seed=seed)
            lp = T.softmax_cross_entropy(m.forward(pgd(m, x, y, cfg)), y, "none").data
            lf = T.softmax_cross_entropy(m.forward(fgsm(m, x, y, 0.1)), y, "none").data
            assert np.all(lp >= lf)

    def test_fooled_or_loss_dominates_fgsm(self, trained):
        model, te = trained
        x, y = te.inputs, te.labels
        cfg = AttackConfig(epsilon=0.1, steps=5, restarts=2)
        xp, xf = pgd(model, x, y, cfg), fgsm(model, x, y, 0.1)
        lp = T.softmax_cross_entropy(model.forward(xp), y, "none").data
        lf = T.softmax_cross_entropy(model.forward(xf), y, "none").data
        fooled_p, fooled_f = model.predict(xp) != y, model.predict(xf) != y
        assert np.all(fooled_p >= fooled_f)
        same = fooled_p == fooled_f
        assert np.all(lp[same] >= lf[same])

    def test_bilinear_matches_grid_search(self):
        m = Model([Bilinear()], (2,), 2)
        eps, pitch = 0.2, 0.2 / 50
        centers = np.array([[0.5, 0.5], [0.3, 0.7], [0.15, 0.9], [0.6, 0.25]])
        cfg = AttackConfig(epsilon=eps, steps=50, restarts=4, seed=0)
        x_adv = pgd(m, centers, np.zeros(4, dtype=int), cfg)

        def loss(p):
            return T.softmax_cross_entropy(m.forward(p[None]), [0]).item()

        for c, xa in zip(centers, x_adv):
            best, arg = grid_search_max(loss, c, eps, pitch, 0.0, 1.0)
            # within two grid pitches of the optimum, measured through the local slope
            slope = np.abs(loss_and_grad(m, arg[None], np.array([0]))[2]).sum()
            assert loss(xa) >= best - 2 * pitch * slope

    def test_feasible_and_deterministic(self, trained):
        model, te = trained
        cfg = AttackConfig(epsilon=0.07, steps=5, restarts=3, seed=4)
        a = pgd(model, te.inputs, te.labels, cfg)
        b = pgd(model, te.inputs, te.labels, cfg)
        np.testing.assert_array_equal(a, b)
        assert feasible(a, te.inputs, 0.07)

    def test_init_is_a_candidate(self, trained):
        model, te = trained
        x, y = te.inputs, te.labels
        strong = pgd(model, x, y, AttackConfig(epsilon=0.2, steps=20))
        seeded = pgd(model, x, y, AttackConfig(epsilon=0.2, steps=1), init=strong)
        fooled_strong = model.predict(strong) != y
        assert fooled_strong.any()
        assert np.all((model.predict(seeded) != y)[fooled_strong])

    def test_config_validation(self):
        with pytest.raises(ContractError):
            AttackConfig(kind="square")
        with pytest.raises(ContractError):
            AttackConfig(epsilon=-1)
        with pytest.raises(ContractError):
            AttackConfig(steps=0)
        with pytest.raises(ContractError):
            AttackConfig(restarts=0)
        assert AttackConfig(epsilon=0.1, steps=10).alpha == pytest.approx(0.025)


class TestMargin:
    def test_already_misclassified_returned_unchanged(self):
        m = logistic()
        x = np.array([[0.9]])
        np.testing.assert_array_equal(pgd_margin(m, x, [0], AttackConfig(epsilon=0.3)), x)

    def test_zero_epsilon_success_iff_clean_error(self, trained):
        model, te = trained
        res = run_attack(model, te.inputs, te.labels, AttackConfig(kind="pgd_margin", epsilon=0.0))
        np.testing.assert_array_equal(res.success, model.predict(te.inputs) != te.labels)

    @pytest.mark.parametrize("x0,y", [(0.3, 1), (0.7, 0), (0.1, 0)])
    def test_margin_and_ce_gradient_signs_agree(self, x0, y):
        m = logistic(-3.0)
        x = np.array([[x0]])
        _, _, gc = loss_and_grad(m, x, np.array([y]), "ce")
        _, _, gm = loss_and_grad(m, x, np.array([y]), "margin", kappa=100.0)
        assert np.sign(gc[0, 0]) == np.sign(gm[0, 0]) != 0


class TestRandomSearch:
    def test_zero_budget(self, trained):
        model, te = trained
        np.testing.assert_array_equal(
            random_search_attack(model, te.inputs, te.labels, AttackConfig(kind="random_search", steps=0)), te.inputs)

    def test_deterministic(self, trained):
        model, te = trained
        cfg = AttackConfig(kind="random_search", epsilon=0.1, steps=20, seed=9)
        a = random_search_attack(model, te.inputs, te.labels, cfg)
        np.testing.assert_array_equal(a, random_search_attack(model, te.inputs, te.labels, cfg))
        assert feasible(a, te.inputs, 0.1)

    def test_linear_2d_finds_fgsm_corner(self):
        rng = np.random.default_rng(0)
        W = np.array([[1.0, -1.0], [-0.5, 2.0]])
        m = linear2(W)
        x = rng.uniform(0.3, 0.7, size=(200, 2))
        y = m.predict(x)
        eps = 0.15
        fg = run_attack(m, x, y, AttackConfig(kind="fgsm", epsilon=eps))
        rs = run_attack(m, x, y, AttackConfig(kind="random_search", epsilon=eps, steps=10_000))
        # only four sign patterns exist, so the search reaches the same corner
        assert rs.robust_accuracy == pytest.approx(fg.robust_accuracy, abs=1e-12)


class TestTransferAndSweep:
    def test_transfer_to_self(self, trained):
        model, te = trained
        cfg = AttackConfig(epsilon=0.05)
        direct = run_attack(model, te.inputs, te.labels, cfg).robust_accuracy
        assert transfer_attack(model, model, te.inputs, te.labels, cfg).robust_accuracy == direct

    def test_transfer_to_zero_ratio_forge(self, trained):
        model, te = trained
        forged = calibrate_forge(insert_forge(model), te.inputs, c_ratio=0.0)
        cfg = AttackConfig(epsilon=0.05)
        direct = run_attack(model, te.inputs, te.labels, cfg).robust_accuracy
        assert transfer_attack(model, forged, te.inputs, te.labels, cfg).robust_accuracy == direct

    def test_transfer_zero_epsilon_is_clean(self, trained):
        model, te = trained
        res = transfer_attack(model, model, te.inputs, te.labels, AttackConfig(epsilon=0.0))
        assert res.robust_accuracy == res.clean_accuracy

    def test_transfer_shape_mismatch(self, trained):
        model, te = trained
        with pytest.raises(ContractError):
            transfer_attack(model, mlp(4, (3,), 3), te.inputs, te.labels, AttackConfig())

    def test_sweep_zero_row_is_clean(self, trained):
        model, te = trained
        for r in epsilon_sweep(model, te.inputs, te.labels, ("fgsm", "pgd", "pgd_margin"), [0.0]):
            assert r.robust_accuracy == r.clean_accuracy

    def test_sweep_nesting_and_fgsm_dominance(self, trained):
        model, te = trained
        res = epsilon_sweep(model, te.inputs, te.labels, ("fgsm", "pgd", "pgd_margin"), PAPER_EPSILONS)
        n = len(PAPER_EPSILONS)
        f, p, c = res[:n], res[n:2 * n], res[2 * n:]
        for col in (p, c):
            acc = [r.robust_accuracy for r in col]
            assert all(b <= a for a, b in zip(acc, acc[1:]))
        assert all(b.robust_accuracy <= a.robust_accuracy for a, b in zip(f, p))
        assert all(r.robust_accuracy <= r.clean_accuracy for r in res)

    def test_sweep_grid_validation(self, trained):
        model, te = trained
        with pytest.raises(ContractError):
            epsilon_sweep(model, te.inputs, te.labels, ("pgd",), [])
        with pytest.raises(ContractError):
            epsilon_sweep(model, te.inputs, te.labels, ("pgd",), [0.1, 0.1])


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["fgsm", "pgd", "pgd_margin", "random_search"]), st.floats(0, 0.5), st.integers(0, 99))
def test_every_attack_is_feasible(kind, eps, seed):
    rng = np.random.default_rng(seed)
    m = mlp(4, (6,), 3, seed=seed)
    x = rng.uniform(size=(12, 4))
    y = rng.integers(0, 3, 12)
    res = run_attack(m, x, y, AttackConfig(kind=kind, epsilon=eps, steps=3, restarts=2, seed=seed), keep=True)
    assert feasible(res.x_adv, x, eps)
    assert res.robust_accuracy <= res.clean_accuracy
