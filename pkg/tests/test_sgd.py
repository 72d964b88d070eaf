import numpy as np
import pytest

from prmf.core import DivergenceError, HyperParams, SparseRatings, SymmetricSparse
from prmf.sgd import EpochSchedule, init_factors, pmf_train, run_latent_phase, sgd_step

from conftest import random_ratings, random_symmetric_sparse


def _params(**kw):
    base = dict(d=2, lambda_u=0.0, lambda_v=0.0, alpha=0.0, beta=0.0, gamma=0.0,
                learn_rate=0.1, rho=1.0, sgd_epochs=1, admm_iters=1, max_iter=1, seed=0)
    base.update(kw)
    return HyperParams(**base)


def dense_latent_objective(ratings, U, V, theta_dense, lam_u, lam_v, alpha):
    """Straight-line objective used as the finite-difference oracle."""
    total = 0.0
    for i, j, r in zip(ratings.users, ratings.items, ratings.values):
        total += 0.5 * (r - float(U[i] @ V[j])) ** 2
    total += 0.5 * lam_u * float(np.sum(U * U))
    total += 0.5 * lam_v * float(np.sum(V * V))
    total += 0.5 * alpha * float(np.trace(U.T @ theta_dense @ U))
    return total


class TestSgdStep:
    def test_hand_computed_no_coupling(self):
        U = np.array([[0.0, 0.0]])
        V = np.array([[1.0, 1.0]])
        params = _params(learn_rate=0.1)
        sgd_step((0, 0, 2.0), U, V, None, params)
        # delta = 2: U_i moves to 0.2*[1,1]; V_j unchanged since old U_i was 0
        assert np.allclose(U, [[0.2, 0.2]])
        assert np.allclose(V, [[1.0, 1.0]])

    def test_identity_coupling_shrinks_row(self):
        # Theta = I, alpha = 1, zero residual: U_i <- 0.9 U_i
        U = np.array([[2.0, -1.0]])
        V = np.array([[0.5, 1.0]])
        r = float(U[0] @ V[0])
        params = _params(alpha=1.0, learn_rate=0.1)
        theta = SymmetricSparse.identity(1)
        expected = 0.9 * U[0].copy()
        sgd_step((0, 0, r), U, V, theta, params)
        assert np.allclose(U[0], expected)

    def test_simultaneous_update_semantics(self):
        # V's update must read the pre-update U row
        U = np.array([[1.0]])
        V = np.array([[1.0]])
        sgd_step((0, 0, 2.0), U, V, None, _params(d=1, learn_rate=0.5))
        assert U[0, 0] == pytest.approx(1.5)
        assert V[0, 0] == pytest.approx(1.5)  # sequential-update would give 1.75

    def test_pure_gradient_descent_on_half_delta_squared(self, rng):
        # alpha = lambda = 0: exact step along the analytic gradient
        U = rng.normal(size=(3, 2))
        V = rng.normal(size=(4, 2))
        params = _params(learn_rate=0.05)
        i, j, r = 1, 2, 3.7
        delta = r - float(U[i] @ V[j])
        expected_u = U[i] + 0.05 * delta * V[j]
        expected_v = V[j] + 0.05 * delta * U[i]
        sgd_step((i, j, r), U, V, None, params)
        assert np.allclose(U[i], expected_u, atol=1e-15)
        assert np.allclose(V[j], expected_v, atol=1e-15)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_error_carries_triple(self):
        U = np.array([[1e308, 0.0]])
        V = np.array([[1e308, 0.0]])
        with pytest.raises(DivergenceError) as err:
            sgd_step((0, 0, 1.0), U, V, None, _params(learn_rate=1.0))
        assert err.value.triple == (0, 0, 1.0)

    def test_step_matches_finite_difference_gradient(self, rng):
        # the step direction on the touched rows equals -grad of the
        # objective restricted to D = {triple}, checked by central
        # differences (h = 1e-6)
        h = 1e-6
        for _ in range(10):
            m, n, d = rng.integers(2, 6), rng.integers(2, 6), rng.integers(1, 4)
            params = _params(
                d=int(d), lambda_u=float(rng.uniform(0, 0.3)),
                lambda_v=float(rng.uniform(0, 0.3)),
                alpha=float(rng.uniform(0, 0.5)), learn_rate=1.0,
            )
            theta = random_symmetric_sparse(rng, int(m), density=0.6, scale=0.4)
            U = rng.normal(size=(m, d))
            V = rng.normal(size=(n, d))
            i, j = int(rng.integers(m)), int(rng.integers(n))
            r = float(rng.uniform(1, 5))
            single = SparseRatings(int(m), int(n), [i], [j], [r])
            theta_dense = theta.to_dense()

            U2, V2 = U.copy(), V.copy()
            sgd_step((i, j, r), U2, V2, theta, params)
            step_u = U2[i] - U[i]
            step_v = V2[j] - V[j]

            grad_u = np.zeros(d)
            grad_v = np.zeros(d)
            for f in range(int(d)):
                up, un = U.copy(), U.copy()
                up[i, f] += h
                un[i, f] -= h
                grad_u[f] = (
                    dense_latent_objective(single, up, V, theta_dense,
                                           params.lambda_u, params.lambda_v, params.alpha)
                    - dense_latent_objective(single, un, V, theta_dense,
                                             params.lambda_u, params.lambda_v, params.alpha)
                ) / (2 * h)
                vp, vn = V.copy(), V.copy()
                vp[j, f] += h
                vn[j, f] -= h
                grad_v[f] = (
                    dense_latent_objective(single, U, vp, theta_dense,
                                           params.lambda_u, params.lambda_v, params.alpha)
                    - dense_latent_objective(single, U, vn, theta_dense,
                                             params.lambda_u, params.lambda_v, params.alpha)
                ) / (2 * h)
            got = np.concatenate([step_u, step_v])
            want = -np.concatenate([grad_u, grad_v])
            assert np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12) < 1e-4

    def test_summed_steps_match_full_gradient_on_permutation_instance(self, rng):
        # one rating per user and per item: summed per-triple directions
        # equal the full objective gradient exactly (repeated ratings would
        # double-count the regularizer and coupling pulls)
        h = 1e-6
        m = n = 3
        d = 2
        perm = rng.permutation(n)
        users = np.arange(m)
        items = perm[:m]
        values = rng.uniform(1, 5, size=m)
        ratings = SparseRatings(m, n, users, items, values)
        params = _params(d=d, lambda_u=0.2, lambda_v=0.15, alpha=0.3, learn_rate=1.0)
        theta = random_symmetric_sparse(rng, m, density=0.8, scale=0.3)
        theta_dense = theta.to_dense()
        U = rng.normal(size=(m, d))
        V = rng.normal(size=(n, d))

        summed_u = np.zeros_like(U)
        summed_v = np.zeros_like(V)
        for triple in zip(users, items, values):
            U2, V2 = U.copy(), V.copy()
            sgd_step(tuple(triple), U2, V2, theta, params)
            summed_u += U2 - U
            summed_v += V2 - V

        def obj(Um, Vm):
            return dense_latent_objective(ratings, Um, Vm, theta_dense,
                                          params.lambda_u, params.lambda_v, params.alpha)

        grad_u = np.zeros_like(U)
        for i in range(m):
            for f in range(d):
                up, un = U.copy(), U.copy()
                up[i, f] += h
                un[i, f] -= h
                grad_u[i, f] = (obj(up, V) - obj(un, V)) / (2 * h)
        grad_v = np.zeros_like(V)
        for j in range(n):
            for f in range(d):
                vp, vn = V.copy(), V.copy()
                vp[j, f] += h
                vn[j, f] -= h
                grad_v[j, f] = (obj(U, vp) - obj(U, vn)) / (2 * h)

        got = np.concatenate([summed_u.ravel(), summed_v.ravel()])
        want = -np.concatenate([grad_u.ravel(), grad_v.ravel()])
        assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-4


class TestRunLatentPhase:
    def test_empty_train_leaves_factors_unchanged(self):
        train = SparseRatings(3, 3, [], [], [])
        params = _params()
        U, V = init_factors(3, 3, 2, 0)
        U0, V0 = U.copy(), V.copy()
        run_latent_phase(train, U, V, None, params, EpochSchedule(1, 0.1))
        assert np.array_equal(U, U0) and np.array_equal(V, V0)

    def test_bitwise_deterministic(self, rng):
        train = random_ratings(rng, 5, 6, density=0.5)
        params = _params(lambda_u=0.05, lambda_v=0.05, alpha=0.2, seed=11)
        theta = random_symmetric_sparse(rng, 5, scale=0.2)
        results = []
        for _ in range(2):
            U, V = init_factors(5, 6, 2, params.seed)
            run_latent_phase(train, U, V, theta, params, EpochSchedule(3, 0.02))
            results.append((U.copy(), V.copy()))
        assert np.array_equal(results[0][0], results[1][0])
        assert np.array_equal(results[0][1], results[1][1])

    def test_kernel_matches_sequential_sgd_steps(self, rng):
        # the compiled epoch must equal a sequence of per-triple reference
        # steps in the same order
        train = random_ratings(rng, 6, 7, density=0.4)
        params = _params(d=3, lambda_u=0.07, lambda_v=0.03, alpha=0.4, seed=5)
        theta = random_symmetric_sparse(rng, 6, density=0.5, scale=0.3)

        U1, V1 = init_factors(6, 7, 3, params.seed)
        run_latent_phase(train, U1, V1, theta, params,
                         EpochSchedule(1, 0.05, shuffle=False))

        U2, V2 = init_factors(6, 7, 3, params.seed)
        for idx in range(len(train)):
            triple = (int(train.users[idx]), int(train.items[idx]),
                      float(train.values[idx]))
            sgd_step(triple, U2, V2, theta, params, learn_rate=0.05)
        assert np.allclose(U1, U2, atol=1e-12)
        assert np.allclose(V1, V2, atol=1e-12)

    def test_objective_trace_non_increasing_on_tiny_instance(self):
        # 3 users, 3 items, 6 ratings, no coupling, small rate
        users = [0, 0, 1, 1, 2, 2]
        items = [0, 1, 1, 2, 0, 2]
        values = [4.0, 3.0, 2.0, 5.0, 1.0, 4.0]
        train = SparseRatings(3, 3, users, items, values)
        params = _params(d=2, lambda_u=0.01, lambda_v=0.01, seed=3)
        U, V = init_factors(3, 3, 2, params.seed)
        _, _, trace = run_latent_phase(train, U, V, None, params,
                                       EpochSchedule(50, 0.005))
        diffs = np.diff(trace)
        assert np.all(diffs <= 1e-9)

    def test_rows_without_ratings_never_modified(self, rng):
        train = SparseRatings(4, 3, [0, 1], [0, 1], [3.0, 4.0])
        params = _params(alpha=0.5, seed=2)
        theta = random_symmetric_sparse(rng, 4, density=1.0, scale=0.5)
        U, V = init_factors(4, 3, 2, params.seed)
        u_frozen = U[[2, 3]].copy()
        v_frozen = V[[2]].copy()
        run_latent_phase(train, U, V, theta, params, EpochSchedule(5, 0.1))
        assert np.array_equal(U[[2, 3]], u_frozen)
        assert np.array_equal(V[[2]], v_frozen)

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_divergence_reports_epoch_and_triple(self, rng):
        train = random_ratings(rng, 3, 3, density=0.9)
        params = _params(seed=1)
        U, V = init_factors(3, 3, 2, 1)
        with pytest.raises(DivergenceError) as err:
            run_latent_phase(train, U, V, None, params, EpochSchedule(50, 1e6))
        assert err.value.triple is not None
        assert err.value.phase == "sgd"


class TestEpochSchedule:
    def test_validation(self):
        with pytest.raises(ValueError):
            EpochSchedule(1, 0.0)
        with pytest.raises(ValueError):
            EpochSchedule(1, 0.1, decay=0.0)

    def test_decay(self):
        s = EpochSchedule(3, 0.1, decay=0.5)
        assert s.rate_at(0) == 0.1
        assert s.rate_at(2) == pytest.approx(0.025)


class TestPmfTrain:
    def test_equals_latent_phase_with_empty_theta(self, rng):
        train = random_ratings(rng, 4, 5, density=0.5)
        params = _params(lambda_u=0.05, lambda_v=0.05, alpha=0.7, seed=9,
                         sgd_epochs=4)
        U1, V1, _ = pmf_train(train, params)
        U2, V2 = init_factors(4, 5, 2, 9)
        run_latent_phase(train, U2, V2, SymmetricSparse(4), params)
        assert np.array_equal(U1, U2)
        assert np.array_equal(V1, V2)

    def test_recovers_exactly_factorizable_ratings(self):
        # R built from known rank-2 factors: training error -> ~0
        U_true = np.array([[1.0, 0.5], [0.2, 1.0]])
        V_true = np.array([[1.0, 1.0], [0.5, 2.0]])
        R = U_true @ V_true.T
        users, items = np.meshgrid([0, 1], [0, 1], indexing="ij")
        train = SparseRatings(2, 2, users.ravel(), items.ravel(), R.ravel())
        params = _params(d=2, learn_rate=0.05, seed=4, sgd_epochs=500)
        U, V, _ = pmf_train(train, params)
        preds = np.einsum("ij,ij->i", U[train.users], V[train.items])
        rmse = float(np.sqrt(np.mean((preds - train.values) ** 2)))
        assert rmse < 0.01
