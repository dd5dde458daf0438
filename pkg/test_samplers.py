import itertools

import numpy as np
import pytest
from scipy import integrate
from scipy.special import gammaln, logsumexp

import samplers
from conftest import make_table
from model_core import (
    DomainError,
    Hyperparams,
    ModelState,
    bloc_log_likelihoods,
    sample_alpha_prior,
    sample_dirichlet,
)
from samplers import (
    SamplerSchedule,
    SweepConfig,
    alpha_component_log_target,
    alpha_total_log_target,
    sampler1_log_acceptance,
    sampler2_log_acceptance,
    sweep,
    update_alpha,
    update_alpha_sampler1,
    update_alpha_sampler2,
    update_augmentation,
    update_eta,
    update_z,
)


@pytest.fixture
def separated_table():
    yes_heavy = [[900, 100]] * 3
    no_heavy = [[100, 900]] * 3
    return make_table([yes_heavy, no_heavy, yes_heavy, no_heavy])


@pytest.mark.unit
def test_schedule_alternates():
    config = SweepConfig()
    assert [config.sampler_for(i) for i in range(4)] == [1, 2, 1, 2]
    assert SweepConfig(schedule=SamplerSchedule.SAMPLER2).sampler_for(0) == 2
    assert SweepConfig(schedule="sampler1").sampler_for(1) == 1
    with pytest.raises(DomainError):
        SweepConfig(alpha_total_proposal=(0.0, 1.0))


@pytest.mark.unit
def test_eta_update(rng):
    assert list(update_eta(np.zeros(5, dtype=int), 1, 1.0, rng)) == [1.0]
    eta = update_eta(np.zeros(1000, dtype=int), 2, 1.0, rng)
    assert abs(eta.sum() - 1.0) < 1e-12
    assert eta[0] > 0.99


@pytest.mark.unit
def test_eta_update_matches_dirichlet_mean(rng):
    z = np.array([0] * 30 + [1] * 10)
    draws = np.array([update_eta(z, 3, 1.0, rng) for _ in range(4000)])
    np.testing.assert_allclose(draws.mean(axis=0), np.array([31, 11, 1]) / 43, atol=0.01)


@pytest.mark.unit
def test_z_update_follows_the_likelihood(separated_table, rng):
    alpha = np.zeros((2, 3, 2))
    alpha[0] = [900.0, 100.0]
    alpha[1] = [100.0, 900.0]
    z = update_z(separated_table, alpha, np.array([0.5, 0.5]), rng)
    assert list(z) == [0, 1, 0, 1]
    assert list(update_z(separated_table, alpha[:1], np.array([1.0]), rng)) == [0, 0, 0, 0]


@pytest.mark.unit
def test_z_update_follows_weights_without_data(rng):
    table = make_table(np.zeros((5000, 0, 2), dtype=np.int64))
    z = update_z(table, np.ones((3, 0, 2)), np.array([0.2, 0.3, 0.5]), rng)
    np.testing.assert_allclose(np.bincount(z, minlength=3) / 5000, [0.2, 0.3, 0.5], atol=0.03)


@pytest.mark.unit
def test_gibbs_assignments_match_exact_enumeration():
    table = make_table([[[7, 3]], [[2, 8]], [[5, 5]]])
    alpha = np.array([[[4.0, 2.0]], [[1.5, 5.0]]])
    gamma = 1.0
    loglik = bloc_log_likelihoods(table, alpha)
    rows = np.arange(3)
    assignments = list(itertools.product(range(2), repeat=3))

    def log_joint(z):
        # eta integrated out: Dirichlet-multinomial over the bloc sizes
        sizes = np.bincount(z, minlength=2)
        log_prior = gammaln(2 * gamma) - gammaln(3 + 2 * gamma) + np.sum(gammaln(sizes + gamma) - gammaln(gamma))
        return log_prior + loglik[rows, list(z)].sum()

    log_weights = np.array([log_joint(np.array(z)) for z in assignments])
    exact = np.exp(log_weights - logsumexp(log_weights))

    rng = np.random.default_rng(77)
    z = np.zeros(3, dtype=np.int64)
    counts = np.zeros(len(assignments))
    sweeps = 100000
    for _ in range(sweeps):
        eta = update_eta(z, 2, gamma, rng)
        z = update_z(table, alpha, eta, rng, loglik=loglik)
        counts[z[0] * 4 + z[1] * 2 + z[2]] += 1
    np.testing.assert_allclose(counts / sweeps, exact, atol=0.01)


def _stationarity_table(n_questions):
    """Three municipalities with ten votes each, repeated over identical questions."""
    rows = [[[6, 4]], [[3, 7]], [[5, 5]]]
    counts = np.repeat(np.array(rows), n_questions, axis=1)
    r = np.repeat(np.array([[[3, 1]], [[1, 3]], [[3, 2]]]), n_questions, axis=1)
    return make_table(counts), r


@pytest.mark.unit
def test_sampler1_total_is_stationary_for_its_target():
    hyper = Hyperparams(kappa=1.0, theta=10.0)
    config = SweepConfig(alpha_total_proposal=(1.0, 0.5), schedule=SamplerSchedule.SAMPLER1)
    chains = 400
    table, r = _stationarity_table(chains)
    z = np.zeros(3, dtype=np.int64)
    r_total = 13.0
    n_votes = np.full(3, 10.0)

    def density(total):
        log_target = alpha_total_log_target(
            np.atleast_1d(total), r_total, 3.0, gammaln(total + n_votes).sum(), hyper
        )
        return float(np.exp(log_target[0]))

    norm, _ = integrate.quad(density, 0.0, np.inf, limit=200)
    target_mean = integrate.quad(lambda t: t * density(t), 0.0, np.inf, limit=200)[0] / norm
    target_below = integrate.quad(density, 0.0, target_mean, limit=200)[0] / norm

    rng = np.random.default_rng(5)
    alpha = np.full((1, chains, 2), target_mean / 2.0)
    totals = []
    for iteration in range(800):
        alpha, _ = update_alpha(table, z, r, alpha, hyper, config, rng, sampler=1)
        if iteration >= 200:
            totals.append(alpha[0].sum(axis=-1))
    totals = np.concatenate(totals)
    assert totals.mean() == pytest.approx(target_mean, rel=0.03)
    assert (totals < target_mean).mean() == pytest.approx(target_below, abs=0.02)


@pytest.mark.unit
def test_sampler2_components_are_stationary_for_their_target():
    hyper = Hyperparams(kappa=1.0, theta=10.0)
    config = SweepConfig(schedule=SamplerSchedule.SAMPLER2)
    chains = 400
    table, r = _stationarity_table(chains)
    z = np.zeros(3, dtype=np.int64)
    r_yes, r_no = 7.0, 6.0
    n_votes = np.full(3, 10.0)

    grid = np.linspace(1e-3, 40.0, 1600)
    a0, a1 = np.meshgrid(grid, grid, indexing='ij')
    member_log_gamma = gammaln((a0 + a1)[..., None] + n_votes).sum(axis=-1)
    # component 0 given component 1, times the Gamma(kappa + r_no, theta) factor of component 1
    log_joint = alpha_component_log_target(a0, a1, r_yes, 3.0, member_log_gamma, hyper) + alpha_component_log_target(
        a1, 0.0, r_no, 0.0, 0.0, hyper
    )
    weights = np.exp(log_joint - log_joint.max())
    weights /= weights.sum()
    target_mean = np.array([(weights * a0).sum(), (weights * a1).sum()])

    rng = np.random.default_rng(6)
    alpha = np.tile(target_mean, (1, chains, 1))
    draws = []
    for iteration in range(600):
        alpha, _ = update_alpha(table, z, r, alpha, hyper, config, rng, sampler=2)
        if iteration >= 100:
            draws.append(alpha[0].copy())
    draws = np.concatenate(draws)
    np.testing.assert_allclose(draws.mean(axis=0), target_mean, rtol=0.03)


@pytest.mark.unit
def test_augmentation_respects_bounds(small_table, rng):
    alpha = np.full((2, 3, 2), 2.5)
    z = np.array([0, 1, 0, 1])
    augmented = update_augmentation(small_table, z, alpha, rng)
    assert augmented.r.shape == small_table.counts.shape
    assert augmented.check_bounds(small_table)


@pytest.mark.unit
@pytest.mark.parametrize("chunk", [7, 1 << 22])
def test_sum_of_bernoullis_mean(monkeypatch, rng, chunk):
    monkeypatch.setattr(samplers, "AUGMENTATION_CHUNK", chunk)
    counts = np.array([50] * 4000 + [0, 1])
    alpha = np.full(counts.size, 3.0)
    r = samplers._sum_of_bernoullis(counts, alpha, rng)
    expected = sum(3.0 / (3.0 + m) for m in range(50))
    assert abs(r[:4000].mean() - expected) < 0.1
    assert r[4000] == 0
    assert r[4001] == 1
    assert (r <= counts).all()


@pytest.mark.unit
def test_sampler_log_acceptances_are_antisymmetric(small_table, rng, hyper):
    alpha = np.stack([sample_alpha_prior(hyper, rng, n_questions=3) for _ in range(2)])
    z = np.array([0, 0, 1, 1])
    r = update_augmentation(small_table, z, alpha, rng).r
    forward = sampler1_log_acceptance(0, 1, 4.0, 9.5, small_table, z, r, alpha, hyper)
    backward = sampler1_log_acceptance(0, 1, 9.5, 4.0, small_table, z, r, alpha, hyper)
    assert forward == pytest.approx(-backward)
    config = SweepConfig()
    forward = sampler2_log_acceptance(1, 2, 0, 3.0, 12.0, small_table, z, r, alpha, hyper, config)
    backward = sampler2_log_acceptance(1, 2, 0, 12.0, 3.0, small_table, z, r, alpha, hyper, config)
    assert forward == pytest.approx(-backward)


@pytest.mark.unit
def test_single_cell_updates(small_table, rng, hyper):
    alpha = np.full((2, 3, 2), 5.0)
    z = np.array([0, 0, 1, 1])
    r = update_augmentation(small_table, z, alpha, rng).r
    pair = update_alpha_sampler1(0, 0, small_table, z, r, alpha, hyper, SweepConfig(), rng)
    assert pair.shape == (2,) and (pair > 0).all()
    value = update_alpha_sampler2(1, 2, 1, small_table, z, r, alpha, hyper, SweepConfig(), rng)
    assert value > 0
    with pytest.raises(DomainError):
        update_alpha_sampler1(2, 0, small_table, z, r, alpha, hyper, SweepConfig(), rng)
    with pytest.raises(DomainError):
        update_alpha_sampler2(0, 0, 2, small_table, z, r, alpha, hyper, SweepConfig(), rng)


@pytest.mark.unit
def test_empty_bloc_alpha_follows_the_prior(small_table):
    rng = np.random.default_rng(7)
    hyper = Hyperparams()
    config = SweepConfig(schedule=SamplerSchedule.SAMPLER2)
    z = np.zeros(4, dtype=int)
    alpha = np.full((2, 3, 2), 10.0)
    r = update_augmentation(small_table, z, alpha, rng).r
    draws = []
    for _ in range(3000):
        alpha, _ = update_alpha(small_table, z, r, alpha, hyper, config, rng, sampler=2)
        draws.append(alpha[1].copy())
    draws = np.array(draws)
    # prior mean kappa * theta
    assert abs(draws.mean() - hyper.kappa * hyper.theta) < 1.0


@pytest.mark.unit
def test_sampler1_concentrates_on_the_data(separated_table):
    rng = np.random.default_rng(11)
    hyper = Hyperparams()
    config = SweepConfig(alpha_total_proposal=(1.0, 0.5), schedule=SamplerSchedule.SAMPLER1)
    z = np.array([0, 1, 0, 1])
    alpha = np.full((2, 3, 2), 1.0)
    supports = []
    for i in range(1500):
        r = update_augmentation(separated_table, z, alpha, rng).r
        alpha, _ = update_alpha(separated_table, z, r, alpha, hyper, config, rng, sampler=1)
        if i >= 500:
            supports.append(alpha[..., 0] / alpha.sum(axis=-1))
    mean_support = np.mean(supports, axis=0)
    np.testing.assert_allclose(mean_support[0], 0.9, atol=0.06)
    np.testing.assert_allclose(mean_support[1], 0.1, atol=0.06)


@pytest.mark.unit
def test_sweep_keeps_state_valid_and_is_deterministic(small_table, hyper):
    def run(seed):
        rng = np.random.default_rng(seed)
        state = ModelState(
            eta=np.array([0.5, 0.5]),
            z=np.array([0, 0, 1, 1]),
            alpha=np.stack([sample_alpha_prior(hyper, rng, n_questions=3) for _ in range(2)]),
        )
        for iteration in range(20):
            state, augmented = sweep(small_table, state, None, hyper, SweepConfig(), rng, iteration=iteration)
            state.validate(small_table)
            assert augmented.check_bounds(small_table)
        return state

    first, second = run(3), run(3)
    np.testing.assert_array_equal(first.z, second.z)
    np.testing.assert_array_equal(first.alpha, second.alpha)
    np.testing.assert_array_equal(first.eta, second.eta)


def _batch_mean_error(trace, batches=40):
    means = np.asarray(trace).reshape(batches, -1).mean(axis=1)
    return means.mean(), means.std(ddof=1) / np.sqrt(batches)


@pytest.mark.slow
def test_sweep_alternating_with_fresh_data_keeps_the_prior():
    hyper = Hyperparams(kappa=2.0, theta=2.0)
    rng = np.random.default_rng(2024)
    voters, n_municipalities = 4, 3
    state = ModelState(
        eta=sample_dirichlet(np.full(2, hyper.gamma), rng),
        z=rng.integers(0, 2, size=n_municipalities),
        alpha=np.stack([sample_alpha_prior(hyper, rng, n_questions=1) for _ in range(2)]),
    )
    totals, weights = [], []
    for iteration in range(40000):
        support = rng.beta(state.alpha[state.z, 0, 0], state.alpha[state.z, 0, 1])
        yes = rng.binomial(voters, support)
        table = make_table(np.stack([yes, voters - yes], axis=-1)[:, None, :])
        state, _ = sweep(table, state, None, hyper, SweepConfig(), rng, iteration=iteration)
        totals.append(state.alpha[0, 0].sum())
        weights.append(state.eta[0])

    mean, error = _batch_mean_error(totals)
    assert abs(mean - 2 * hyper.kappa * hyper.theta) < 3 * error
    mean, error = _batch_mean_error(weights)
    assert abs(mean - 0.5) < 3 * error
