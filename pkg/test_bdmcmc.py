import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit, logsumexp

from bdmcmc import (
    AnchoredAlphaProposal,
    BDEvent,
    BirthProposal,
    ChainTrace,
    DeathRateBalance,
    EventKind,
    PosteriorSample,
    RunConfig,
    bd_process,
    birth_move,
    chain_generators,
    death_move,
    death_rate,
    effective_k,
    gelman_rubin,
    initial_state,
    log_death_rate,
    log_death_rates,
    posterior_K,
    posterior_mode,
    run_chain,
    time_at_k,
)
from conftest import make_table
from model_core import (
    DomainError,
    Hyperparams,
    LikelihoodCache,
    ModelState,
    bloc_log_likelihoods,
    log_alpha_prior,
    sample_alpha_prior,
)
from samplers import SweepConfig
from simulation import SimSpec, simulate_dataset


def blank_table(n):
    return make_table(np.zeros((n, 0, 2), dtype=np.int64))


def state_with_sizes(sizes, n_questions=0):
    K = len(sizes)
    z = np.repeat(np.arange(K), sizes)
    return ModelState(eta=np.full(K, 1.0 / K), z=z, alpha=np.ones((K, n_questions, 2)))


def sample(state, wait=1.0, iteration=0):
    return PosteriorSample(state=state, wait_time=wait, iteration=iteration)


def total_variation(time_by_k, reference):
    total = sum(time_by_k.values())
    ks = set(time_by_k) | set(reference)
    return 0.5 * sum(abs(time_by_k.get(k, 0.0) / total - reference.get(k, 0.0)) for k in ks)


def truncated_poisson(lam, k_max):
    ks = np.arange(1, k_max + 1)
    pmf = stats.poisson.pmf(ks, lam)
    return dict(zip(ks.tolist(), (pmf / pmf.sum()).tolist()))


@pytest.mark.unit
def test_run_config_validation():
    config = RunConfig(iterations=100, burn_in=10, thin=5, bd_time_per_iteration=0.5)
    assert config.sample_wait_time == pytest.approx(2.5)
    assert config.is_retained(10) and config.is_retained(15)
    assert not config.is_retained(9) and not config.is_retained(11)
    assert RunConfig(iterations=2, burn_in=0, death_rate_balance="uniform").death_rate_balance == DeathRateBalance.UNIFORM
    assert RunConfig(iterations=2, burn_in=0).birth_proposal == BirthProposal.DATA
    assert RunConfig(iterations=2, burn_in=0, death_rate_balance="uniform").birth_proposal == BirthProposal.PRIOR
    assert RunConfig(iterations=2, burn_in=0, birth_proposal="prior").birth_proposal == BirthProposal.PRIOR
    for bad in (dict(iterations=10, burn_in=10), dict(thin=0), dict(chains=0), dict(bd_time_per_iteration=0.0),
                dict(death_rate_balance="uniform", birth_proposal="data")):
        with pytest.raises(DomainError):
            RunConfig(**bad)


@pytest.mark.unit
def test_single_bloc_never_dies():
    state = state_with_sizes([3])
    assert death_rate(blank_table(3), state, 0, Hyperparams()) == 0.0
    assert log_death_rate(blank_table(3), state, 0, Hyperparams()) == -math.inf
    with pytest.raises(DomainError):
        death_rate(blank_table(3), state, 1, Hyperparams())


@pytest.mark.unit
def test_uniform_death_rate_of_an_empty_bloc():
    table = blank_table(4)
    state = ModelState(eta=[0.4, 0.4, 0.2], z=[0, 1, 0, 1], alpha=np.ones((3, 0, 2)))
    hyper = Hyperparams(lam=10.0, beta_birth=10.0)
    # beta / lambda = 1, and (1 - eta_k)^-N for the survivors
    rate = death_rate(table, state, 2, hyper, balance=DeathRateBalance.UNIFORM)
    assert rate == pytest.approx(0.8 ** -4)


@pytest.mark.unit
def test_exact_death_rate_adds_the_birth_proposal_terms():
    table = blank_table(4)
    state = ModelState(eta=[0.4, 0.4, 0.2], z=[0, 1, 0, 1], alpha=np.ones((3, 0, 2)))
    hyper = Hyperparams(lam=10.0, beta_birth=10.0)
    expected = 0.8 ** -4 * 0.5 / 0.8 * (2.0 / 3.0) ** 4
    assert death_rate(table, state, 2, hyper) == pytest.approx(expected)


@pytest.mark.unit
def test_uniform_death_rate_is_symmetric_for_equal_weights():
    table = blank_table(3)
    state = ModelState(eta=[0.5, 0.5], z=[0, 0, 0], alpha=np.ones((2, 0, 2)))
    hyper = Hyperparams(lam=4.0, beta_birth=4.0)
    for k in (0, 1):
        assert death_rate(table, state, k, hyper, balance=DeathRateBalance.UNIFORM) == pytest.approx(8.0)


@pytest.mark.unit
def test_zero_birth_rate_disables_deaths():
    state = state_with_sizes([2, 2])
    assert death_rate(blank_table(4), state, 0, Hyperparams(beta_birth=0.0)) == 0.0


@pytest.mark.unit
def test_death_rate_uses_the_cache_consistently(small_table, rng, hyper):
    alpha = np.stack([sample_alpha_prior(hyper, rng, n_questions=3) for _ in range(3)])
    state = ModelState(eta=[0.5, 0.3, 0.2], z=[0, 0, 1, 2], alpha=alpha)
    cache = LikelihoodCache(small_table, alpha)
    for k in range(3):
        assert log_death_rate(small_table, state, k, hyper, cache=cache) == pytest.approx(
            log_death_rate(small_table, state, k, hyper)
        )


@pytest.mark.unit
def test_birth_draws_alpha_from_the_prior(small_table, hyper):
    state = state_with_sizes([2, 2], n_questions=3)
    born = birth_move(state, hyper, np.random.default_rng(5))
    reference = np.random.default_rng(5)
    expected_alpha = sample_alpha_prior(hyper, reference, n_questions=3)
    expected_weight = reference.random()
    np.testing.assert_allclose(born.alpha[-1], expected_alpha)
    np.testing.assert_allclose(born.alpha[:2], state.alpha)
    assert born.eta[-1] == pytest.approx(expected_weight)
    np.testing.assert_allclose(born.eta[:2], state.eta * (1 - expected_weight))
    born.validate(small_table)


@pytest.mark.unit
def test_birth_moves_a_quarter_of_municipalities_from_three_blocs(rng):
    z = rng.integers(0, 3, size=20000)
    state = ModelState(eta=np.full(3, 1 / 3), z=z, alpha=np.ones((3, 0, 2)))
    born = birth_move(state, Hyperparams(), rng)
    moved = born.z == 3
    assert abs(moved.mean() - 0.25) < 0.02
    np.testing.assert_array_equal(born.z[~moved], z[~moved])


@pytest.mark.unit
def test_birth_is_rejected_at_k_max(rng):
    assert birth_move(state_with_sizes([1, 1, 1]), Hyperparams(k_max=3), rng) is None


@pytest.mark.unit
def test_death_move_compacts_and_rescales(rng):
    state = ModelState(eta=[0.3, 0.7], z=[0, 1, 1, 0], alpha=np.stack([np.full((1, 2), 2.0), np.full((1, 2), 5.0)]))
    survivor = death_move(state, 0, rng)
    assert list(survivor.eta) == [1.0]
    assert list(survivor.z) == [0, 0, 0, 0]
    np.testing.assert_array_equal(survivor.alpha, np.full((1, 1, 2), 5.0))
    with pytest.raises(DomainError):
        death_move(survivor, 0, rng)


@pytest.mark.unit
def test_death_move_follows_reassignment_weights(rng):
    state = ModelState(eta=[0.2, 0.3, 0.5], z=[0, 1, 2, 1, 0], alpha=np.ones((3, 0, 2)))
    log_weights = np.tile([-1000.0, 0.0], (5, 1))
    survivor = death_move(state, 1, rng, log_weights=log_weights)
    # bloc 2 became index 1 and took every orphan
    assert list(survivor.z) == [0, 1, 1, 1, 0]
    np.testing.assert_allclose(survivor.eta, [0.2 / 0.7, 0.5 / 0.7])


@pytest.mark.unit
def test_bd_process_without_births_stays_put(rng):
    state = state_with_sizes([2])
    final, events = bd_process(blank_table(2), state, Hyperparams(beta_birth=0.0), 3.0, rng)
    assert final.K == 1
    assert events == [BDEvent(3.0, EventKind.END, 1, 1, 3.0)]
    with pytest.raises(DomainError):
        bd_process(blank_table(2), state, Hyperparams(), 0.0, rng)


@pytest.mark.unit
def test_bd_event_log_is_consistent(small_table, rng, hyper):
    state = initial_state(small_table, hyper, rng, blocs=2)
    trace = ChainTrace()
    cache = LikelihoodCache(small_table, state.alpha)
    final, events = bd_process(small_table, state, hyper, 5.0, rng, cache=cache, trace=trace)
    times = [event.time for event in events]
    assert times == sorted(times)
    assert events[-1].kind == EventKind.END and events[-1].k_before == final.K
    assert sum(event.wait for event in events) == pytest.approx(5.0)
    k = state.K
    for event in events:
        assert event.k_before == k
        assert event.k_after - event.k_before in (-1, 0, 1)
        k = event.k_after
    assert trace.births - trace.deaths == final.K - state.K
    np.testing.assert_allclose(cache.matrix, LikelihoodCache(small_table, final.alpha).matrix)
    final.validate(small_table)


@pytest.mark.unit
def test_time_at_k_tallies_waits():
    events = [
        BDEvent(0.5, EventKind.BIRTH, 1, 2, 0.5),
        BDEvent(2.0, EventKind.DEATH, 2, 1, 1.5),
        BDEvent(3.0, EventKind.END, 1, 1, 1.0),
    ]
    assert time_at_k(events) == {1: 1.5, 2: 1.5}


@pytest.mark.unit
def test_exact_bd_process_recovers_the_prior_on_k(empty_table):
    hyper = Hyperparams(lam=3.0, beta_birth=3.0)
    rng = np.random.default_rng(2024)
    state = state_with_sizes([2])
    _, events = bd_process(empty_table, state, hyper, 1500.0, rng)
    assert total_variation(time_at_k(events), truncated_poisson(3.0, hyper.k_max)) < 0.1


@pytest.mark.slow
@pytest.mark.parametrize("data_births", [False, True])
def test_exact_bd_process_recovers_a_wide_prior_on_k(empty_table, data_births):
    hyper = Hyperparams(lam=10.0, beta_birth=10.0)
    rng = np.random.default_rng(99)
    proposal = AnchoredAlphaProposal(empty_table, hyper) if data_births else None
    trace = ChainTrace()
    state = state_with_sizes([2])
    # 100 stretches of 1000 units so the event logs never pile up
    for _ in range(100):
        state, _ = bd_process(empty_table, state, hyper, 1000.0, rng, trace=trace, proposal=proposal)
    assert sum(trace.time_at_k.values()) == pytest.approx(1e5)
    assert total_variation(dict(trace.time_at_k), truncated_poisson(10.0, hyper.k_max)) < 0.05


@pytest.mark.unit
def test_initial_state_respects_bounds(small_table, rng):
    hyper = Hyperparams(lam=4.2, k_max=3)
    assert initial_state(small_table, hyper, rng).K == 3
    state = initial_state(small_table, Hyperparams(), rng, blocs=2)
    assert state.K == 2
    state.validate(small_table)


@pytest.mark.unit
def test_run_chain_is_deterministic(small_table, hyper):
    config = RunConfig(iterations=6, burn_in=2, thin=2, initial_blocs=2)

    def run(seed):
        trace = ChainTrace()
        samples = run_chain(small_table, hyper, SweepConfig(), config, np.random.default_rng(seed), trace=trace)
        return samples, trace

    first, first_trace = run(8)
    second, _ = run(8)
    assert [s.iteration for s in first] == [2, 4]
    assert all(s.wait_time == pytest.approx(2.0) for s in first)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.state.z, b.state.z)
        np.testing.assert_array_equal(a.state.alpha, b.state.alpha)
        assert a.log_likelihood == b.log_likelihood
    assert len(first_trace.log_likelihood) == 6
    # only the four post-burn-in stretches count
    assert sum(first_trace.time_at_k.values()) == pytest.approx(4.0)


@pytest.mark.unit
def test_run_chain_keeps_one_sample_when_burn_in_ends_last(small_table, hyper, rng):
    config = RunConfig(iterations=3, burn_in=2, thin=5, initial_blocs=1)
    samples = run_chain(small_table, hyper, SweepConfig(), config, rng)
    assert len(samples) == 1
    assert samples[0].iteration == 2
    samples[0].state.validate(small_table)


@pytest.mark.unit
def test_posterior_k_is_wait_weighted():
    samples = [sample(state_with_sizes([1, 1, 1]), wait=1.0), sample(state_with_sizes([1, 1, 1, 1]), wait=3.0)]
    assert posterior_K(samples) == pytest.approx({3: 0.25, 4: 0.75})


@pytest.mark.unit
def test_posterior_k_filters_small_blocs():
    state = state_with_sizes([5, 5, 5, 5, 2])
    assert effective_k(state, 5) == 4
    assert posterior_K([sample(state)], min_bloc_size=5) == {4: 1.0}
    assert posterior_K([sample(state)]) == {5: 1.0}
    assert effective_k(state_with_sizes([1, 1]), 10) == 1
    with pytest.raises(DomainError):
        posterior_K([])
    with pytest.raises(DomainError):
        posterior_K([sample(state)], min_bloc_size=-1)
    with pytest.raises(DomainError):
        sample(state, wait=0.0)


@pytest.mark.unit
def test_posterior_mode_breaks_ties_low():
    assert posterior_mode({2: 0.4, 3: 0.4, 4: 0.2}) == 2
    assert posterior_mode({2: 0.1, 5: 0.9}) == 5


@pytest.mark.unit
def test_chain_generators_are_reproducible_and_distinct():
    first = [g.random() for g in chain_generators(42, 3)]
    again = [g.random() for g in chain_generators(42, 3)]
    assert first == again
    assert len(set(first)) == 3


@pytest.mark.unit
def test_gelman_rubin():
    rng = np.random.default_rng(4)
    assert math.isnan(gelman_rubin([[1.0, 2.0, 3.0, 4.0]]))
    assert math.isnan(gelman_rubin([[1.0, 2.0, 3.0], [2.0, 3.0, 4.0]]))
    assert gelman_rubin(rng.normal(size=(4, 1000))) < 1.05
    assert gelman_rubin([rng.normal(size=500), rng.normal(10.0, 1.0, size=500)]) > 1.5
    assert gelman_rubin([[1.0] * 6, [1.0] * 6]) == 1.0
    assert gelman_rubin([[1.0] * 6, [2.0] * 6]) == math.inf
    # longer chains are trimmed to their last common stretch
    assert np.isfinite(gelman_rubin([rng.normal(size=300), rng.normal(size=200)]))


@pytest.mark.slow
def test_recovers_two_well_separated_blocs():
    spec = SimSpec(K_true=2, N=40, Q=12, C=1000, delta=0.01, seed=17)
    table, _ = simulate_dataset(spec)
    config = RunConfig(iterations=800, burn_in=300, thin=2)
    samples = run_chain(table, Hyperparams(), SweepConfig(), config, np.random.default_rng(3))
    distribution = posterior_K(samples, min_bloc_size=3)
    assert posterior_mode(distribution) == 2


def log_target(table, state, hyper):
    """Joint log density of K, eta, alpha and z given the votes, up to a constant."""
    loglik = bloc_log_likelihoods(table, state.alpha)
    rows = np.arange(table.n_municipalities)
    return float(
        stats.poisson.logpmf(state.K, hyper.lam)
        + stats.dirichlet.logpdf(state.eta, np.full(state.K, hyper.gamma))
        + log_alpha_prior(state.alpha, hyper)
        + np.sum(np.log(state.eta[state.z]) + loglik[rows, state.z])
    )


@pytest.mark.unit
def test_uniform_death_rate_of_an_occupied_bloc():
    state = ModelState(eta=[0.5, 0.25, 0.25], z=[0, 1, 2, 2], alpha=np.ones((3, 0, 2)))
    hyper = Hyperparams(lam=10.0, beta_birth=10.0)
    # each member contributes (0.75 / 0.75 / 2) / 0.25 = 2; both survivors pay 1 / 0.75
    rate = death_rate(blank_table(4), state, 2, hyper, balance=DeathRateBalance.UNIFORM)
    assert rate == pytest.approx(4.0 / 0.75 ** 2)


@pytest.mark.unit
def test_data_birth_death_rate_without_questions():
    table = blank_table(4)
    state = ModelState(eta=[0.4, 0.4, 0.2], z=[0, 1, 0, 1], alpha=np.ones((3, 0, 2)))
    hyper = Hyperparams(lam=10.0, beta_birth=10.0)
    proposal = AnchoredAlphaProposal(table, hyper)
    assert death_rate(table, state, 2, hyper, proposal=proposal) == pytest.approx(0.5 / 0.8)
    with pytest.raises(DomainError):
        log_death_rates(table, state, hyper, balance=DeathRateBalance.UNIFORM, proposal=proposal)
    with pytest.raises(DomainError):
        bd_process(table, state, hyper, 1.0, np.random.default_rng(0),
                   balance=DeathRateBalance.UNIFORM, proposal=proposal)


@pytest.mark.unit
@pytest.mark.parametrize("data_births", [False, True])
@pytest.mark.parametrize("reverse_assignment", [0, 1])
def test_death_rate_balances_the_birth_it_reverses(small_table, data_births, reverse_assignment):
    hyper = Hyperparams(kappa=1.5, gamma=1.5, lam=4.0, beta_birth=2.5)
    rng = np.random.default_rng(31)
    alpha = np.stack([sample_alpha_prior(hyper, rng, n_questions=3) for _ in range(2)])
    proposal = AnchoredAlphaProposal(small_table, hyper) if data_births else None
    newborn = proposal.sample(rng) if data_births else sample_alpha_prior(hyper, rng, n_questions=3)
    w = 0.3
    before = ModelState(eta=[0.6, 0.4], z=[0, reverse_assignment, 1, 1], alpha=alpha)
    after = ModelState(eta=[0.42, 0.28, 0.3], z=[0, 2, 1, 1], alpha=np.concatenate([alpha, newborn[None]]))

    loglik = bloc_log_likelihoods(small_table, after.alpha)
    log_proposal = log_alpha_prior(newborn, hyper)
    if data_births:
        log_proposal += proposal.log_ratio(newborn[None])[0]
        incumbents = np.log1p(-w) + logsumexp(np.log(before.eta) + loglik[:, :2], axis=1)
        move = expit(np.log(w) + loglik[:, 2] - incumbents)
    else:
        move = np.full(4, 1.0 / 3.0)
    moved = after.z == 2
    # new weight is uniform; eta_j -> eta_j (1 - w) has Jacobian (1 - w)
    log_birth = log_proposal + np.sum(np.where(moved, np.log(move), np.log1p(-move))) - np.log1p(-w)
    orphans = np.log(before.eta) + loglik[:, :2]
    log_reassign = np.sum((orphans[np.arange(4), before.z] - logsumexp(orphans, axis=1))[moved])

    expected = (
        math.log(hyper.beta_birth) - math.log(3)
        + log_target(small_table, before, hyper) + log_birth
        - log_target(small_table, after, hyper) - log_reassign
    )
    assert log_death_rate(small_table, after, 2, hyper, proposal=proposal) == pytest.approx(expected, abs=1e-8)


@pytest.mark.unit
@pytest.mark.parametrize("balance,data_births", [
    (DeathRateBalance.UNIFORM, False),
    (DeathRateBalance.EXACT, False),
    (DeathRateBalance.EXACT, True),
])
def test_death_rates_follow_the_blocs_under_relabelling(small_table, hyper, balance, data_births):
    rng = np.random.default_rng(8)
    alpha = np.stack([sample_alpha_prior(hyper, rng, n_questions=3) for _ in range(3)])
    state = ModelState(eta=[0.5, 0.3, 0.2], z=[0, 0, 1, 2], alpha=alpha)
    perm = np.array([2, 0, 1])
    relabel = np.argsort(perm)
    permuted = ModelState(eta=state.eta[perm], z=relabel[state.z], alpha=alpha[perm])
    proposal = AnchoredAlphaProposal(small_table, hyper) if data_births else None
    rates = log_death_rates(small_table, state, hyper, balance=balance, proposal=proposal)
    permuted_rates = log_death_rates(small_table, permuted, hyper, balance=balance, proposal=proposal)
    np.testing.assert_allclose(permuted_rates, rates[perm], rtol=1e-10)
    for k in range(3):
        assert log_death_rate(small_table, state, k, hyper, balance=balance, proposal=proposal) == pytest.approx(rates[k])


@pytest.mark.unit
def test_anchored_proposal_density_ratio(small_table):
    hyper = Hyperparams(kappa=1.5, theta=4.0)
    proposal = AnchoredAlphaProposal(small_table, hyper, concentration=12.0, prior_weight=0.1)
    rng = np.random.default_rng(2)
    alpha = np.stack([proposal.sample(rng) for _ in range(6)])
    assert alpha.shape == (6, 3, 2) and (alpha > 0).all()
    total = alpha.sum(axis=-1)
    mean = alpha[..., 0] / total
    anchored = stats.beta.pdf(mean[:, None, :], proposal.a[None], proposal.b[None]).prod(axis=2).mean(axis=1)
    totals = (stats.gamma.pdf(total, 2 * hyper.kappa, scale=hyper.theta) / total).prod(axis=1)
    prior = stats.gamma.pdf(alpha, hyper.kappa, scale=hyper.theta).prod(axis=(1, 2))
    expected = np.log((0.1 * prior + 0.9 * anchored * totals) / prior)
    np.testing.assert_allclose(proposal.log_ratio(alpha), expected, rtol=1e-9)


@pytest.mark.unit
def test_anchored_proposal_validation(small_table, hyper):
    with pytest.raises(DomainError):
        AnchoredAlphaProposal(small_table, hyper, concentration=0.0)
    with pytest.raises(DomainError):
        AnchoredAlphaProposal(small_table, hyper, prior_weight=0.0)
    empty = AnchoredAlphaProposal(blank_table(3), hyper)
    assert empty.sample(np.random.default_rng(0)).shape == (0, 2)
    np.testing.assert_array_equal(empty.log_ratio(np.ones((2, 0, 2))), [0.0, 0.0])


@pytest.mark.unit
def test_data_birth_moves_municipalities_by_responsibility(small_table, hyper):
    alpha = sample_alpha_prior(hyper, np.random.default_rng(1), n_questions=3)[None]
    state = ModelState(eta=[1.0], z=np.zeros(4, dtype=int), alpha=alpha)
    proposal = AnchoredAlphaProposal(small_table, hyper)
    born = birth_move(state, hyper, np.random.default_rng(6), proposal=proposal)

    reference = np.random.default_rng(6)
    newborn = proposal.sample(reference)
    w = reference.random()
    loglik = bloc_log_likelihoods(small_table, np.concatenate([alpha, newborn[None]]))
    move = expit(np.log(w) + loglik[:, 1] - np.log1p(-w) - loglik[:, 0])
    expected_z = np.where(reference.random(4) < move, 1, 0)
    np.testing.assert_allclose(born.alpha[-1], newborn)
    np.testing.assert_array_equal(born.z, expected_z)
    assert born.eta[-1] == pytest.approx(w)


@pytest.mark.unit
def test_data_birth_process_recovers_the_prior_on_k(empty_table):
    hyper = Hyperparams(lam=3.0, beta_birth=3.0)
    proposal = AnchoredAlphaProposal(empty_table, hyper)
    _, events = bd_process(empty_table, state_with_sizes([2]), hyper, 1500.0, np.random.default_rng(7), proposal=proposal)
    assert total_variation(time_at_k(events), truncated_poisson(3.0, hyper.k_max)) < 0.1


@pytest.mark.unit
def test_data_bd_process_keeps_the_cache_in_step(small_table, hyper, rng):
    state = initial_state(small_table, hyper, rng, blocs=2)
    cache = LikelihoodCache(small_table, state.alpha)
    proposal = AnchoredAlphaProposal(small_table, hyper)
    final, events = bd_process(small_table, state, hyper, 5.0, rng, cache=cache, proposal=proposal)
    assert sum(event.wait for event in events) == pytest.approx(5.0)
    np.testing.assert_allclose(cache.matrix, LikelihoodCache(small_table, final.alpha).matrix)
    final.validate(small_table)


@pytest.mark.unit
def test_initial_state_separates_distinct_supports(small_table, hyper):
    state = initial_state(small_table, hyper, np.random.default_rng(0), blocs=2)
    assert state.z[0] == state.z[1] != state.z[2] == state.z[3]
    np.testing.assert_allclose(np.sort(state.eta), [0.5, 0.5])
    # moment matching puts each bloc's mean on its cluster's mean support
    own = state.alpha[state.z[0]]
    np.testing.assert_allclose(own[:, 0] / own.sum(axis=1), small_table.observed_support[:2].mean(axis=0))


@pytest.mark.unit
def test_initial_state_caps_blocs_at_distinct_supports(hyper, rng):
    table = make_table([[[5, 5]], [[5, 5]], [[9, 1]]])
    state = initial_state(table, hyper, rng, blocs=3)
    assert state.K == 2
    state.validate(table)
    assert initial_state(blank_table(3), Hyperparams(lam=2.5), rng).K == 3


@pytest.mark.unit
def test_trace_skips_time_while_tally_is_off():
    trace = ChainTrace(tally_time=False)
    trace.record([BDEvent(0.5, EventKind.BIRTH, 1, 2, 0.5), BDEvent(1.0, EventKind.END, 2, 2, 0.5)])
    assert trace.births == 1
    assert not trace.time_at_k
