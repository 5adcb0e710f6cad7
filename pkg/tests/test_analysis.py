import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from commands.utils import nn_core
from commands.utils.analysis import (GapScope, analyze, class_centroids, compare_reports, confidence_entropy_stats,
                                     domain_gap, domain_gap_table, export_histograms, feature_drift,
                                     head_euclidean_distance, histogram, improvement_ratios, intra_class_distance,
                                     spearman_rho)
from commands.utils.data_synth import DomainDataset, Role
from commands.utils.exceptions import InputError, ShapeError, ZeroDenominatorError


@pytest.fixture
def identity() -> nn_core.MlpParams:
    return nn_core.MlpParams([np.eye(2)], [np.zeros(2)], 'relu')


@pytest.fixture
def domains() -> list[DomainDataset]:
    return [
        DomainDataset('source-1', Role.SOURCE_VAL, np.array([[1.0, 1.0], [3.0, 3.0], [5.0, 5.0]]), np.array([0, 0, 1])),
        DomainDataset('source-2', Role.SOURCE_VAL, np.array([[2.0, 4.0]]), np.array([0])),
        DomainDataset('target', Role.TARGET, np.array([[1.0, 0.0], [5.0, 7.0]]), np.array([0, 1]))
    ]


def test_centroids(identity, domains):
    table = class_centroids(identity, domains, classes=[0, 1])

    assert table.centroids[('source-1', 0)] == pytest.approx([2.0, 2.0])
    assert table.missing == [('source-2', 1)]
    assert table.domains() == ['source-1', 'source-2', 'target']


def test_domain_gap_averages_every_cell(identity, domains):
    table = class_centroids(identity, domains)

    # Source pairs: class 0 only, (0 + 4) / 2
    assert domain_gap(table, GapScope.SOURCE_PAIRS) == pytest.approx(2.0)
    # Target pairs: 2.5 and 2.0 against source-1, 8.5 against source-2
    assert domain_gap(table, 'target-vs-sources') == pytest.approx(13 / 3)
    assert domain_gap_table(table)['source-1|target'] == pytest.approx(2.25)


def test_domain_gap_needs_a_shared_class(identity):
    table = class_centroids(identity, [
        DomainDataset('source-1', Role.SOURCE_VAL, np.ones((1, 2)), np.array([0])),
        DomainDataset('source-2', Role.SOURCE_VAL, np.ones((1, 2)), np.array([1]))
    ])

    with pytest.raises(InputError):
        domain_gap(table)


def test_intra_class_distance(identity, domains):
    # class 0 spreads 1.0 per dimension around (2, 2), class 1 is a single point
    assert intra_class_distance(identity, domains[0]) == pytest.approx(0.5)


def test_feature_drift(identity, domains):
    shifted = nn_core.MlpParams([np.eye(2)], [np.array([1.0, 2.0])], 'relu')

    assert feature_drift(identity, identity, domains[0]) == 0.0
    assert feature_drift(shifted, identity, domains[0]) == pytest.approx(5.0)
    with pytest.raises(ShapeError):
        feature_drift(identity, nn_core.init_mlp([2, 3], seed=0), domains[0])


def test_head_distance():
    a = nn_core.HeadParams(np.zeros((2, 2)), np.zeros(2))
    b = nn_core.HeadParams(np.array([[3.0, 0.0], [0.0, 0.0]]), np.array([4.0, 1.0]))

    assert head_euclidean_distance(a, b) == pytest.approx(3.0)
    assert head_euclidean_distance(b, b) == 0.0


def test_confidence_stats(identity):
    state = nn_core.ModelState(identity, nn_core.HeadParams(np.eye(2), np.zeros(2)))
    target = DomainDataset('target', Role.TARGET, np.array([[5.0, 0.0], [0.0, 0.0]]), np.array([0, 2]))

    stats = confidence_entropy_stats(state, target, (0, 1))

    assert stats.known_max_confidence == pytest.approx(math.exp(5) / (math.exp(5) + 1))
    assert stats.unknown_max_confidence == pytest.approx(0.5)
    assert stats.unknown_entropy == pytest.approx(math.log(2))
    assert not stats.flags


def test_improvement_ratios():
    imp1, imp2 = improvement_ratios(0.6, 0.5, 0.45, 0.5)

    assert imp1 == pytest.approx(20.0)
    assert imp2 == pytest.approx(-10.0)
    with pytest.raises(ZeroDenominatorError):
        improvement_ratios(0.6, 0.0, 0.4, 0.5)


def test_spearman_matches_scipy():
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(100):
        n = int(rng.integers(3, 12))
        xs, ys = rng.integers(0, 4, size=n), rng.normal(size=n)
        if len(set(xs)) == 1:
            continue
        assert spearman_rho(xs, ys) == pytest.approx(spearmanr(xs, ys).statistic, abs=1e-10)
        checked += 1
    assert checked > 90


def test_spearman_edge_cases():
    assert spearman_rho([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert math.isnan(spearman_rho([1, 1, 1], [1, 2, 3]))
    with pytest.raises(InputError):
        spearman_rho([1], [2])
    with pytest.raises(ShapeError):
        spearman_rho([1, 2], [1, 2, 3])


def test_histogram_clamps_out_of_range_values():
    hist = histogram([-0.1, 0.0, 0.5, 1.0, 1.2], bins=2)

    assert hist.counts == [2, 3]
    assert hist.edges == pytest.approx([0.0, 0.5, 1.0])
    assert hist.clamped == 2
    assert len(histogram(np.linspace(0, 1, 7)).counts) == 20


def test_analysis_of_the_starting_point(bundle, prepared, tmp_path):
    report = analyze(prepared.state(), bundle)

    assert report.head_distance == 0.0
    assert all(value == 0.0 for value in report.feature_drift.values())
    assert report.model_acc == report.lp_acc == report.f0_trained_head_acc
    assert report.imp1 == pytest.approx(0.0) and report.imp2 == pytest.approx(0.0)
    assert set(report.intra_class_distance) == {'source-1', 'source-2', 'source-3', 'target'}
    assert report.domain_gap_target >= 0 and report.domain_gap_sources >= 0
    assert sum(report.histograms['known'].counts) == len(bundle.target_known())
    assert sum(report.histograms['unknown'].counts) == len(bundle.target_open())
    assert 'conventions' in report.to_dict()

    frame = export_histograms(report, tmp_path)
    assert len(frame) == 40
    assert (tmp_path / 'histograms.svg').read_text().lstrip().startswith('<svg')

    table = compare_reports({'lp': report})
    assert table.loc['head_distance', 'lp'] == 0.0


def _random_domains(rng, dim):
    domains = []
    for domain_id, role in (('source-1', Role.SOURCE_VAL), ('source-2', Role.SOURCE_VAL),
                            ('source-3', Role.SOURCE_VAL), ('target', Role.TARGET)):
        classes = rng.choice(4, size=int(rng.integers(1, 5)), replace=False)
        y = rng.choice(classes, size=int(rng.integers(len(classes), 12)))
        y[:len(classes)] = classes
        domains.append(DomainDataset(domain_id, role, rng.normal(scale=3.0, size=(len(y), dim)), y))
    return domains


def _loop_centroid(features, labels, c):
    rows = [features[i] for i in range(len(labels)) if labels[i] == c]
    return [sum(row[k] for row in rows) / len(rows) for k in range(len(features[0]))]


def _loop_mse(a, b):
    return sum((a[k] - b[k]) ** 2 for k in range(len(a))) / len(a)


def _loop_gap(f, domains, pairs):
    embedded = {domain.domain_id: (nn_core.mlp_forward(f, domain.x).tolist(), domain.y.tolist()) for domain in domains}
    cells = []
    for a, b in pairs:
        features_a, labels_a = embedded[a]
        features_b, labels_b = embedded[b]
        for c in set(labels_a) & set(labels_b):
            cells.append(_loop_mse(_loop_centroid(features_a, labels_a, c), _loop_centroid(features_b, labels_b, c)))
    return cells


def test_domain_gap_matches_a_loop_oracle():
    rng = np.random.default_rng(11)
    checked = 0
    for seed in range(100):
        dim = int(rng.integers(2, 5))
        f = nn_core.init_mlp([dim, int(rng.integers(2, 6))], seed=seed, activation='tanh')
        domains = _random_domains(rng, dim)
        table = class_centroids(f, domains)
        sources = ['source-1', 'source-2', 'source-3']

        for scope, pairs in ((GapScope.SOURCE_PAIRS, [(a, b) for i, a in enumerate(sources) for b in sources[i + 1:]]),
                             (GapScope.TARGET_VS_SOURCES, [('target', s) for s in sources])):
            cells = _loop_gap(f, domains, pairs)
            if not cells:
                with pytest.raises(InputError):
                    domain_gap(table, scope)
                continue
            assert domain_gap(table, scope) == pytest.approx(sum(cells) / len(cells), abs=1e-10)
            checked += 1
    assert checked > 150


def test_intra_class_distance_matches_a_loop_oracle():
    rng = np.random.default_rng(12)
    for seed in range(100):
        dim = int(rng.integers(2, 5))
        f = nn_core.init_mlp([dim, int(rng.integers(2, 6))], seed=seed, activation='tanh')
        dataset = _random_domains(rng, dim)[0]
        features, labels = nn_core.mlp_forward(f, dataset.x).tolist(), dataset.y.tolist()

        per_class = []
        for c in sorted(set(labels)):
            centroid = _loop_centroid(features, labels, c)
            members = [features[i] for i in range(len(labels)) if labels[i] == c]
            per_class.append(sum(_loop_mse(member, centroid) for member in members) / len(members))

        assert intra_class_distance(f, dataset) == pytest.approx(sum(per_class) / len(per_class), abs=1e-10)


def test_head_distance_matches_a_loop_oracle():
    rng = np.random.default_rng(13)
    for _ in range(100):
        classes, dim = int(rng.integers(2, 8)), int(rng.integers(1, 6))
        a = nn_core.HeadParams(rng.normal(size=(classes, dim)), rng.normal(size=classes))
        b = nn_core.HeadParams(rng.normal(scale=2.0, size=(classes, dim)), rng.normal(size=classes))

        rows = []
        for c in range(classes):
            squared = sum((a.W[c, k] - b.W[c, k]) ** 2 for k in range(dim)) + (a.b[c] - b.b[c]) ** 2
            rows.append(math.sqrt(squared))

        assert head_euclidean_distance(a, b) == pytest.approx(sum(rows) / classes, abs=1e-10)


def test_head_distance_is_symmetric():
    rng = np.random.default_rng(14)
    for _ in range(20):
        a = nn_core.HeadParams(rng.normal(size=(3, 4)), rng.normal(size=3))
        b = nn_core.HeadParams(rng.normal(size=(3, 4)), rng.normal(size=3))
        assert head_euclidean_distance(a, b) == head_euclidean_distance(b, a)
    with pytest.raises(ShapeError):
        head_euclidean_distance(a, nn_core.HeadParams(np.zeros((4, 4)), np.zeros(4)))


def test_domain_gap_ignores_the_domain_order(identity, domains):
    forward = class_centroids(identity, domains)
    backward = class_centroids(identity, domains[::-1])

    for scope in GapScope:
        assert domain_gap(backward, scope) == pytest.approx(domain_gap(forward, scope), abs=1e-12)
    pairs = domain_gap_table(forward)
    for key, value in domain_gap_table(backward).items():
        a, b = key.split('|')
        assert pairs.get(key, pairs.get(f'{b}|{a}')) == pytest.approx(value, abs=1e-12)


@pytest.mark.parametrize('transform', [np.exp, lambda v: 3 * v + 1, lambda v: v ** 3])
def test_spearman_is_invariant_under_monotone_maps(transform):
    rng = np.random.default_rng(15)
    for _ in range(20):
        xs, ys = rng.normal(size=10), rng.normal(size=10)
        rho = spearman_rho(xs, ys)
        assert spearman_rho(transform(xs), ys) == pytest.approx(rho, abs=1e-12)
        assert spearman_rho(xs, transform(ys)) == pytest.approx(rho, abs=1e-12)
        assert spearman_rho(ys, xs) == pytest.approx(rho, abs=1e-12)
        assert spearman_rho(-xs, ys) == pytest.approx(-rho, abs=1e-12)


def test_target_figures_use_the_known_class_population(bundle, prepared):
    state = prepared.state()
    report = analyze(state, bundle)
    known = bundle.target_known()

    assert report.intra_class_distance['target'] == intra_class_distance(state.f, known)
    assert report.feature_drift['target'] == feature_drift(state.f, state.f0, known)
