import dataclasses
import math

import numpy as np
import pandas as pd
import pytest

from commands.utils import nn_core, trainer
from commands.utils.analysis import claims_over_seeds, export_loss_curves
from commands.utils.data_synth import DomainDataset, DomainSplit
from commands.utils.exceptions import (ConfigError, DivergenceError, EmptyPopulationError, MissingStateError,
                                       TargetLeakError)
from commands.utils.losses import ABLATION_ORDER, PrototypeBank, Variant
from commands.utils.misc_utils import checksum
from commands.utils.openset_eval import closed_set_accuracy
from commands.utils.trainer import (TrainConfig, fine_tune, head_distance_correlation, prepare, run_ablation_suite,
                                    run_correlation_study, run_experiment, run_lambda_sweep, run_linear_probe,
                                    run_pretext_training)

ARTIFACTS = ['analysis.json', 'checkpoint.json', 'checkpoint.rpfckpt', 'config.json', 'eval.json',
             'eval_thresholds.csv', 'histograms.csv', 'histograms.svg', 'loss_curves.csv', 'loss_curves.svg',
             'metrics.csv', 'prototypes.csv', 'thresholds.svg']


def _same_state(a: nn_core.ModelState, b: nn_core.ModelState) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a.trainable_buffers(), b.trainable_buffers()))


@pytest.fixture(scope='module')
def ablation(bundle, fast_config, prepared):
    return run_ablation_suite(bundle, fast_config, num_seeds=2, cache={0: prepared})


@pytest.mark.parametrize('changes', [
    {'decay_epoch': 40},
    {'epochs': 0},
    {'lr': 0.0},
    {'lambda_hr': -1.0},
    {'variant': 'dropout'},
    {'activation': 'sigmoid'}
])
def test_config_validation(changes):
    with pytest.raises(ConfigError):
        TrainConfig(**changes)


def test_config_from_dict():
    config = TrainConfig.from_dict({'variant': 'no-hr', 'hidden_dims': [8, 8]})

    assert config.variant == Variant.NO_HR
    assert config.hidden_dims == (8, 8)
    assert config.mlp_dims(4) == [4, 8, 8, 16]
    assert config.to_dict()['variant'] == 'no_hr'
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({'learning_rate': 0.1})


def test_pretraining(bundle, fast_config, prepared):
    result = run_pretext_training(bundle.pretext, fast_config)

    assert result.f0.frozen
    assert len(result.losses) == fast_config.pretrain_epochs
    assert result.losses[-1] < result.losses[0]
    assert 0.0 <= result.val_acc <= 1.0
    assert checksum(*result.f0.buffers()) == checksum(*prepared.f0.buffers())


def test_pretrain_f0_returns_the_frozen_backbone(bundle, fast_config, prepared):
    f0 = trainer.pretrain_f0(bundle.pretext, fast_config)

    assert f0.frozen
    assert f0.dims == prepared.f0.dims
    assert checksum(*f0.buffers()) == checksum(*prepared.f0.buffers())


def test_linear_probe_returns_a_frozen_head(bundle, fast_config, prepared):
    f0 = prepared.f0
    state = nn_core.ModelState(f0.copy(), nn_core.init_head(bundle.class_split.num_known, f0.feature_dim, 0), f0=f0)

    h_lp = trainer.linear_probe(state, bundle.sources, fast_config)

    assert h_lp.frozen
    assert np.array_equal(h_lp.b, prepared.h_lp.b)


def test_linear_probe_only_moves_the_head(bundle, fast_config, prepared):
    f0 = prepared.f0
    state = nn_core.ModelState(f0.copy(), nn_core.init_head(bundle.class_split.num_known, f0.feature_dim, 0), f0=f0)

    h_lp, losses = run_linear_probe(state, bundle.sources, fast_config)

    assert all(np.array_equal(a, b) for a, b in zip(state.f.buffers(), f0.buffers()))
    assert h_lp.frozen and state.h_lp is h_lp
    assert losses[-1] < losses[0]
    assert np.array_equal(h_lp.W, prepared.h_lp.W)


def test_linear_probe_needs_f0(bundle, fast_config):
    state = nn_core.ModelState(nn_core.init_mlp([8, 16, 8], seed=0), nn_core.init_head(6, 8, seed=0))

    with pytest.raises(MissingStateError):
        run_linear_probe(state, bundle.sources, fast_config)


def test_prepared_stage(bundle, prepared):
    assert prepared.bank.num_classes == bundle.class_split.num_known
    assert prepared.bank.counts.sum() == len(bundle.source_train())
    assert 0.0 <= prepared.lp_val_acc <= 1.0


def test_fine_tune_schedule_and_frozen_state(bundle, fast_config, prepared):
    f0_sum = checksum(*prepared.f0.buffers())
    h_lp_sum = checksum(*prepared.h_lp.buffers())
    bank_sum = prepared.bank.checksum()

    record = fine_tune(prepared.state(), bundle.sources, prepared.bank, fast_config)

    assert [log.epoch for log in record.epochs] == [1, 2, 3, 4]
    assert [log.lr for log in record.epochs] == pytest.approx([0.05, 0.05, 0.05, 0.005])
    assert checksum(*prepared.f0.buffers()) == f0_sum
    assert checksum(*prepared.h_lp.buffers()) == h_lp_sum
    assert prepared.bank.checksum() == bank_sum
    assert record.state.f0 is prepared.f0


def test_rpf_logs_every_component(bundle, fast_config, prepared):
    record = fine_tune(prepared.state(), bundle.sources, prepared.bank, fast_config)
    first = record.epochs[0]

    assert first.l_lpft > 0
    assert first.l_fr > 0
    assert -math.log(bundle.class_split.num_known) <= first.l_hr < 0
    assert set(first.domain_l_lpft) == {'source-1', 'source-2', 'source-3'}
    assert 'l_lpft[source-2]' in record.metrics_frame().columns


def test_lpft_is_rpf_without_regularisers(bundle, fast_config, prepared):
    lpft = fine_tune(prepared.state(), bundle.sources, prepared.bank, fast_config.replace(variant=Variant.LPFT))
    bare = fine_tune(prepared.state(), bundle.sources, prepared.bank,
                     fast_config.replace(variant=Variant.RPF, lambda_hr=0.0, fr_enabled=False))

    assert _same_state(lpft.state, bare.state)
    assert [log.l_lpft for log in lpft.epochs] == [log.l_lpft for log in bare.epochs]


def test_rpf_without_head_regulariser_is_no_hr(bundle, fast_config, prepared):
    no_hr = fine_tune(prepared.state(), bundle.sources, prepared.bank, fast_config.replace(variant=Variant.NO_HR))
    rpf = fine_tune(prepared.state(), bundle.sources, prepared.bank, fast_config.replace(lambda_hr=0.0))

    assert _same_state(no_hr.state, rpf.state)


def test_no_pretrained_head_starts_from_a_fresh_head(bundle, fast_config, prepared):
    state = nn_core.ModelState(prepared.f0.copy(), prepared.h_lp.copy(), f0=prepared.f0)
    config = fast_config.replace(variant=Variant.NO_PRETRAINED_HEAD)

    record = fine_tune(state, bundle.sources, prepared.bank, config)

    assert record.state.h_lp is None
    assert record.epochs[0].l_fr > 0
    with pytest.raises(MissingStateError):
        fine_tune(state, bundle.sources, prepared.bank, fast_config)


def test_target_data_never_changes_training(bundle, fast_config, prepared):
    poisoned_target = DomainDataset('target', bundle.target.role, np.full_like(bundle.target.x, np.nan),
                                    bundle.target.y)
    poisoned = dataclasses.replace(bundle, target=poisoned_target)

    again = prepare(poisoned, fast_config)
    assert checksum(*again.f0.buffers()) == checksum(*prepared.f0.buffers())
    assert np.array_equal(again.h_lp.W, prepared.h_lp.W)

    clean = fine_tune(prepared.state(), bundle.sources, prepared.bank, fast_config)
    dirty = fine_tune(again.state(), poisoned.sources, again.bank, fast_config)
    assert _same_state(clean.state, dirty.state)


def test_target_cannot_be_a_source(bundle, fast_config, prepared):
    leak = DomainSplit('target', bundle.target, bundle.target)

    with pytest.raises(TargetLeakError):
        fine_tune(prepared.state(), [*bundle.sources, leak], prepared.bank, fast_config)


def test_selection_keeps_the_first_best_epoch(bundle, fast_config, prepared):
    record = fine_tune(prepared.state(), bundle.sources, prepared.bank, fast_config)
    val_accs = [log.val_acc for log in record.epochs]

    assert record.selected_epoch == int(np.argmax(val_accs)) + 1
    assert closed_set_accuracy(record.state.f, record.state.h, bundle.source_val()) == record.selected.val_acc


def test_divergence_is_reported(bundle, fast_config, prepared):
    exploding = PrototypeBank(np.full_like(prepared.bank.prototypes, 1e6), prepared.bank.counts.copy())

    with pytest.raises(DivergenceError) as info:
        fine_tune(prepared.state(), bundle.sources, exploding, fast_config)
    assert info.value.exit_code == 3


def test_clipped_fine_tuning_bounds_every_step(bundle, fast_config, prepared):
    config = fast_config.replace(lr=0.5, grad_clip=0.5)

    record = fine_tune(prepared.state(), bundle.sources, prepared.bank, config)

    assert all(math.isfinite(log.l_lpft) and math.isfinite(log.l_fr) for log in record.epochs)
    steps = config.epochs * math.ceil(len(bundle.source_train()) / config.batch_size)
    moved = [live - start for live, start in zip(record.state.trainable_buffers(),
                                                  [*prepared.f0.buffers(), *prepared.h_lp.buffers()])]
    assert nn_core.grad_norm(moved) <= config.lr * config.grad_clip * steps + 1e-9
    with pytest.raises(ConfigError):
        fast_config.replace(grad_clip=0.0)


def test_fine_tune_needs_a_bank_for_fr(bundle, fast_config, prepared):
    with pytest.raises(MissingStateError):
        fine_tune(prepared.state(), bundle.sources, None, fast_config)
    fine_tune(prepared.state(), bundle.sources, None, fast_config.replace(variant=Variant.NO_FR))


def test_step_trace(bundle, fast_config, prepared):
    record = fine_tune(prepared.state(), bundle.sources, prepared.bank, fast_config.replace(trace_steps=True))

    steps_per_epoch = math.ceil(len(bundle.source_train()) / fast_config.batch_size)
    assert len(record.step_trace) == fast_config.epochs * steps_per_epoch
    assert {'epoch', 'step', 'total', 'lpft', 'fr', 'hr'} <= set(record.step_trace[0])


def test_experiment_artifacts_are_reproducible(tmp_path, bundle, fast_config, prepared):
    first = run_experiment(bundle, fast_config, tmp_path / 'a', prepared)
    second = run_experiment(bundle, fast_config, tmp_path / 'b', prepared)

    assert sorted(path.name for path in (tmp_path / 'a').iterdir()) == ARTIFACTS
    for name in ('metrics.csv', 'checkpoint.rpfckpt', 'checkpoint.json', 'eval.json', 'prototypes.csv'):
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes(), name
    assert first.eval_report.best_h_score == second.eval_report.best_h_score
    assert len(first.eval_report.sweep.rows) == 8


def test_ablation_table(ablation):
    table = ablation.table

    assert table['variant'].tolist() == [v.value for v in ABLATION_ORDER]
    assert (table['runs'] == 2).all()
    assert (table['status'] == 'ok').all()
    assert table[['acc_mean', 'acc_std', 'h_score_mean', 'h_score_std']].notna().all().all()
    assert ((table['acc_mean'] >= 0) & (table['acc_mean'] <= 1)).all()


def test_ablation_rows_match_standalone_runs(ablation, bundle, fast_config, prepared):
    standalone = run_experiment(bundle, fast_config.replace(variant=Variant.LPFT), prepared=prepared)
    in_suite = ablation.results[(Variant.LPFT, 0)]

    assert in_suite.eval_report.acc_known == standalone.eval_report.acc_known
    assert _same_state(in_suite.record.state, standalone.record.state)


def test_suite_tables(ablation):
    thresholds = ablation.threshold_table()
    assert len(thresholds) == 7 * 8
    assert thresholds.groupby('label').size().eq(8).all()

    pairs = ablation.matched_pairs(Variant.RPF, Variant.LPFT)
    assert [seed for seed, _, _ in pairs] == [0, 1]

    claims = claims_over_seeds(pairs)
    assert len(claims) == 7
    assert (claims['seeds'] == 2).all()
    assert claims['holds'].tolist() == (claims['held'] >= 2).tolist()

    records = {'rpf': [rpf.record for _, rpf, _ in pairs]}
    curves = export_loss_curves(records)
    assert len(curves) == 4 * 3
    assert curves.groupby('domain')['ema'].first().equals(curves.groupby('domain')['raw'].first())


def test_failed_runs_are_marked(monkeypatch, bundle, fast_config, prepared):
    real_fine_tune = trainer.fine_tune

    def failing(state, sources, bank, config):
        if config.variant == Variant.HR_F:
            raise DivergenceError('forced', {})
        return real_fine_tune(state, sources, bank, config)

    monkeypatch.setattr(trainer, 'fine_tune', failing)
    suite = run_ablation_suite(bundle, fast_config, num_seeds=1, cache={0: prepared})

    rows = suite.table.set_index('variant')
    assert rows.loc['hr_f', 'status'] == 'FAILED'
    assert rows.loc['hr_f', 'runs'] == 0
    assert pd.isna(rows.loc['hr_f', 'acc_mean'])
    assert (rows.drop(index='hr_f')['status'] == 'ok').all()
    assert isinstance(suite.results[(Variant.HR_F, 0)], DivergenceError)


def test_lambda_sweep(bundle, fast_config, prepared):
    sweep = run_lambda_sweep(bundle, fast_config, num_seeds=1, cache={0: prepared})
    threaded = run_lambda_sweep(bundle, fast_config, num_seeds=1, workers=3, cache={0: prepared})

    assert sweep.table['lambda_hr'].tolist() == [1.0, 0.5, 0.1]
    assert sweep.table['acc_std'].isna().all()
    pd.testing.assert_frame_equal(sweep.table, threaded.table)
    with pytest.raises(ConfigError):
        run_lambda_sweep(bundle, fast_config, lambdas=[-0.5])


def test_correlation_study(bundle, fast_config, prepared):
    result = run_correlation_study(bundle, fast_config, num_seeds=2, cache={0: prepared})

    assert result.table['seed'].tolist() == [0, 1]
    assert (result.table[['head_distance', 'delta_imp1', 'delta_imp2']] >= 0).all().all()
    for rho in (result.rho_imp1, result.rho_imp2):
        assert math.isnan(rho) or abs(rho) == pytest.approx(1.0)

    with pytest.raises(EmptyPopulationError):
        head_distance_correlation([])
    with pytest.raises(ConfigError):
        run_correlation_study(bundle, fast_config, num_seeds=1)
