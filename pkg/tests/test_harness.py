import numpy as np
import pytest

from shedlab.config import ConfigError, ExperimentConfig
from shedlab.data import Dataset
from shedlab.engine import Dense, NetworkSpec, ParamStore, ReLU
from shedlab.formats import encode_snapshot
from shedlab.harness import TrainingDiverged, evaluate, momentum_sweep, run_experiment, sweep_summary
from shedlab.pruning import MaskState
from shedlab.schedules import keep_ratio_value
from shedlab.trace import format_trace


def tiny(**overrides):
    base = dict(layers=(Dense(8, 16), ReLU(), Dense(16, 3)), input_shape=(8,), train_samples=192,
                eval_samples=48, noise=0.8, batch_size=32, total_epochs=4, update_interval=2,
                final_keep=0.3, seed=1)
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def gmp_run():
    return run_experiment(tiny())


def check_trace_invariants(result):
    tr = result.trace
    steps = tr.column("step")
    assert np.all(np.diff(steps) > 0)
    assert np.all(np.diff(tr.column("actual_keep")) <= 0)
    assert np.all(np.diff(tr.column("explicit_cum")) >= 0) and np.all(np.diff(tr.column("shed_cum")) >= 0)
    n = result.mask.total
    for row in tr.rows:
        kept = round(row.actual_keep * n)
        assert kept / n == row.actual_keep
        assert kept + row.explicit_cum + row.shed_cum == n
        assert row.actual_keep <= row.target_keep
    assert np.all(np.diff(tr.thresholds) >= 0)


def test_gmp_run_invariants(gmp_run):
    check_trace_invariants(gmp_run)
    tr, cfg = gmp_run.trace, gmp_run.config
    assert len(tr) == 1 + 4 * 6 // 2
    assert tr.rows[-1].actual_keep <= 0.3 and tr.rows[-1].actual_keep > 0.3 - 1 / gmp_run.mask.total
    keep_spec = cfg.keep_spec()
    for row in tr.rows[1:]:
        assert row.target_keep == keep_ratio_value(keep_spec, row.step / 6)
    # masked weights are zero in the final parameters
    for s in gmp_run.mask.layout:
        assert np.all(gmp_run.params[s.name][~gmp_run.mask.mask_for(s.name)] == 0)


def test_eval_cadence(gmp_run):
    ev = [r.eval_acc for r in gmp_run.trace.rows]
    sampled = [r.step for r in gmp_run.trace.rows if r.eval_acc is not None]
    assert sampled == [0, 6, 12, 18, 24]
    assert all(0 <= v <= 1 for v in ev if v is not None)


def test_zero_epochs():
    result = run_experiment(tiny(total_epochs=0))
    assert len(result.trace) == 1
    assert result.mask.weight_kept.all() and result.trace.rows[0].explicit_cum == 0


def test_final_keep_one_never_prunes_explicitly():
    result = run_experiment(tiny(final_keep=1.0))
    assert result.trace.column("explicit_cum").max() == 0
    check_trace_invariants(result)


def test_identical_seeds_bit_identical(gmp_run):
    again = run_experiment(tiny())
    assert format_trace(again.trace) == format_trace(gmp_run.trace)
    assert encode_snapshot(again.snapshot) == encode_snapshot(gmp_run.snapshot)


def test_seed_change():
    a = run_experiment(tiny(method="random"))
    b = run_experiment(tiny(method="random", seed=2))
    assert encode_snapshot(a.snapshot) != encode_snapshot(b.snapshot)
    check_trace_invariants(a)
    g1, g2 = run_experiment(tiny(seed=5)), run_experiment(tiny(seed=6))
    for col in ("target_keep", "lr", "step"):
        np.testing.assert_array_equal(g1.trace.column(col), g2.trace.column(col))


def test_lr_column():
    result = run_experiment(tiny(total_epochs=7, update_interval=3))
    lr = result.trace.column("lr")
    t = result.trace.column("t")
    # the recorded rate is the one used by the last batch before the row
    expected = [1e-2 if np.floor(ti - 1e-9) < 2 else (1e-3 if np.floor(ti - 1e-9) < 5 else 1e-4) for ti in t[1:]]
    np.testing.assert_array_equal(lr[1:], expected)


def test_block_run():
    result = run_experiment(tiny(method="block_gmp", selective_decay=True, weight_decay=0.0))
    check_trace_invariants(result)
    assert result.snapshot.granularity == "block"
    assert result.mask.total == result.mask.partition.num_blocks
    w_pruned = ~result.mask.weight_kept
    flat = np.concatenate([result.params[s.name].ravel() for s in result.mask.layout])
    assert np.all(flat[w_pruned] == 0)


def test_cyclic_gated_run():
    result = run_experiment(tiny(lr_schedule="cyclic", keep_schedule="cycle_gated_exponential",
                                 total_epochs=-1, num_cycles=1, tau=1.0, batch_size=64))
    check_trace_invariants(result)
    t = result.trace.column("t")
    target = result.trace.column("target_keep")
    # gate open for epochs 0 and 1 only: the target moves, then freezes for the rest of the cycle
    assert np.all(np.diff(target[t <= 2]) < 0)
    assert np.all(np.diff(target[t >= 2]) == 0) and (t > 2).sum() > 3


def test_interval_degenerate_check():
    result = run_experiment(tiny(degenerate_check="interval", initial_threshold=0.05))
    check_trace_invariants(result)
    assert result.trace.rows[-1].shed_cum > 0


def test_invalid_config_raises_before_running():
    with pytest.raises(ConfigError, match="momentum"):
        run_experiment(tiny(momentum=1.5))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_trace():
    with pytest.raises(TrainingDiverged) as info:
        run_experiment(tiny(lr_steps=((4, 1e300),)))
    rows = info.value.trace.rows
    assert rows[0].step == 0 and np.isfinite(rows[0].loss)
    assert not np.isfinite(rows[-1].loss) and rows[-1].lr == 1e300


def test_momentum_sweep():
    results = momentum_sweep(tiny(total_epochs=2), [0.0, 0.9])
    assert list(results) == [0.0, 0.9]
    a, b = results[0.0].trace, results[0.9].trace
    np.testing.assert_array_equal(a.column("target_keep"), b.column("target_keep"))
    assert results[0.9].config.momentum == 0.9
    summary = sweep_summary(results)
    assert [row[0] for row in summary] == [0.0, 0.9]
    assert summary[1][3] == b.rows[-1].shed_cum
    with pytest.raises(ValueError):
        momentum_sweep(tiny(), [0.9])
    with pytest.raises(ValueError):
        momentum_sweep(tiny(), [0.9, 0.9])


def test_evaluate_examples():
    net = NetworkSpec((2,), [Dense(2, 2)])
    params = ParamStore({"0.weight": np.eye(2), "0.bias": np.zeros(2)}, ("0.weight",))
    x = np.array([[2.0, -1.0], [0.5, 0.1], [-1.0, 3.0], [0.0, 0.2]])
    y = np.array([0, 0, 1, 1])
    data = Dataset(x, y)
    assert evaluate(net, params, None, data) == 1.0
    assert evaluate(net, params, MaskState.fresh(params), data) == 1.0

    zero = ParamStore({"0.weight": np.zeros((2, 2)), "0.bias": np.zeros(2)}, ("0.weight",))
    assert evaluate(net, zero, None, Dataset(x, np.array([0, 1, 1, 1]))) == 0.25

    mask = MaskState.fresh(params)
    mask.weight_kept[:] = [True, False, False, False]
    before = params["0.weight"].copy()
    first = evaluate(net, params, mask, data)
    assert first == evaluate(net, params, mask, data) == 0.75  # last sample ties at [0, 0] -> class 0
    np.testing.assert_array_equal(params["0.weight"], before)
