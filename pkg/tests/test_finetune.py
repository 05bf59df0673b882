import json
import math
from fractions import Fraction

import numpy as np
import pytest

from conftest import make_table
from xtab.data import CATEGORICAL, FEATURE, LABEL, MULTICLASS, NUMERICAL, REGRESSION, ColumnSchema, TableDataset, prepare
from xtab.fedpretrain import Checkpoint, CheckpointError, Client, FedConfig, init_server, pretrain_run
from xtab.finetune import (
    CONTINUE,
    STOP,
    CheckpointPool,
    FinetuneConfig,
    append_records,
    early_stop_check,
    evaluate,
    finetune,
    model_soup,
    run_trial,
    score_outputs,
    with_regime,
)
from xtab.metrics import HIGHER_BETTER, LOWER_BETTER
from xtab.model import BackboneConfig
from xtab.objectives import ObjectiveKind

BCFG = BackboneConfig(n_blocks=1, d=8, n_heads=2)


def cfg(regime="light", **kw):
    base = dict(batch_size=16, lr=1e-3, head_hidden=8)
    base.update(kw)
    return FinetuneConfig(regime=regime, **base)


@pytest.fixture(scope="module")
def task():
    return prepare(make_table(n_rows=120, seed=3), trial_seed=0)


@pytest.fixture(scope="module")
def checkpoint():
    table = make_table(n_rows=40, seed=9, name="pre")
    config = FedConfig(n_local=1, batch_size=16, head_hidden=8, lr=1e-3)
    clients = [Client(0, table, ObjectiveKind("reconstruction"), BCFG, config, seed=0)]
    server = init_server(clients, BCFG, config, seed=0)
    return pretrain_run(clients, server, rounds=2).checkpoints[2]


class Counter:
    """Validation scorer returning a fixed sequence (or forever-improving values)."""

    def __init__(self, scores=None):
        self.scores = scores
        self.calls = 0

    def __call__(self, model):
        self.calls += 1
        if self.scores is None:
            return float(self.calls)
        return self.scores[min(self.calls, len(self.scores)) - 1]


class TestRegimes:
    def test_defaults(self):
        light, heavy, best = (FinetuneConfig(regime=r) for r in ("light", "heavy", "best"))
        assert (light.max_epochs, light.patience, light.val_check_interval, light.top_k) == (3, None, 1.0, 1)
        assert (heavy.max_epochs, heavy.patience, heavy.val_check_interval, heavy.top_k) == (500, 3, 1.0, 1)
        assert (best.max_epochs, best.patience, best.val_check_interval, best.top_k) == (500, 20, 0.5, 3)
        assert (light.batch_size, light.lr) == (128, 1e-4)

    def test_validation(self):
        with pytest.raises(ValueError):
            FinetuneConfig(regime="medium")
        with pytest.raises(ValueError):
            FinetuneConfig(train_fraction=0.0)
        with pytest.raises(ValueError):
            FinetuneConfig(val_check_interval=0.25)

    def test_with_regime_resets_overrides(self):
        assert with_regime(cfg("heavy", max_epochs=4), "best").max_epochs == 500

    def test_light_three_epochs(self, task):
        ds, enc = task
        scorer = Counter([0.5, 0.4, 0.3])
        result = finetune(ds, enc, cfg("light"), BCFG, seed=0, val_scorer=scorer)
        n_batches = math.ceil(len(ds.split.train) / 16)
        assert result.epochs_run == 3
        assert len(result.val_history) == scorer.calls == 3
        assert result.steps == 3 * n_batches
        assert result.best_val == 0.5

    def test_heavy_hits_cap_when_improving(self, task):
        ds, enc = task
        result = finetune(ds, enc, cfg("heavy", max_epochs=6), BCFG, seed=0, val_scorer=Counter())
        assert result.epochs_run == 6
        assert result.val_history == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]

    def test_heavy_stops_after_patience(self, task):
        ds, enc = task
        result = finetune(ds, enc, cfg("heavy", max_epochs=50), BCFG, seed=0, val_scorer=Counter([0.9]))
        assert result.epochs_run == 4
        assert len(result.val_history) == 4

    def test_best_checks_twice_per_epoch(self, task):
        ds, enc = task
        result = finetune(ds, enc, cfg("best", max_epochs=2), BCFG, seed=0, val_scorer=Counter())
        assert len(result.val_history) == 4

    def test_train_fraction(self, task):
        ds, enc = task
        result = finetune(ds, enc, cfg("light", max_epochs=1, train_fraction=0.25), BCFG, seed=0)
        assert result.train_rows == len(ds.subset_train(0.25, 0).split.train)
        assert abs(result.train_rows - 0.25 * len(ds.split.train)) <= 1
        assert result.steps == math.ceil(result.train_rows / 16)

    def test_requires_prepared_task(self):
        table = make_table()
        with pytest.raises(ValueError):
            finetune(table, None, cfg(), BCFG, seed=0)


class TestRetrieval:
    def test_returned_snapshot_has_best_score(self, task):
        ds, enc = task
        result = finetune(ds, enc, cfg("heavy", max_epochs=5, lr=3e-3), BCFG, seed=1)
        assert result.best_val == max(result.val_history)
        assert evaluate(result.model, ds, enc, "val") == result.best_val

    def test_all_components_train(self, task):
        ds, enc = task
        result = finetune(ds, enc, cfg("light", max_epochs=1), BCFG, seed=0)
        final = result.model.params.state_dict()
        for prefix in ("featurizer.", "backbone.", "head."):
            names = [n for n in final if n.startswith(prefix) and n.endswith("weight")]
            assert any(not np.array_equal(final[n], result.initial_state[n]) for n in names), prefix

    def test_checkpoint_init_differs_only_in_backbone(self, task, checkpoint):
        ds, enc = task
        one = cfg("light", max_epochs=1)
        rand = finetune(ds, enc, one, BCFG, seed=5).initial_state
        warm = finetune(ds, enc, one, BCFG, seed=5, checkpoint=checkpoint).initial_state
        assert rand.keys() == warm.keys()
        for name in rand:
            same = np.array_equal(rand[name], warm[name])
            if name in checkpoint.tensors:
                np.testing.assert_array_equal(warm[name], checkpoint.tensors[name])
            else:
                assert same, name

    def test_light_bit_reproducible(self, task, checkpoint):
        ds, enc = task
        a = finetune(ds, enc, cfg("light"), BCFG, seed=2, checkpoint=checkpoint).model.params.state_dict()
        b = finetune(ds, enc, cfg("light"), BCFG, seed=2, checkpoint=checkpoint).model.params.state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_incompatible_checkpoint(self, task, checkpoint):
        ds, enc = task
        wide = BackboneConfig(n_blocks=1, d=16, n_heads=2)
        with pytest.raises(CheckpointError, match="d"):
            finetune(ds, enc, cfg(), wide, seed=0, checkpoint=checkpoint)
        bogus = Checkpoint(BCFG, {"backbone.nope": np.zeros(1, np.float32)})
        with pytest.raises(CheckpointError, match="nope"):
            finetune(ds, enc, cfg(), BCFG, seed=0, checkpoint=bogus)


class TestEarlyStop:
    def test_declining_scores(self):
        scores = [0.8, 0.7, 0.6, 0.5]
        assert early_stop_check(scores[:3], 3, HIGHER_BETTER) == CONTINUE
        assert early_stop_check(scores, 3, HIGHER_BETTER) == STOP

    def test_improving_never_stops(self):
        for n in range(1, 30):
            assert early_stop_check(list(range(n)), 1, HIGHER_BETTER) == CONTINUE
            assert early_stop_check([-x for x in range(n)], 1, LOWER_BETTER) == CONTINUE

    def test_tie_does_not_reset(self):
        assert early_stop_check([0.5, 0.5, 0.5], 2, HIGHER_BETTER) == STOP
        assert early_stop_check([0.5, 0.5, 0.4, 0.4], 3, LOWER_BETTER) == CONTINUE

    def test_no_patience(self):
        assert early_stop_check([1.0, 0.0, 0.0, 0.0], None, HIGHER_BETTER) == CONTINUE

    def test_empty_history(self):
        with pytest.raises(ValueError):
            early_stop_check([], 3, HIGHER_BETTER)


class TestPool:
    def test_keeps_top_k(self):
        pool = CheckpointPool(2, HIGHER_BETTER)
        for i, s in enumerate([0.3, 0.9, 0.5, 0.1]):
            pool.offer(s, {"w": np.full(1, i, np.float32)})
        assert [e[0] for e in pool.entries] == [0.9, 0.5]
        assert [int(s["w"][0]) for s in pool.snapshots()] == [1, 2]

    def test_lower_better_and_ties(self):
        pool = CheckpointPool(2, LOWER_BETTER)
        for i, s in enumerate([0.5, 0.2, 0.2, 0.2]):
            pool.offer(s, {"w": np.full(1, i, np.float32)})
        assert pool.best_score == 0.2
        assert [int(s["w"][0]) for s in pool.snapshots()] == [1, 2]

    def test_snapshot_is_copied(self):
        pool = CheckpointPool(1, HIGHER_BETTER)
        w = np.zeros(2, np.float32)
        pool.offer(1.0, {"w": w})
        w += 1
        assert pool.snapshots()[0]["w"].sum() == 0


class TestSoup:
    def test_identical(self, rng):
        snap = {"a": rng.normal(size=(3, 2)).astype(np.float32)}
        soup = model_soup([snap] * 4)
        np.testing.assert_array_equal(soup["a"], snap["a"])

    def test_opposites_cancel(self, rng):
        w = rng.normal(size=5).astype(np.float32)
        assert np.all(model_soup([{"a": w}, {"a": -w}])["a"] == 0)

    def test_three_within_one_ulp(self, rng):
        snaps = [{"a": rng.normal(size=50).astype(np.float32)} for _ in range(3)]
        soup = model_soup(snaps)["a"]
        exact = [float(sum(Fraction(float(s["a"][i])) for s in snaps) / 3) for i in range(50)]
        oracle = np.array(exact, dtype=np.float32)
        assert np.all(np.abs(soup - oracle) <= np.spacing(np.abs(oracle)))

    def test_top_one_equals_best(self, rng):
        snap = {"a": rng.normal(size=4).astype(np.float32), "b": rng.normal(size=(2, 2)).astype(np.float32)}
        soup = model_soup([snap])
        for name in snap:
            np.testing.assert_array_equal(soup[name], snap[name])

    def test_mismatch(self):
        with pytest.raises(ValueError):
            model_soup([{"a": np.zeros(2)}, {"a": np.zeros(3)}])
        with pytest.raises(ValueError):
            model_soup([{"a": np.zeros(2)}, {"b": np.zeros(2)}])
        with pytest.raises(ValueError):
            model_soup([])


def multiclass_table(n_rows=60, n_classes=4, seed=0):
    r = np.random.default_rng(seed)
    schema = [
        ColumnSchema("x", NUMERICAL, FEATURE),
        ColumnSchema("y", CATEGORICAL, LABEL, tuple(str(i) for i in range(n_classes))),
    ]
    y = np.arange(n_rows) % n_classes
    return TableDataset("mc", schema, {"x": r.normal(size=n_rows), "y": y}, MULTICLASS)


class TestEvaluate:
    def test_perfect_binary(self, task):
        ds, _ = task
        rows = ds.split.val
        y = ds.columns["y"][rows]
        assert score_outputs((2.0 * y - 1.0)[:, None], ds, rows) == 1.0

    def test_regression_mean_predictor(self):
        ds, _ = prepare(make_table(n_rows=80, task=REGRESSION), 0)
        rows = ds.split.train
        y = ds.columns["y"][rows]
        assert score_outputs(np.zeros((len(rows), 1)), ds, rows) == pytest.approx(y.std(), rel=1e-12)

    def test_multiclass_uniform(self):
        ds, _ = prepare(multiclass_table(), 0)
        rows = ds.split.test
        assert score_outputs(np.zeros((len(rows), 4)), ds, rows) == pytest.approx(math.log(4), rel=1e-12)

    def test_multiclass_and_regression_finetune(self):
        for table in (multiclass_table(), make_table(n_rows=60, task=REGRESSION)):
            ds, enc = prepare(table, 0)
            result = finetune(ds, enc, cfg("light", max_epochs=1), BCFG, seed=0)
            assert math.isfinite(result.best_val)


class TestRecords:
    def test_run_trial_record(self, checkpoint):
        table = make_table(n_rows=80, seed=4, name="down")
        rec = run_trial(table, 1, cfg("light", max_epochs=1), BCFG, seed=1, checkpoint=checkpoint, config_hash="abc")
        assert rec["task"] == "down" and rec["trial"] == 1 and rec["seed"] == 1
        assert rec["init"] == "checkpoint" and rec["pretrain_round"] == 2
        assert rec["metric"] == "auc" and rec["direction"] == HIGHER_BETTER
        assert 0.0 <= rec["value"] <= 1.0 and rec["wall_clock"] > 0
        base = run_trial(table, 1, cfg("light", max_epochs=1), BCFG, seed=1)
        assert base["init"] == "random" and base["pretrain_round"] is None

    def test_append_one_line_per_record(self, tmp_path):
        path = tmp_path / "r.jsonl"
        append_records(path, [{"a": 1}, {"a": 2}])
        append_records(path, [{"a": 3}])
        assert [json.loads(l)["a"] for l in path.read_text().splitlines()] == [1, 2, 3]
