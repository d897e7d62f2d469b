# Acceptance runs
# Property checks (gradients, metric oracle, LightGCN degeneration, closed
# forms, determinism, grid machinery) plus the directional training claims:
# overfitting, beating popularity, ablation ordering and modality alignment.
# The multi-minute ones carry the `slow` marker: `pytest -m "not slow"` skips them.

import json
import math
import time

import numpy as np
import pytest

from ugt_rec import cli
from ugt_rec import data as data_mod
from ugt_rec import tensor as T
from ugt_rec.evaluation import evaluate, popularity_baseline
from ugt_rec.tensor import Tensor
from ugt_rec.train import GridCell, TrainConfig, best_cell, grid_search, itc_loss, train
from ugt_rec.verify import (
    check_gradient,
    check_lightgcn_degeneration,
    check_metric_oracle,
    toy_joint_loss,
)

pytestmark = pytest.mark.integration

SEEDS = (0, 1, 2)
ABLATIONS = ("attn_fuse", "ugnn", "trans", "cl")


def _desk_config(**changes):
    """Shapes used for the directional runs on the 8×8-image datasets"""
    values = dict(d=16, n_heads=2, d_ff=32, d_itc=8, encoder_layers=1, graph_layers=2, patch_size=4,
                  lr=0.01, batch_size=64, max_epochs=80, patience=10, itc_temperature=0.2,
                  lambda_c=0.4, lambda_reg=1e-4, epsilon=0.5)
    values.update(changes)
    return TrainConfig(**values)


def _signal_split(seed):
    dataset = data_mod.generate_synthetic(80, 40, latent_dim=4, density=0.1, seed=seed,
                                          image_size=8, channels=3, vocab_size=32, max_text_len=8)
    return data_mod.split(dataset, seed=seed)


def _held_out_recall(split, config):
    result = train(split, config)
    return evaluate(split, result.model, ks=(10,)).recall(10)


# =============================================================================
# PROPERTY CHECKS
# =============================================================================

class TestGradientFidelity:
    @pytest.mark.slow
    def test_full_joint_loss(self):
        started = time.perf_counter()
        passed, expected, actual = check_gradient()
        assert passed, actual
        assert time.perf_counter() - started < 60

    def test_every_parameter_is_covered(self):
        loss_fn, params = toy_joint_loss()
        loss = loss_fn()
        T.backward(loss)
        assert all(p.grad is not None for p in params)


class TestMetricOracle:
    def test_thousand_random_instances(self):
        started = time.perf_counter()
        passed, _, actual = check_metric_oracle(instances=1000)
        assert passed, actual
        assert time.perf_counter() - started < 30


class TestLightGcnDegeneration:
    def test_hundred_random_graphs(self):
        passed, _, actual = check_lightgcn_degeneration(graphs=100)
        assert passed, actual


class TestItcClosedForms:
    @pytest.mark.parametrize("n", [2, 3, 8, 16])
    def test_coinciding_embeddings_give_ln_n(self, n):
        Z = Tensor(np.tile([0.0, 1.0, 0.0], (n, 1)))
        assert abs(itc_loss(Z, Z, temperature=0.07).item() - math.log(n)) < 1e-9

    def test_two_orthonormal_pairs(self):
        Z = Tensor(np.eye(2))
        want = math.log(1.0 + math.exp(-1.0 / 0.5))
        assert abs(itc_loss(Z, Z, temperature=0.5).item() - want) < 1e-9


# =============================================================================
# DETERMINISM AND GRID MACHINERY
# =============================================================================

class TestDeterminism:
    def test_two_train_commands_write_identical_metrics(self, tmp_path, mock_environment):
        data_dir = tmp_path / "data"
        assert cli.main(["generate", "--out", str(data_dir), "--users", "12", "--items", "10", "--image-size", "8",
                         "--vocab-size", "16", "--max-text-len", "6", "--density", "0.3", "--seed", "4"]) == 0
        config = tmp_path / "c.cfg"
        config.write_text("d = 8\nn_heads = 2\nd_ff = 16\nd_itc = 4\nencoder_layers = 1\ngraph_layers = 1\n"
                          "batch_size = 32\nmax_epochs = 2\nseed = 11\n")
        reports = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["train", "--data", str(data_dir), "--config", str(config), "--out", str(out)]) == 0
            reports.append(json.loads((out / "report.json").read_text()))
        first, second = reports
        for key in ("metrics", "per_user", "alignment_mse", "run_id"):
            assert json.dumps(first[key]) == json.dumps(second[key])
        assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()


class TestGridMachinery:
    def test_argmax_matches_independent_runs(self, toy_split, small_config):
        config = small_config.with_updates(grid_epsilon=[0.2, 0.8], grid_lambda_c=[0.0, 0.5], max_epochs=2)
        result = grid_search(toy_split, config)
        independent = []
        for cell in result.cells:
            run = train(toy_split, config.with_updates(epsilon=cell.epsilon, lambda_c=cell.lambda_c))
            recall = evaluate(toy_split, run.model, ks=(10,), target="validation").recall(10)
            independent.append(GridCell(cell.epsilon, cell.lambda_c, recall, cell.val_ndcg, cell.best_epoch))
        assert [c.val_recall for c in independent] == [c.val_recall for c in result.cells]
        assert best_cell(independent) == result.best

    def test_tie_breaking_rule(self):
        tied = [GridCell(e, c, 0.25, 0.0, 1) for e in (0.8, 0.2) for c in (0.5, 0.0)]
        assert (best_cell(tied).epsilon, best_cell(tied).lambda_c) == (0.2, 0.0)


# =============================================================================
# DIRECTIONAL TRAINING CLAIMS
# =============================================================================

@pytest.mark.slow
class TestOverfit:
    def test_training_recall_on_desk_dataset(self, desk_dataset):
        split = data_mod.split(desk_dataset, ratios=(1, 0, 0), seed=0)
        config = _desk_config(lr=0.02, max_epochs=200, patience=200, lambda_reg=0.0, batch_size=32)
        started = time.perf_counter()
        result = train(split, config)
        report = evaluate(split, result.model, ks=(10,), target="train")
        assert report.recall(10) >= 0.9
        assert time.perf_counter() - started < 300


@pytest.mark.slow
class TestSignalExploitation:
    def test_beats_popularity_over_three_seeds(self):
        ours, popular = [], []
        for seed in SEEDS:
            split = _signal_split(seed)
            ours.append(_held_out_recall(split, _desk_config(seed=seed)))
            popular.append(popularity_baseline(split, ks=(10,)).recall(10))
        assert np.mean(ours) >= 1.2 * np.mean(popular), (ours, popular)


@pytest.mark.slow
class TestAblationDirection:
    def test_full_model_is_not_beaten(self):
        """Each ablation is paired with the full model on the same seed"""
        full = {seed: _held_out_recall(_signal_split(seed), _desk_config(seed=seed)) for seed in SEEDS}
        inversions = []
        for ablation in ABLATIONS:
            for seed in SEEDS:
                variant = _held_out_recall(_signal_split(seed), _desk_config(seed=seed, ablation=[ablation]))
                if variant > full[seed]:
                    gap = variant / full[seed] - 1.0 if full[seed] > 0 else math.inf
                    inversions.append((ablation, seed, gap))
        assert len(inversions) <= 1, inversions
        assert all(gap <= 0.02 for _, _, gap in inversions), inversions


@pytest.mark.slow
class TestModalityAlignment:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_contrastive_loss_aligns_modalities(self, seed):
        split = _signal_split(seed)
        aligned = evaluate(split, train(split, _desk_config(seed=seed, lambda_c=0.4)).model)
        unaligned = evaluate(split, train(split, _desk_config(seed=seed, lambda_c=0.0)).model)
        assert aligned.alignment_mse < unaligned.alignment_mse
