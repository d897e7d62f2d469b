# Integration Tests for grid search and the sensitivity sweep

import pytest

from ugt_rec import tensor as T
from ugt_rec.encoder import ItemInputs
from ugt_rec.errors import ConfigurationError
from ugt_rec.evaluation import evaluate_embeddings
from ugt_rec.fusion import build_graph
from ugt_rec.train import GridCell, best_cell, grid_search, sensitivity_sweep, train

pytestmark = pytest.mark.integration


def _validation_recall(split, config):
    """Independent re-run of one grid cell"""
    result = train(split, config)
    inputs = ItemInputs.from_dataset(split.dataset, config.patch_size)
    with T.no_grad():
        out = result.model.forward(build_graph(split), inputs)
    return evaluate_embeddings(split, out.X_user, out.X_item, ks=(10,), target="validation").recall(10)


# =============================================================================
# TIE RULE
# =============================================================================

class TestBestCell:
    """
    Highest validation Recall@10, then smaller ε, then smaller λ_c
    """

    def test_highest_recall_wins(self):
        cells = [GridCell(0.0, 0.0, 0.2, 0.1, 1), GridCell(0.9, 0.9, 0.4, 0.1, 1)]
        assert best_cell(cells) is cells[1]

    def test_tie_goes_to_smaller_epsilon(self):
        cells = [GridCell(0.5, 0.0, 0.4, 0.3, 1), GridCell(0.2, 0.8, 0.4, 0.1, 1)]
        assert best_cell(cells) is cells[1]

    def test_then_smaller_lambda_c(self):
        cells = [GridCell(0.2, 0.6, 0.4, 0.3, 1), GridCell(0.2, 0.1, 0.4, 0.1, 1), GridCell(0.2, 0.3, 0.4, 0.9, 1)]
        assert best_cell(cells) is cells[1]

    def test_order_of_cells_does_not_matter(self):
        cells = [GridCell(e, c, 0.5, 0.0, 1) for e in (0.4, 0.1) for c in (0.3, 0.2)]
        assert best_cell(cells) == best_cell(list(reversed(cells))) == GridCell(0.1, 0.2, 0.5, 0.0, 1)


# =============================================================================
# GRID SEARCH
# =============================================================================

class TestGridSearch:
    def test_single_cell_matches_plain_training(self, toy_split, small_config):
        config = small_config.with_updates(grid_epsilon=[0.3], grid_lambda_c=[0.2])
        result = grid_search(toy_split, config)
        assert len(result.cells) == 1
        cell = result.best
        assert (cell.epsilon, cell.lambda_c) == (0.3, 0.2)
        assert cell.val_recall == _validation_recall(toy_split, small_config.with_updates(epsilon=0.3, lambda_c=0.2))

    def test_two_by_two_argmax_matches_re_evaluation(self, toy_split, small_config):
        config = small_config.with_updates(grid_epsilon=[0.0, 0.5], grid_lambda_c=[0.0, 0.4])
        result = grid_search(toy_split, config)
        assert [(c.epsilon, c.lambda_c) for c in result.cells] == [(0.0, 0.0), (0.0, 0.4), (0.5, 0.0), (0.5, 0.4)]
        recomputed = [
            GridCell(c.epsilon, c.lambda_c,
                     _validation_recall(toy_split, small_config.with_updates(epsilon=c.epsilon, lambda_c=c.lambda_c)),
                     c.val_ndcg, c.best_epoch)
            for c in result.cells
        ]
        assert [c.val_recall for c in recomputed] == [c.val_recall for c in result.cells]
        assert best_cell(recomputed) == result.best

    def test_threads_do_not_change_results(self, toy_split, small_config):
        config = small_config.with_updates(grid_epsilon=[0.1, 0.6], grid_lambda_c=[0.0, 0.3])
        serial = grid_search(toy_split, config, threads=1)
        parallel = grid_search(toy_split, config, threads=2)
        assert serial.cells == parallel.cells
        assert serial.best == parallel.best

    def test_epoch_override(self, toy_split, small_config):
        config = small_config.with_updates(grid_epsilon=[0.5], grid_lambda_c=[0.4], max_epochs=50)
        result = grid_search(toy_split, config, epochs=1)
        assert result.best.best_epoch == 1

    def test_table_rows(self, toy_split, small_config):
        config = small_config.with_updates(grid_epsilon=[0.5], grid_lambda_c=[0.4])
        row = grid_search(toy_split, config).table()[0]
        assert set(row) == {"epsilon", "lambda_c", "val_recall", "val_ndcg", "best_epoch"}


# =============================================================================
# SENSITIVITY SWEEP
# =============================================================================

class TestSensitivitySweep:
    def test_one_point_per_value(self, toy_split, small_config):
        points = sensitivity_sweep(toy_split, small_config, "epsilon", [0.0, 1.0], epochs=1)
        assert [p.value for p in points] == [0.0, 1.0]
        for point in points:
            assert point.parameter == "epsilon"
            assert set(point.test) == {"recall@10", "recall@20", "ndcg@10", "ndcg@20"}
            assert "recall@10" in point.validation

    def test_defaults_to_config_grid(self, toy_split, small_config):
        config = small_config.with_updates(grid_lambda_c=[0.0, 0.2, 0.4])
        points = sensitivity_sweep(toy_split, config, "lambda_c", epochs=1)
        assert [p.value for p in points] == [0.0, 0.2, 0.4]

    def test_unknown_parameter(self, toy_split, small_config):
        with pytest.raises(ConfigurationError, match="cannot sweep 'lr'"):
            sensitivity_sweep(toy_split, small_config, "lr", [0.1])
