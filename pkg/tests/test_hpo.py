"""Tuning-protocol tests on synthetic response surfaces."""

import math

import numpy as np
import pytest

from vitdetbench.hpo import (
    AuditLog,
    DEFAULT_CENTER,
    DP_CANDIDATES,
    GridResult,
    grid_around,
    run_protocol,
    search_lr_wd,
    select_dp,
    synthetic_quadratic,
)
from vitdetbench.tensor import InvalidInputError


class CountingEvaluator:
    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def __call__(self, *point):
        self.calls.append(point)
        return self.fn(*point)


class TestGrid:
    def test_grid_around_is_3x3_doubling(self):
        pts = grid_around(1.6e-4, 0.1)
        assert len(pts) == 9
        lrs = sorted({p[0] for p in pts})
        wds = sorted({p[1] for p in pts})
        assert lrs == [0.8e-4, 1.6e-4, 3.2e-4]
        assert wds == [0.05, 0.1, 0.2]

    def test_positive_center_required(self):
        with pytest.raises(InvalidInputError):
            grid_around(0.0, 0.1)


class TestSearch:
    def test_recovers_planted_optimum_no_expansion(self):
        ev = CountingEvaluator(synthetic_quadratic(DEFAULT_CENTER))
        res = search_lr_wd(ev, center=DEFAULT_CENTER)
        assert res.best == DEFAULT_CENTER
        assert res.expansions == []
        assert not res.boundary
        assert len(ev.calls) == 9

    def test_off_center_start_expands(self):
        """Optimum at (1.6e-4, 0.1) but searching from lr = 4e-5: the best
        grid point sits on the high-lr edge, forcing at least one expansion."""
        ev = CountingEvaluator(synthetic_quadratic(DEFAULT_CENTER))
        res = search_lr_wd(ev, center=(4e-5, 0.1))
        assert len(res.expansions) >= 1
        assert "lr-up" in res.expansions
        assert abs(math.log(res.best[0]) - math.log(1.6e-4)) < math.log(2) + 1e-9

    def test_expansion_evaluates_only_new_points(self):
        ev = CountingEvaluator(synthetic_quadratic(DEFAULT_CENTER))
        res = search_lr_wd(ev, center=(4e-5, 0.1))
        # no point evaluated twice
        assert len(ev.calls) == len(set(ev.calls))
        # each lr expansion adds one column (3 wd values)
        assert len(ev.calls) == 9 + 3 * len(res.expansions)

    def test_memoized_via_audit_log(self):
        log = AuditLog()
        ev1 = CountingEvaluator(synthetic_quadratic(DEFAULT_CENTER))
        search_lr_wd(ev1, center=DEFAULT_CENTER, log=log)
        ev2 = CountingEvaluator(synthetic_quadratic(DEFAULT_CENTER))
        search_lr_wd(ev2, center=DEFAULT_CENTER, log=log)
        assert ev2.calls == []  # everything served from the log

    def test_max_expansions_bound(self):
        # monotone surface: best always on the boundary, expansion capped
        ev = CountingEvaluator(lambda lr, wd: math.log(lr))
        res = search_lr_wd(ev, center=DEFAULT_CENTER, max_expansions=3)
        assert len(res.expansions) == 3
        assert res.boundary  # honestly reported as unconverged

    def test_tie_breaks_to_smallest_lr_then_wd(self):
        res = search_lr_wd(lambda lr, wd: 0.0, center=DEFAULT_CENTER, max_expansions=0)
        assert res.best == (0.8e-4, 0.05)


class TestSelectDp:
    def test_picks_argmax(self):
        assert select_dp(lambda dp: -(dp - 0.2) ** 2) == 0.2

    def test_tie_takes_smaller(self):
        assert select_dp(lambda dp: 1.0) == 0.0
        assert select_dp(lambda dp: 1.0 if dp >= 0.2 else 0.0) == 0.2

    def test_candidates_fixed(self):
        assert DP_CANDIDATES == (0.0, 0.1, 0.2, 0.3)

    def test_empty_candidates(self):
        with pytest.raises(InvalidInputError):
            select_dp(lambda dp: 0.0, candidates=())


class TestProtocol:
    def test_stage3_reuses_stage1_lr_wd(self):
        res = run_protocol(
            synthetic_quadratic(DEFAULT_CENTER),
            lambda dp: -(dp - 0.1) ** 2,
            lambda dp: -(dp - 0.3) ** 2,
        )
        assert res.base_formula["lr"] == res.large_formula["lr"]
        assert res.base_formula["wd"] == res.large_formula["wd"]
        assert res.base_formula["dp"] == 0.1
        assert res.large_formula["dp"] == 0.3

    def test_audit_log_records_stages(self):
        log = AuditLog()
        run_protocol(synthetic_quadratic(DEFAULT_CENTER),
                     lambda dp: 0.0, lambda dp: 0.0, log=log)
        stages = {e["stage"] for e in log.entries}
        assert stages == {"1-lr-wd", "2-dp-base", "3-dp-large"}

    def test_audit_log_roundtrip_and_resume(self, tmp_path):
        log = AuditLog()
        run_protocol(synthetic_quadratic(DEFAULT_CENTER),
                     lambda dp: -dp, lambda dp: dp, log=log)
        p = tmp_path / "audit.json"
        log.save(p)
        loaded = AuditLog.load(p)
        assert len(loaded.entries) == len(log.entries)
        # resuming with the loaded log performs zero fresh evaluations
        ev = CountingEvaluator(synthetic_quadratic(DEFAULT_CENTER))
        run_protocol(ev, lambda dp: -dp, lambda dp: dp, log=loaded)
        assert ev.calls == []

    def test_result_exposes_grid(self):
        res = run_protocol(synthetic_quadratic(DEFAULT_CENTER),
                           lambda dp: 0.0, lambda dp: 0.0)
        assert isinstance(res.grid, GridResult)
        assert res.grid.best_score == max(res.grid.scores.values())


class TestTrainingBackedEvaluator:
    def test_shapes_evaluator_end_to_end(self):
        """One minimal training-backed tuning stage: scores are finite and
        the log captures each point once."""
        from vitdetbench.backbone import BackboneConfig
        from vitdetbench.data import ShapesConfig, ShapesDataset
        from vitdetbench.train import TrainFormula, finetune

        ds = ShapesDataset(ShapesConfig(image_size=64), seed=0, size=4)

        def evaluator(lr, wd):
            cfg = BackboneConfig(depth=4, embed_dim=32, num_heads=4, patch_size=8,
                                 img_size=64, window_size=4, use_rel_pos=False)
            f = TrainFormula(lr=lr, wd=wd, epochs=1, batch_size=4, resolution=64,
                             scale_range=(0.9, 1.1))
            curve = finetune(cfg, f, "random", ds, seed=0)
            return -curve.records[-1]["metric"]

        log = AuditLog()
        res = search_lr_wd(evaluator, center=(4e-4, 0.05), max_expansions=0, log=log)
        assert all(np.isfinite(s) for s in res.scores.values())
        assert len(log.entries) == 9
