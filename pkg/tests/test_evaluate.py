import csv
import math

import numpy as np
import pytest
import torch

from sbr import core, models, warp
from sbr.core import CoreError, PairedSample
from sbr.evaluate import (
    dice_score,
    evaluate_stack,
    landmark_rmse,
    register_pair,
)


class TestLandmarkRmse:
    def test_uniform_345_offset(self):
        tgt = torch.tensor([[10.0, 10.0], [20.0, 15.0], [5.0, 30.0]])
        src = tgt + torch.tensor([3.0, 4.0])
        assert landmark_rmse(src, tgt) == pytest.approx(5.0, abs=1e-12)

    def test_single_axis_offsets(self):
        tgt = torch.tensor([[8.0, 8.0], [16.0, 16.0]])
        src = tgt + torch.tensor([[1.0, 0.0], [0.0, 7.0]])
        expect = math.sqrt((1 + 49) / 2)
        assert landmark_rmse(src, tgt) == pytest.approx(expect, abs=1e-12)

    def test_field_transport_recovers_zero(self):
        # landmarks generated by pushing through a constant-offset field
        phi = core.identity_grid(32, 32) + torch.tensor([2.0, -1.0])[:, None, None]
        tgt = torch.tensor([[10.0, 10.0], [15.0, 20.0], [8.0, 25.0]])
        src = warp.transport_landmarks(tgt, phi)
        assert landmark_rmse(src, tgt) > 0
        assert landmark_rmse(src, tgt, phi) == pytest.approx(0.0, abs=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(CoreError):
            landmark_rmse(torch.zeros(0, 2), torch.zeros(0, 2))
        with pytest.raises(CoreError):
            landmark_rmse(None, torch.zeros(2, 2))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(CoreError):
            landmark_rmse(torch.zeros(3, 2), torch.zeros(2, 2))


class TestDiceScore:
    def test_identical_maps(self):
        seg = torch.tensor([[0, 1, 1], [2, 2, 3], [4, 0, 0]])
        out = dice_score(seg, seg)
        assert out == {1: 1.0, 2: 1.0, 3: 1.0, 4: 1.0}

    def test_half_overlap(self):
        a = torch.zeros(4, 4, dtype=torch.long)
        b = torch.zeros(4, 4, dtype=torch.long)
        a[0, :2] = 1       # two pixels of class 1
        b[0, :4] = 1       # four pixels, two shared
        out = dice_score(a, b)
        assert out[1] == pytest.approx(2 * 2 / (2 + 4))
        assert out[2] is None and out[3] is None and out[4] is None

    def test_disjoint_class(self):
        a = torch.zeros(4, 4, dtype=torch.long)
        b = torch.zeros(4, 4, dtype=torch.long)
        a[0, 0] = 2
        b[3, 3] = 2
        assert dice_score(a, b)[2] == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(CoreError):
            dice_score(torch.zeros(4, 4, dtype=torch.long),
                       torch.zeros(4, 5, dtype=torch.long))


class TestRegisterPair:
    def test_untrained_net_returns_identity_warp(self, tiny_stack):
        reg = models.RegistrationNet()
        s = tiny_stack[0]
        st, phi, warped = register_pair(None, reg, s)
        assert torch.equal(st, s.source)
        assert torch.equal(phi, core.identity_grid(*s.target.shape))
        assert torch.equal(warped, s.source)

    def test_translation_path_uses_generator(self, tiny_stack):
        torch.manual_seed(4)
        reg = models.RegistrationNet()
        gen = models.Generator()
        s = tiny_stack[0]
        st, _, _ = register_pair(gen, reg, s)
        expect, _ = models.translate(gen, s.source)
        assert torch.equal(st, expect.detach())

    def test_deterministic(self, tiny_stack, tiny_reg_payload):
        reg = models.build_registration_net(tiny_reg_payload)
        s = tiny_stack[1]
        out1 = register_pair(None, reg, s)
        out2 = register_pair(None, reg, s)
        for a, b in zip(out1, out2):
            assert torch.equal(a, b)


def _identity_reg_payload():
    reg = models.RegistrationNet()
    return {"kind": "registration", "config": {"levels": 4, "base_width": 16},
            "state": reg.state_dict(), "step": 0, "seed": 0,
            "train_config": {"stage": "reg"}}


class TestEvaluateStack:
    def test_unannotated_stack_rejected(self, tmp_path):
        bare = [PairedSample(source=torch.rand(32, 32), target=torch.rand(32, 32),
                             index=0)]
        with pytest.raises(CoreError):
            evaluate_stack(bare, _identity_reg_payload(), tmp_path)

    def test_identity_checkpoint_before_equals_after(self, tiny_stack, tmp_path):
        report = evaluate_stack(tiny_stack, _identity_reg_payload(), tmp_path)
        assert len(report.rows) == len(tiny_stack)
        for row in report.rows:
            assert row["rmse_after"] == pytest.approx(row["rmse_before"], abs=1e-5)
        agg = report.aggregates
        assert agg["rmse_after_mean"] == pytest.approx(agg["rmse_before_mean"],
                                                       abs=1e-5)

    def test_aggregates_match_rows(self, tiny_stack, tmp_path):
        report = evaluate_stack(tiny_stack, _identity_reg_payload(), tmp_path)
        before = [r["rmse_before"] for r in report.rows]
        assert report.aggregates["rmse_before_mean"] == pytest.approx(
            float(np.mean(before)))
        assert report.aggregates["rmse_before_median"] == pytest.approx(
            float(np.median(before)))
        dice_vals = [r["dice_before"][1] for r in report.rows
                     if r["dice_before"][1] is not None]
        assert report.aggregates["dice_before_c1"] == pytest.approx(
            float(np.mean(dice_vals)))

    def test_report_files_written(self, tiny_stack, tmp_path):
        evaluate_stack(tiny_stack, _identity_reg_payload(), tmp_path)
        for name in ("report.csv", "summary.txt", "rmse_box.png",
                     "dice_box.png", "manifest"):
            assert (tmp_path / name).exists(), name
        with (tmp_path / "report.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:3] == ["slice", "rmse_before", "rmse_after"]
        assert len(rows) == 1 + len(tiny_stack)
        summary = (tmp_path / "summary.txt").read_text()
        assert f"slices evaluated: {len(tiny_stack)}" in summary
        assert "rmse_before_mean" in summary

    def test_summary_means_match_csv(self, tiny_stack, tmp_path):
        report = evaluate_stack(tiny_stack, _identity_reg_payload(), tmp_path)
        with (tmp_path / "report.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        mean = float(np.mean([float(r["rmse_before"]) for r in rows]))
        assert report.aggregates["rmse_before_mean"] == pytest.approx(mean,
                                                                      abs=1e-5)

    def test_landmarks_only_slices(self, tiny_stack, tmp_path):
        partial = [PairedSample(source=s.source, target=s.target,
                                landmarks_src=s.landmarks_src,
                                landmarks_tgt=s.landmarks_tgt, index=s.index)
                   for s in tiny_stack[:3]]
        report = evaluate_stack(partial, _identity_reg_payload(), tmp_path)
        assert "dice_before_mean" not in report.aggregates
        assert "rmse_before_mean" in report.aggregates
        assert not (tmp_path / "dice_box.png").exists()
        for row in report.rows:
            assert all(v is None for v in row["dice_before"].values())

    def test_segmentation_only_slices(self, tiny_stack, tmp_path):
        partial = [PairedSample(source=s.source, target=s.target,
                                source_seg=s.source_seg, target_seg=s.target_seg,
                                index=s.index)
                   for s in tiny_stack[:3]]
        report = evaluate_stack(partial, _identity_reg_payload(), tmp_path)
        assert "rmse_before_mean" not in report.aggregates
        assert "dice_before_mean" in report.aggregates
        csv_text = (tmp_path / "report.csv").read_text()
        assert ",na,na," in csv_text

    def test_sbr_checkpoint_runs_translation(self, tiny_stack, tiny_sbr_payload,
                                             tmp_path):
        report = evaluate_stack(tiny_stack[:2], tiny_sbr_payload, tmp_path)
        assert report.provenance["seed"] == tiny_sbr_payload["seed"]
        assert len(report.rows) == 2

    def test_provenance_identifies_checkpoint(self, tiny_stack, tmp_path):
        p1 = _identity_reg_payload()
        r1 = evaluate_stack(tiny_stack[:2], p1, tmp_path / "a")
        torch.manual_seed(9)
        reg2 = models.RegistrationNet()
        with torch.no_grad():
            for p in reg2.parameters():
                p.add_(0.01 * torch.randn_like(p))
        p2 = dict(p1, state=reg2.state_dict())
        r2 = evaluate_stack(tiny_stack[:2], p2, tmp_path / "b")
        assert r1.provenance["checkpoint"] != r2.provenance["checkpoint"]
        assert r1.provenance["config_hash"] == r2.provenance["config_hash"]
