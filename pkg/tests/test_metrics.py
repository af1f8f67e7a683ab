import csv

import numpy as np
import pytest

from oracles import assd_oracle, dice_oracle, surface_oracle
from protoseg.data import CaseInfo, DatasetError, DatasetManifest, write_case
from protoseg.metrics import (
    CaseResult,
    ClassMetrics,
    assd,
    binary_surface,
    dice_score,
    evaluate_split,
    format_summary_table,
    summarize,
    write_records,
)


def random_mask(rng, shape=(8, 8, 8), p=0.3):
    while True:
        mask = rng.random(shape) < p
        if binary_surface(mask).any():
            return mask


# ---------------------------------------------------------------- dice


def test_dice_identical_masks():
    mask = np.zeros((4, 4, 4), bool)
    mask[1:3, 1:3, 1:3] = True
    assert dice_score(mask, mask) == 100.0


def test_dice_disjoint_masks():
    a = np.zeros((4, 4, 4), bool)
    b = np.zeros((4, 4, 4), bool)
    a[0, 0, 0] = True
    b[3, 3, 3] = True
    assert dice_score(a, b) == 0.0


def test_dice_half_overlap():
    # |A| = |B| = 4 with 2 shared voxels -> 2*2/(4+4) = 50%
    a = np.zeros((1, 2, 4), bool)
    b = np.zeros((1, 2, 4), bool)
    a[0, 0] = True
    b[0, :, :2] = True
    assert int(a.sum()) == 4 and int(b.sum()) == 4 and int((a & b).sum()) == 2
    assert dice_score(a, b) == 50.0


def test_dice_both_empty_is_perfect():
    empty = np.zeros((3, 3, 3), bool)
    assert dice_score(empty, empty) == 100.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        dice_score(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))


def test_dice_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.random((6, 6, 6)) < 0.4, rng.random((6, 6, 6)) < 0.4
        assert dice_score(a, b) == pytest.approx(dice_oracle(a, b), abs=1e-12)


# --------------------------------------------------------------- surface


def test_surface_of_cube():
    mask = np.zeros((5, 5, 5), bool)
    mask[1:4, 1:4, 1:4] = True
    surface = binary_surface(mask)
    # 3x3x3 cube: everything but the single interior voxel
    assert int(surface.sum()) == 26
    assert not surface[2, 2, 2]


def test_surface_single_voxel():
    mask = np.zeros((3, 3, 3), bool)
    mask[1, 1, 1] = True
    assert np.array_equal(binary_surface(mask), mask)


def test_surface_touching_border():
    # volume boundary counts as background, so a full mask is all surface
    # except its interior
    mask = np.ones((3, 4, 5), bool)
    surface = binary_surface(mask)
    assert int(surface.sum()) == 3 * 4 * 5 - (1 * 2 * 3)
    assert not surface[1, 1:3, 1:4].any()


def test_surface_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        mask = rng.random((6, 6, 6)) < 0.4
        assert np.array_equal(binary_surface(mask), surface_oracle(mask))


# ------------------------------------------------------------------ assd


def test_assd_identical_masks_is_zero():
    mask = np.zeros((5, 5, 5), bool)
    mask[1:4, 2, 2] = True
    assert assd(mask, mask) == 0.0


def test_assd_single_voxels_unit_spacing():
    a = np.zeros((7, 3, 3), bool)
    b = np.zeros((7, 3, 3), bool)
    a[1, 1, 1] = True
    b[4, 1, 1] = True
    assert assd(a, b) == pytest.approx(3.0, abs=1e-12)


def test_assd_single_voxels_anisotropic_spacing():
    a = np.zeros((7, 3, 3), bool)
    b = np.zeros((7, 3, 3), bool)
    a[1, 1, 1] = True
    b[4, 1, 1] = True
    assert assd(a, b, spacing_mm=(2.0, 1.0, 1.0)) == pytest.approx(6.0, abs=1e-12)


def test_assd_symmetric():
    rng = np.random.default_rng(2)
    a, b = random_mask(rng), random_mask(rng)
    assert assd(a, b) == pytest.approx(assd(b, a), abs=1e-12)


def test_assd_matches_all_pairs_oracle():
    rng = np.random.default_rng(3)
    for trial in range(30):
        a, b = random_mask(rng), random_mask(rng)
        spacing = (1.0, 1.0, 1.0) if trial % 2 == 0 else tuple(rng.uniform(0.5, 4.0, 3))
        got = assd(a, b, spacing)
        want = assd_oracle(a, b, spacing)
        assert got == pytest.approx(want, abs=1e-6), f"trial {trial} spacing {spacing}"


def test_assd_empty_surface_is_undefined():
    mask = np.zeros((4, 4, 4), bool)
    other = np.zeros((4, 4, 4), bool)
    other[1, 1, 1] = True
    with pytest.warns(UserWarning, match="empty surface"):
        assert assd(mask, other) is None
    with pytest.warns(UserWarning):
        assert assd(other, mask) is None


def test_assd_rejects_bad_inputs():
    mask = np.ones((2, 2, 2), bool)
    with pytest.raises(ValueError, match="shape mismatch"):
        assd(mask, np.ones((2, 2, 3), bool))
    with pytest.raises(ValueError, match="spacing must be positive"):
        assd(mask, mask, spacing_mm=(1.0, 0.0, 1.0))


# ------------------------------------------------------------- summaries


def test_summarize_excludes_undefined_assd(caplog):
    results = [
        CaseResult("a", [ClassMetrics(1, 90.0, 2.0)]),
        CaseResult("b", [ClassMetrics(1, 70.0, None)]),
        CaseResult("c", [ClassMetrics(1, 80.0, 4.0)]),
    ]
    with caplog.at_level("WARNING"):
        summary = summarize(results, [1])
    assert summary.mean_dsc == [pytest.approx(80.0)]
    assert summary.mean_assd == [pytest.approx(3.0)]
    assert summary.avg_dsc == pytest.approx(80.0)
    assert summary.avg_assd == pytest.approx(3.0)
    assert "undefined surface distance" in caplog.text


def test_summarize_all_undefined():
    results = [CaseResult("a", [ClassMetrics(1, 100.0, None)])]
    summary = summarize(results, [1])
    assert summary.mean_assd == [None]
    assert summary.avg_assd is None


def test_format_summary_table():
    results = [
        CaseResult("a", [ClassMetrics(1, 90.0, 1.5), ClassMetrics(2, 70.0, None)]),
    ]
    summary = summarize(results, [1, 2])
    table = format_summary_table(summary, class_names=["background", "left", "right"])
    lines = table.splitlines()
    assert len(lines) == 3
    assert "left" in lines[0] and "right" in lines[0] and "Avg" in lines[0]
    assert "DSC (%)" in lines[1] and "90.00" in lines[1] and "80.00" in lines[1]
    assert "ASSD (mm)" in lines[2] and "1.50" in lines[2] and "undef" in lines[2]


def test_write_records_round_trip(tmp_path):
    results = [
        CaseResult("a", [ClassMetrics(1, 87.5, 1.25)]),
        CaseResult("b", [ClassMetrics(1, 60.0, None)]),
    ]
    path = write_records(results, tmp_path / "records.csv")
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["case_id", "class", "dsc_percent", "assd_mm"]
    assert rows[1] == ["a", "1", "87.5", "1.25"]
    assert rows[2] == ["b", "1", "60", ""]


# --------------------------------------------------------- split evaluation


def block_case(root, case_id, shape=(3, 16, 16), split_col=8):
    rng = np.random.default_rng(hash(case_id) % 2**32)
    voxels = rng.normal(size=shape).astype(np.float32)
    label = np.zeros(shape, np.uint8)
    label[:, :, :split_col] = 1
    write_case(root, case_id, voxels, (5.0, 1.0, 1.0), 2, label)
    return CaseInfo(case_id, shape, (5.0, 1.0, 1.0), True)


def block_manifest(root, shape=(3, 16, 16), split_col=8):
    cases = [block_case(root, cid, shape, split_col) for cid in ("t0", "t1")]
    return DatasetManifest(
        root=root, class_count=2, cases=cases,
        split={"train": [], "val": [], "test": ["t0", "t1"]},
        labeled_case_ids=[],
    )


def test_evaluate_split_perfect_predictor(tmp_path):
    manifest = block_manifest(tmp_path)

    def predict(slices):
        n, _, t, _ = slices.shape
        probs = np.zeros((n, 2, t, t), np.float32)
        probs[:, 1, :, :8] = 1.0
        probs[:, 0, :, 8:] = 1.0
        return probs

    results, summary = evaluate_split(predict, manifest, "test", target_size=16)
    assert [r.case_id for r in results] == ["t0", "t1"]
    assert summary.avg_dsc == pytest.approx(100.0)
    assert summary.avg_assd == pytest.approx(0.0)
    assert summary.spacing_source == "manifest"


def test_evaluate_split_restacks_to_original_grid(tmp_path):
    # cases are 32 wide but predicted at 16; the left-half prediction must map
    # back to the left half of the original grid exactly
    manifest = block_manifest(tmp_path, shape=(3, 32, 32), split_col=16)

    def predict(slices):
        n, _, t, _ = slices.shape
        assert t == 16
        probs = np.zeros((n, 2, t, t), np.float32)
        probs[:, 1, :, :8] = 1.0
        probs[:, 0, :, 8:] = 1.0
        return probs

    _, summary = evaluate_split(predict, manifest, "test", target_size=16)
    assert summary.avg_dsc == pytest.approx(100.0)
    assert summary.avg_assd == pytest.approx(0.0)


def test_evaluate_split_uses_case_spacing(tmp_path):
    # one-column prediction offset: every predicted surface voxel sits 1mm from
    # the reference surface in-plane, so spacing along axis 0 must not leak in
    manifest = block_manifest(tmp_path)

    def predict(slices):
        n, _, t, _ = slices.shape
        probs = np.zeros((n, 2, t, t), np.float32)
        probs[:, 1, :, :7] = 1.0
        probs[:, 0, :, 7:] = 1.0
        return probs

    _, summary = evaluate_split(predict, manifest, "test", target_size=16)
    assert summary.avg_dsc < 100.0
    assert summary.avg_assd is not None and 0.0 < summary.avg_assd < 2.0


def test_evaluate_split_missing_split(tmp_path):
    manifest = block_manifest(tmp_path)
    with pytest.raises(DatasetError, match="empty or missing"):
        evaluate_split(lambda s: s, manifest, "bogus")


def test_evaluate_split_requires_labels(tmp_path):
    rng = np.random.default_rng(0)
    voxels = rng.normal(size=(2, 16, 16)).astype(np.float32)
    write_case(tmp_path, "u0", voxels, (1.0, 1.0, 1.0), 2, None)
    manifest = DatasetManifest(
        root=tmp_path, class_count=2,
        cases=[CaseInfo("u0", (2, 16, 16), (1.0, 1.0, 1.0), False)],
        split={"test": ["u0"]}, labeled_case_ids=[],
    )
    with pytest.raises(DatasetError, match="has no labels"):
        evaluate_split(lambda s: s, manifest, "test")
