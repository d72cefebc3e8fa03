"""
Desk-scale acceptance: the full method comparison at 3% target data.

One matrix run (depth-3 U-Net, 64×64, 200 source / 100 target images, five
seeds) shared by every check below. Takes well over an hour; run with
`pytest -m acceptance`. A per-check verdict table lands next to the matrix
tables as acceptance.csv.
"""

import os
import time

import numpy as np
import pandas as pd
import pytest

from engine import segnet
from engine.config import preset_config
from sources.dataset import split
from sources.synthetic import desk_domains
from validation.evaluate import evaluate
from validation.matrix import NO_ADAPT, default_methods, run_matrix

pytestmark = pytest.mark.acceptance

FRACTION = 0.03
BUDGET_SECONDS = 2 * 60 * 60


@pytest.fixture(scope="module")
def desk():
    source, target = desk_domains(200, 100, 64, seed=0)
    return preset_config("desk"), source, target


@pytest.fixture(scope="module")
def comparison(desk, tmp_path_factory):
    config, source, target = desk
    start = time.perf_counter()
    result = run_matrix(default_methods(), [FRACTION], config, source, target,
                        out_dir=tmp_path_factory.mktemp("acceptance"),
                        workers=min(4, os.cpu_count() or 1))
    return result, time.perf_counter() - start


@pytest.fixture(scope="module")
def verdicts(comparison):
    rows = []
    yield rows
    result, _ = comparison
    pd.DataFrame(rows, columns=["check", "value", "threshold", "passed"]).to_csv(
        result.out_dir / "acceptance.csv", index=False,
    )


def _record(verdicts, check, value, threshold, passed):
    verdicts.append({"check": check, "value": value, "threshold": threshold, "passed": bool(passed)})
    return passed


def test_jsd_beats_no_adapt(comparison, verdicts):
    result, _ = comparison
    gain = result.cell_values("JSD", FRACTION).mean() - result.cell_values(NO_ADAPT.label, FRACTION).mean()
    assert _record(verdicts, "jsd_mean_gain", gain, 0.03, gain >= 0.03)

    sign = result.sign_tests[result.sign_tests["method"] == "JSD"].iloc[0]
    assert _record(verdicts, "jsd_seed_wins", int(sign["wins"]), 4, sign["wins"] >= 4)


def test_mmd_b_keeps_up_with_mmd_c(comparison, verdicts):
    result, _ = comparison
    gap = result.cell_values("MMD-B", FRACTION).mean() - result.cell_values("MMD-C", FRACTION).mean()
    assert _record(verdicts, "mmd_b_minus_mmd_c", gap, -0.01, gap >= -0.01)


def test_source_dice_is_not_given_up(comparison, verdicts):
    result, _ = comparison
    jsd = result.cell_values("JSD", FRACTION, "source_dice")
    none = result.cell_values(NO_ADAPT.label, FRACTION, "source_dice")
    worst = float(np.min(jsd - none))
    assert _record(verdicts, "jsd_source_drop_worst_seed", worst, -0.02, worst >= -0.02)


def test_training_beats_random_init(desk, comparison, verdicts):
    config, source, target = desk
    result, _ = comparison
    checkpoint = result.out_dir / "cells" / f"no-adapt_{FRACTION:g}" / "checkpoints" / "split0.dmck"
    seed = config.split_seeds()[0]
    _, val, _ = split(source, target, config.val_fraction, FRACTION, seed)
    trained = evaluate(checkpoint, val).domain_mean("source")
    untrained = evaluate(segnet.init(config.unet, seed), val).domain_mean("source")
    assert _record(verdicts, "trained_minus_random_source_dice", trained - untrained, 0.0, trained > untrained)


def test_runtime_budget(comparison, verdicts):
    _, seconds = comparison
    assert _record(verdicts, "runtime_seconds", seconds, BUDGET_SECONDS, seconds < BUDGET_SECONDS)
