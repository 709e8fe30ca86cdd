#!/usr/bin/env python3
"""Smoke test for the `ddic` Python extension module.

Builds the cdylib with cargo, loads it, and exercises the bound surface:
dataset generation, prior mining, the end-to-end pipeline, and evaluation.
Run from anywhere inside the repository:

    python3 python/smoke_test.py
"""

import pathlib
import shutil
import subprocess
import sys
import sysconfig
import tempfile

REPO = pathlib.Path(__file__).resolve().parent.parent

SCENARIO = """
vars = 3
steps = 6
lag = 1
clients = 2
samples_per_client = 60
sparsity = 0.5
dynamics = "sinusoid"
seed = 11
"""

CONFIG = f"""
seed = 4

[scenario]
{SCENARIO}

[dism]
delta_hard = 0.5
delta_local = 0.5

[dcto]
rounds = 3
epochs = 2
latent = 4
"""


def build_and_import():
    subprocess.run(["cargo", "build", "-p", "ddic-py"], cwd=REPO, check=True)
    built = REPO / "target" / "debug" / "libddic.so"
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    stage = pathlib.Path(tempfile.mkdtemp(prefix="ddic-py-"))
    shutil.copy(built, stage / f"ddic{suffix}")
    sys.path.insert(0, str(stage))
    import ddic

    return ddic


def approx_leq(a, b, tol=1e-12):
    return a <= b + tol


def main():
    ddic = build_and_import()

    # --- generation ---------------------------------------------------------
    panels, truth = ddic.generate(SCENARIO)
    assert len(panels) == 2
    p = panels[0]
    assert (p.n_samples, p.steps, p.vars) == (60, 6, 3)
    assert len(p.values) == 60 * 6 * 3
    assert p.value(0, 0, 0) == p.values[0]
    assert truth.steps == 6 and truth.vars == 3 and truth.lag == 1
    assert len(truth.w_true) == 6 * 3 * 3
    # contemporaneous truth is acyclic: strictly upper-triangular support
    for t in range(truth.steps):
        for i in range(truth.vars):
            for j in range(i + 1):
                assert truth.w_true[(t * 3 + i) * 3 + j] == 0.0

    # determinism
    panels2, _ = ddic.generate(SCENARIO)
    assert panels2[0].values == p.values

    # --- prior mining -------------------------------------------------------
    priors = ddic.run_dism(panels, 1, delta_hard=0.5, delta_local=0.5)
    assert priors.steps == 6 and priors.vars == 3 and priors.lag == 1
    assert len(priors.s) == 6 * 3 * 3
    # soft mask nested inside hard mask, diagonal removed
    for idx, (s_bit, l_bit) in enumerate(zip(priors.s, priors.l_soft)):
        assert l_bit <= s_bit
    for t in range(6):
        for i in range(3):
            assert priors.s[(t * 3 + i) * 3 + i] == 0

    # --- full pipeline and evaluation ----------------------------------------
    panels3, truth3, priors3, estimate = ddic.run_pipeline(CONFIG)
    assert estimate.steps == 6 and estimate.vars == 3
    assert len(estimate.round_losses) == 3
    assert all(x == x for x in estimate.w_eff), "NaN in W estimate"
    # hard mask actually zeroes the estimate
    for idx, bit in enumerate(priors3.s):
        if bit == 0:
            assert estimate.w_eff[idx] == 0.0

    report = ddic.evaluate(estimate, truth3, panels3[0], shd_threshold=0.1)
    assert report.mae == report.mae and report.rmse == report.rmse
    assert approx_leq(report.mae, report.rmse)
    if report.auroc_mean is not None:
        assert 0.0 <= report.auroc_mean <= 1.0

    # --- error mapping --------------------------------------------------------
    try:
        ddic.generate("vars = 0\nsteps = 2\nlag = 0\nclients = 1\n"
                      "samples_per_client = 4\nsparsity = 0.5\n"
                      'dynamics = "constant"\nseed = 0\n')
    except ValueError:
        pass
    else:
        raise AssertionError("invalid scenario must raise ValueError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
