import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))


def tiny_config(out, **over):
    """A seconds-scale pipeline configuration on a reduced toy corpus."""
    cfg = {
        "dataset": {"toy": True, "name": "toy", "toy_params": {"n_per_class": 10, "n_classes": 3, "sample_rate_hz": 8000, "seed": 0}},
        "model": {"stem_channels": 4, "stem_stride": 2, "stages": [[1, 4, 2], [1, 8, 2]]},
        "train": {"learning_rate": 0.02, "max_epochs": 3, "patience": 1, "batch_size": 8, "folds": 2},
        "attacks": {
            "samples": 3,
            "batch_size": 3,
            "grid": [
                {"algorithm": "FGSM", "epsilon": [1.0, 8.0]},
                {"algorithm": "BIM-a", "epsilon": [1.0, 8.0], "max_iter": 4},
            ],
        },
        "transfer": {"models": 2, "spec": {"algorithm": "FGSM", "epsilon": 25.5}},
        "seed": 0,
        "workers": 1,
        "out": str(out),
    }
    for k, v in over.items():
        cfg[k] = v
    return cfg


@pytest.fixture
def tiny(tmp_path):
    return tiny_config(tmp_path / "run")


# -- acceptance summary -----------------------------------------------------------
# test_acceptance.py records one verdict per criterion; they are printed at the
# end of the session as "criterion N: PASS|FAIL  <detail>".

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
