import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


def random_pyramid(gen, batch=2, shapes=((4, 4, 4), (6, 2, 2)), dtype=torch.float64):
    return [torch.randn(batch, *s, generator=gen, dtype=dtype) for s in shapes]


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


# desk-scale training runs: toy backbone, procedural dataset, 5 epochs

DESK_VARIANTS = {
    "cd": dict(loss_sd=False, loss_intra=False, loss_inter=False, cram_enabled=False),
    "cd+sd": dict(loss_intra=False, loss_inter=False, cram_enabled=False),
    "full": {},
    "no-affinity": dict(lambda2=0.0, lambda3=0.0),
}


class DeskRuns:
    """Trains each (variant, seed) on first request and caches the outcome."""

    def __init__(self, base):
        self.base = base
        self._runs = {}

    def get(self, name, seed):
        key = (name, seed)
        if key not in self._runs:
            self._runs[key] = self._run(name, seed)
        return self._runs[key]

    def _run(self, name, seed):
        import time

        from snl.config import TrainConfig
        from snl.evaluate import probe
        from snl.trainer import manifests, run_experiment

        cfg = TrainConfig.toy(
            seed=seed,
            data_root=str(self.base / "synthetic"),
            output_dir=str(self.base / f"{name}_{seed}"),
            **DESK_VARIANTS[name],
        )
        t0 = time.perf_counter()
        record, model = run_experiment(cfg)
        elapsed = time.perf_counter() - t0
        rep = probe(model, manifests(cfg)[1], cfg, "cutpaste", seed=0)
        return dict(
            image=record.metrics["image_auroc"],
            pixel=record.metrics["pixel_auroc"],
            probe=rep["auroc"],
            seconds=elapsed,
            initial=record.initial,
            history=record.history,
        )


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk"))
