import numpy as np
import pytest
from hypothesis import settings

from avfulldit import model as M

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def tiny_arch(**changes) -> M.ArchitectureConfig:
    base = dict(c_v=16, c_a=8, n_v=1, n_a=1, n_av=1, heads_v=2, heads_a=2, c_text_v=8, c_text_a=8,
                c_time=8, frames_v=2, lat_v=4, frames_a=8, lat_a=3)
    base.update(changes)
    return M.ArchitectureConfig(**base)


@pytest.fixture
def tiny():
    return tiny_arch()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def model_inputs(cfg, b, seed):
    r = np.random.default_rng(seed)
    return (
        r.standard_normal((b, cfg.frames_v, cfg.lat_v)),
        r.standard_normal((b, cfg.frames_a, cfg.lat_a)),
        r.integers(0, 9, size=(b, 3)),
        r.integers(0, 9, size=(b, 3)),
        r.uniform(0.05, 0.95, size=b),
    )


def tiny_experiment(out="runs/tiny", **dotted):
    from avfulldit import config as C

    base = {
        "arch.c_v": 16, "arch.c_a": 8, "arch.n_v": 0, "arch.n_a": 0, "arch.n_av": 1,
        "arch.c_text_v": 8, "arch.c_text_a": 8, "arch.c_time": 8,
        "data.n_train": 12, "data.n_eval": 3, "train.steps": 20, "train.batch_size": 4,
        "train.checkpoint_every": 10, "train.val_every": 10, "infer.steps": 2,
        "compare.n_seeds": 2, "out": str(out),
    }
    base.update(dotted)
    return C.ExperimentConfig().override(**base)
