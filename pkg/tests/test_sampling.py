import json

import numpy as np
import pytest

from prefmod import sampling, synthdata, training
from prefmod.config import SamplerConfig
from prefmod.prompts import EMPTY, Prompt

PROMPTS = [Prompt("circle", "one", "left"), Prompt("cross", "two", "right"), EMPTY]


def test_euler_constant_field_exact():
    z1 = np.array([0.5, -0.25])
    v = np.array([0.125, 0.5])
    for steps in (1, 4, 8):
        out = sampling.euler(lambda z, t: v, z1, steps)
        assert np.array_equal(out, z1 - v)


def test_euler_times_visited():
    seen = []
    sampling.euler(lambda z, t: seen.append(t) or np.zeros_like(z), np.zeros(1), 4)
    assert seen == [1.0, 0.75, 0.5, 0.25]


def test_euler_linear_field():
    # v = z integrates backward to z0 = z1 * e^-1 as steps grow
    got = sampling.euler(lambda z, t: z, np.ones(1), 2000)[0]
    assert abs(got - np.exp(-1.0)) < 1e-3


def test_euler_errors():
    with pytest.raises(ValueError):
        sampling.euler(lambda z, t: z, np.ones(2), 0)
    with pytest.raises(sampling.NonFiniteError):
        sampling.euler(lambda z, t: np.full_like(z, np.inf), np.ones(2), 2)


@pytest.fixture(scope="module")
def state(tiny_stage1):
    return training.Stage1State.from_checkpoint(tiny_stage1)


def test_sampling_deterministic_and_clamped(tiny_cfg, state):
    a = sampling.sample_images(state.backbone, tiny_cfg.backbone, PROMPTS, [1, 2, 3], 5)
    b = sampling.sample_images(state.backbone, tiny_cfg.backbone, PROMPTS, [1, 2, 3], 5)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= -1.0 and a.max() <= 1.0
    assert a.shape == (3, 3, 16, 16)


def test_cells_independent_of_batching(tiny_cfg, state):
    both = sampling.sample_images(state.backbone, tiny_cfg.backbone, PROMPTS, [1, 2, 3], 4,
                                  adapters=state.adapters, acfg=tiny_cfg.adapter,
                                  embeddings=[state.bank[0], None, state.bank[1]])
    alone = sampling.sample_images(state.backbone, tiny_cfg.backbone, PROMPTS[2:], [3], 4,
                                   adapters=state.adapters, acfg=tiny_cfg.adapter,
                                   embeddings=[state.bank[1]])
    assert both[2].tobytes() == alone[0].tobytes()


def test_zero_delta_scale_is_unconditional(tiny_cfg, state):
    kw = dict(adapters=state.adapters, acfg=tiny_cfg.adapter, embeddings=[state.bank[0]] * 3)
    zero = sampling.sample_images(state.backbone, tiny_cfg.backbone, PROMPTS, [4, 5, 6], 4,
                                  delta_scale=0.0, **kw)
    plain = sampling.sample_images(state.backbone, tiny_cfg.backbone, PROMPTS, [4, 5, 6], 4)
    np.testing.assert_array_equal(zero, plain)


def test_conditioned_sampling_needs_adapters(tiny_cfg, state):
    with pytest.raises(ValueError):
        sampling.sample_images(state.backbone, tiny_cfg.backbone, PROMPTS[:1], [0], 2,
                               embeddings=[state.bank[0]])
    with pytest.raises(ValueError):
        sampling.sample_images(state.backbone, tiny_cfg.backbone, PROMPTS, [0], 2)


def test_grid_and_cell_regeneration(tiny_cfg, state, tmp_path):
    sc = SamplerConfig(steps=3, seed=9)
    users = [state.bank[0], None]
    grid = sampling.sample_batch(PROMPTS[:2], users, state.backbone, tiny_cfg.backbone, sc,
                                 adapters=state.adapters, acfg=tiny_cfg.adapter)
    assert grid.images.shape == (2, 2, 3, 16, 16)
    assert len(grid.manifest["cells"]) == 4
    cell = grid.manifest["cells"][1]
    one = sampling.sample(PROMPTS[cell["prompt_index"]], state.backbone, tiny_cfg.backbone,
                          SamplerConfig(steps=3, seed=cell["seed"]), adapters=state.adapters,
                          acfg=tiny_cfg.adapter, user_embedding=state.bank[0])
    assert one.tobytes() == grid.images[0, 1].tobytes()
    sampling.export_grid(grid, tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text()) == grid.manifest
    assert synthdata.read_raw(tmp_path / "grid.f64").tobytes() == grid.images.tobytes()
    head = (tmp_path / "grid.ppm").read_bytes()[:12]
    assert head.startswith(b"P6\n33 33\n255\n"[:12])


def test_grid_needs_cells(tiny_cfg, state):
    with pytest.raises(ValueError):
        sampling.sample_batch([], [None], state.backbone, tiny_cfg.backbone, SamplerConfig())


def test_to_uint8_and_tile():
    img = np.stack([np.full((2, 2), -1.0), np.zeros((2, 2)), np.full((2, 2), 1.0)])
    assert sampling.to_uint8(img)[0, 0].tolist() == [0, 128, 255]
    t = sampling.tile(np.zeros((2, 3, 3, 2, 2)))
    assert t.shape == (3, 5, 8) and t[0, 2, 0] == 1.0
