import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefmod import synthdata as sd
from prefmod.prompts import EMPTY, Prompt, all_prompts

PROMPTS = all_prompts()


def random_case(rng):
    return PROMPTS[int(rng.integers(len(PROMPTS)))], sd.random_style(rng), int(rng.integers(2 ** 31))


def test_render_is_deterministic():
    rng = np.random.default_rng(0)
    p, s, seed = random_case(rng)
    assert np.array_equal(sd.render(p, s, seed), sd.render(p, s, seed))


def test_pure_red_background():
    style = sd.StyleParams(0.0, 1.0, 0.5, 0, 0.0)
    img = sd.render(EMPTY, style, 0)
    assert np.all(img[0] == 1.0) and np.all(img[1] == -1.0) and np.all(img[2] == -1.0)


@pytest.mark.parametrize("prompt", [p for p in PROMPTS if p.count == "three"])
def test_three_components(prompt):
    rng = np.random.default_rng(hash(prompt) % 2 ** 32)
    for _ in range(5):
        img = sd.render(prompt, sd.random_style(rng), int(rng.integers(2 ** 31)))
        assert sd.count_components(sd.foreground(img)) == 3


def test_counts_match_for_every_prompt():
    rng = np.random.default_rng(1)
    for p in PROMPTS:
        img = sd.render(p, sd.random_style(rng), 7)
        assert sd.count_components(sd.foreground(img)) == p.n


def test_round_trip_over_100_renders():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        p, s, seed = random_case(rng)
        worst = max(worst, sd.estimate_style(sd.render(p, s, seed), p).distance(s))
    assert worst <= sd.STYLE_TOLERANCE


def test_background_hue_circular_mean():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = sd.random_style(rng)
        est = sd.estimate_style(sd.render(EMPTY, s, 0))
        dh = abs(est.hue - s.hue) % 1.0
        assert min(dh, 1.0 - dh) <= 0.02
        assert est.roundness is None and est.offset is None


def test_style_estimate_independent_of_prompt():
    rng = np.random.default_rng(4)
    for _ in range(30):
        s = sd.random_style(rng)
        a, b = rng.choice(len(PROMPTS), 2, replace=False)
        ea = sd.estimate_style(sd.render(PROMPTS[a], s, 1), PROMPTS[a])
        eb = sd.estimate_style(sd.render(PROMPTS[b], s, 2), PROMPTS[b])
        assert ea.distance(eb) <= 0.08


def test_content_self_consistency():
    rng = np.random.default_rng(5)
    for _ in range(50):
        p, s, seed = random_case(rng)
        assert sd.content_check(sd.render(p, s, seed), p) >= 0.8


def test_content_blank_image():
    blank = sd.render(EMPTY, sd.StyleParams(0.3, 0.5, 0.5, 0, 0.0), 0)
    for p in PROMPTS:
        assert sd.content_check(blank, p) <= 0.1


def test_content_cross_template():
    rng = np.random.default_rng(6)
    for count, pos in itertools.product(("one", "two", "three"), ("left", "center", "right")):
        s = sd.random_style(rng)
        img = sd.render(Prompt("circle", count, pos), s, 3)
        own = sd.content_check(img, Prompt("circle", count, pos))
        assert sd.content_check(img, Prompt("square", count, pos)) < own


def test_content_invariant_under_style():
    rng = np.random.default_rng(7)
    for p in PROMPTS:
        scores = [sd.content_check(sd.render(p, sd.random_style(rng), 11), p) for _ in range(4)]
        assert max(scores) - min(scores) <= 0.05 or min(scores) >= 0.95


def test_perceptual_distance_basics():
    rng = np.random.default_rng(8)
    a = rng.uniform(-1, 1, (3, 16, 16))
    b = rng.uniform(-1, 1, (3, 16, 16))
    assert sd.perceptual_distance(a, a) == 0.0
    assert sd.perceptual_distance(a, b) == sd.perceptual_distance(b, a)
    with pytest.raises(ValueError):
        sd.perceptual_distance(a, a[:, :8, :8])


@settings(max_examples=50)
@given(st.integers(0, 2 ** 31))
def test_perceptual_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.uniform(-1, 1, (3, 16, 16)) for _ in range(3))
    assert sd.perceptual_distance(a, c) <= sd.perceptual_distance(a, b) + sd.perceptual_distance(b, c) + 1e-12


def test_expected_prior_distance_matches_monte_carlo():
    rng = np.random.default_rng(9)
    s = sd.random_style(rng)
    mc = np.mean([s.distance(sd.random_style(rng)) for _ in range(40_000)])
    assert abs(sd.expected_prior_distance(s) - mc) <= 0.005


# datasets ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small():
    return sd.make_dataset(4, 36, master_seed=3, n_heldout=2, n_prior=40)


def test_dataset_deterministic(small):
    again = sd.make_dataset(4, 36, master_seed=3, n_heldout=2, n_prior=40)
    assert small.users == again.users
    assert all(np.array_equal(a.image, b.image) and a.prompt == b.prompt
               for a, b in zip(small.samples + small.prior_samples, again.samples + again.prior_samples))


def test_user_styles_separated(small):
    for a, b in itertools.combinations(small.users, 2):
        assert a.style.distance(b.style) >= 0.15


def test_prompt_histogram_balanced(small):
    for u in small.users:
        hist = sd.prompt_histogram(small.samples_of(u.user_id))
        counts = [hist.get(p, 0) for p in PROMPTS]
        assert min(counts) > 0 and max(counts) / min(counts) <= 2


def test_rejection_sampling_gives_up():
    with pytest.raises(sd.DataError, match="fewer users|larger"):
        sd.make_dataset(60, 4, master_seed=0, min_distance=0.9, max_attempts=50)


def test_dataset_round_trip(tmp_path, small):
    sd.save_dataset(small, tmp_path / "ds")
    back = sd.load_dataset(tmp_path / "ds")
    assert back.users == small.users
    for a, b in zip(small.samples + small.prior_samples, back.samples + back.prior_samples):
        assert a.image.tobytes() == b.image.tobytes()
        assert (a.prompt, a.user_id, a.seed, a.style) == (b.prompt, b.user_id, b.seed, b.style)


def test_raw_format_rejects_truncation(tmp_path):
    sd.write_raw(tmp_path / "x.f64", np.arange(6.0).reshape(2, 3))
    blob = (tmp_path / "x.f64").read_bytes()
    (tmp_path / "y.f64").write_bytes(blob[:-8])
    with pytest.raises(sd.DataError):
        sd.read_raw(tmp_path / "y.f64")
    assert np.array_equal(sd.read_raw(tmp_path / "x.f64"), np.arange(6.0).reshape(2, 3))
