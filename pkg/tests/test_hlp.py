from collections import Counter

import numpy as np
import pytest

from lcd_forge import hlp as Hp
from lcd_forge import tensor as T
from lcd_forge.data import TrajectoryDataset, save_dataset
from lcd_forge.denoiser import DenoiserConfig
from lcd_forge.language import TRAIN, HashEmbedder, held_out_texts
from lcd_forge.llp import GoalReachingExpert
from lcd_forge.tasks import ALL_TASKS, TRAIN_TASKS

TINY = DenoiserConfig(horizon=4, latent_dim=4, embed_dim=16, model_dim=16, groups=4, context_tokens=2)


# -- subsampling --------------------------------------------------------------------


def brute_force_windows(latents, c, H):
    out = []
    for e, z in enumerate(latents):
        for t0 in range(len(z)):
            if t0 % c == 0 and t0 + (H - 1) * c <= len(z) - 1:
                out.append((e, t0, tuple(tuple(z[t0 + k * c]) for k in range(H))))
    return Counter(out)


def test_window_span_arithmetic():
    assert Hp.plan_starts(29, 4, 8).tolist() == [0]
    assert Hp.plan_starts(28, 4, 8).tolist() == []
    z = np.arange(3.0)[:, None]
    ps = Hp.subsample_plans([z], np.zeros((1, 2)), 1, 2)
    assert ps.plans[:, :, 0].tolist() == [[0.0, 1.0], [1.0, 2.0]]


@pytest.mark.parametrize("lengths,c,H", [((29, 12, 40), 4, 8), ((3, 5, 7), 1, 2), ((9, 10, 11, 2), 3, 3)])
def test_subsampling_matches_brute_force(lengths, c, H, rng):
    latents = [rng.standard_normal((n, 2)) for n in lengths]
    emb = rng.standard_normal((len(lengths), 5))
    ps = Hp.subsample_plans(latents, emb, c, H)
    got = Counter((int(e), int(s), tuple(map(tuple, p))) for e, s, p in zip(ps.episode, ps.start, ps.plans))
    assert got == brute_force_windows(latents, c, H)
    np.testing.assert_array_equal(ps.embeddings, emb[ps.episode])
    assert ps.skipped == sum(n <= (H - 1) * c for n in lengths)


def test_subsampling_rejects_bad_arguments():
    with pytest.raises(ValueError):
        Hp.subsample_plans([np.zeros((5, 2))], np.zeros((1, 3)), 0, 4)
    with pytest.raises(ValueError):
        Hp.subsample_plans([np.zeros((5, 2))], np.zeros((1, 3)), 1, 1)


# -- on-policy collection -------------------------------------------------------------


def test_expert_stub_collection_matches_expert(tmp_path):
    data, report = Hp.collect_onpolicy(GoalReachingExpert(), TRAIN_TASKS, 30, np.random.default_rng(0), 4, 100, 24)
    assert report.episodes == 30 * len(TRAIN_TASKS)
    assert all(rate >= 0.95 for rate in report.success_rate.values()), report.success_rate
    assert report.flagged == []
    banned = held_out_texts(ALL_TASKS)
    assert all(e.split == TRAIN and e.text not in banned for e in data.episodes)


def test_collection_is_deterministic(tmp_path):
    for name in ("a", "b"):
        data, _ = Hp.collect_onpolicy(GoalReachingExpert(), TRAIN_TASKS[:3], 4, np.random.default_rng(9), 4, 20, 8)
        save_dataset(tmp_path / name, data, "h")
    for f in ("index.txt", "states.f32", "actions.f32"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class FrozenArm:
    latent_dim = 8

    def encode(self, obs):
        return np.atleast_2d(obs).copy()

    def act(self, obs, goal):
        return np.zeros((len(np.atleast_2d(obs)), 3))


def test_zero_success_task_flagged():
    _, report = Hp.collect_onpolicy(FrozenArm(), TRAIN_TASKS[:2], 3, np.random.default_rng(0), 4, 10)
    assert sorted(report.flagged) == sorted(t.task_id for t in TRAIN_TASKS[:2])


# -- latent cache ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def cached(small_expert, small_llp):
    llp, _ = small_llp
    data = TrajectoryDataset(small_expert.episodes[:60])
    return data, llp, Hp.cache_latents(data, llp, Hp.params_hash(llp.state_dict()), HashEmbedder())


def test_cached_latent_equals_fresh_encoding(cached):
    data, llp, cache = cached
    rng = np.random.default_rng(0)
    for _ in range(20):
        e = int(rng.integers(len(cache)))
        t = int(rng.integers(len(cache.latents[e])))
        fresh = llp.encode(data.episodes[e].states[t])[0]
        assert np.max(np.abs(cache.latents[e][t] - fresh)) < 1e-6 * max(1.0, np.abs(fresh).max())


def test_cache_size_accounting(cached):
    _, _, cache = cached
    rep = cache.size_report()
    steps = sum(len(z) for z in cache.latents)
    assert rep["cached_floats"] == steps * 32 and rep["raw_floats"] == steps * 8
    assert rep["ratio"] == 4.0


def test_cache_files_byte_identical(cached, tmp_path):
    data, llp, cache = cached
    again = Hp.cache_latents(data, llp, cache.encoder_hash, HashEmbedder())
    Hp.save_latents(tmp_path / "a", cache, "cfg")
    Hp.save_latents(tmp_path / "b", again, "cfg")
    for f in ("index.txt", "latents.f32", "embeddings.f32"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    back = Hp.load_latents(tmp_path / "a", expect_hash="cfg")
    assert all(np.array_equal(x, y) for x, y in zip(back.latents, cache.latents))
    assert back.texts == cache.texts and back.encoder_hash == cache.encoder_hash
    with pytest.raises(ValueError, match="config hash"):
        Hp.load_latents(tmp_path / "a", expect_hash="other")


def test_failures_dropped_unless_requested(small_expert, small_llp):
    llp, _ = small_llp
    eps = list(small_expert.episodes[:4])
    eps[1].success = False
    try:
        data = TrajectoryDataset(eps)
        assert len(Hp.cache_latents(data, llp, "h", HashEmbedder())) == 3
        assert len(Hp.cache_latents(data, llp, "h", HashEmbedder(), include_failures=True)) == 4
    finally:
        eps[1].success = True


def test_append_refuses_other_encoder(cached):
    _, _, cache = cached
    other = Hp.LatentEpisodes([], np.zeros((0, 64)), [], [], "different")
    with pytest.raises(ValueError, match="encoder"):
        cache.append(other)


def test_plan_file_round_trip(tmp_path, rng):
    ps = Hp.subsample_plans([rng.standard_normal((20, 4)) for _ in range(3)], rng.standard_normal((3, 16)), 2, 4)
    Hp.save_plans(tmp_path / "p", ps, "enc", "cfg")
    back, header = Hp.load_plans(tmp_path / "p", expect_hash="cfg")
    np.testing.assert_allclose(back.plans, ps.plans.astype(np.float32))
    np.testing.assert_array_equal(back.episode, ps.episode)
    assert header["encoder_hash"] == "enc"


def test_params_hash_sensitivity(rng):
    a = {"w": rng.standard_normal((3, 3)), "b": np.zeros(3)}
    b = {k: v.copy() for k, v in a.items()}
    assert Hp.params_hash(a) == Hp.params_hash(b)
    b["w"][0, 0] += 1e-12
    assert Hp.params_hash(a) != Hp.params_hash(b)


# -- the diffusion policy ----------------------------------------------------------------


def tiny_config(**kw):
    return Hp.HLPConfig(TINY, **{"steps": 30, "batch": 8, "lr": 1e-3, **kw})


def test_training_is_reproducible(rng):
    plans = rng.standard_normal((20, 4, 4))
    cond = rng.standard_normal((20, 16))
    runs = [Hp.train_hlp(plans, cond, tiny_config(), np.random.default_rng(4))[1] for _ in range(2)]
    assert runs[0].losses == runs[1].losses


def test_training_checks_shapes(rng):
    with pytest.raises(T.ShapeError):
        Hp.train_hlp(rng.standard_normal((5, 3, 4)), rng.standard_normal((5, 16)), tiny_config(), rng)
    with pytest.raises(T.ShapeError):
        Hp.train_hlp(rng.standard_normal((5, 4, 4)), rng.standard_normal((5, 15)), tiny_config(), rng)


def test_bad_head_rejected():
    with pytest.raises(ValueError):
        Hp.HighLevelPolicy(tiny_config(head="x0"))


def test_sampling_pins_current_state_and_round_trips(tmp_path, rng):
    plans = rng.standard_normal((20, 4, 4))
    cond = rng.standard_normal((20, 16))
    calls = []
    policy, _ = Hp.train_hlp(plans, cond, tiny_config(checkpoint_every=10), np.random.default_rng(0),
                             on_checkpoint=lambda p, s: calls.append(s))
    assert calls == [10, 20, 30]
    current = rng.standard_normal((3, 4))
    out = policy.sample(cond[:3], current, np.random.default_rng(1), 5)
    assert out.shape == (3, 4, 4)
    np.testing.assert_allclose(out[:, 0], current)
    policy.save(tmp_path / "hlp")
    back, _ = Hp.HighLevelPolicy.load(tmp_path / "hlp")
    np.testing.assert_array_equal(back.sample(cond[:3], current, np.random.default_rng(1), 5), out)
    with pytest.raises(T.ShapeError):
        policy.sample(cond[:1], np.zeros((1, 5)), np.random.default_rng(0), 5)


def test_unfitted_policy_cannot_sample():
    with pytest.raises(RuntimeError):
        Hp.HighLevelPolicy(tiny_config()).sample(np.zeros((1, 16)), np.zeros((1, 4)), np.random.default_rng(0), 3)


@pytest.mark.slow
def test_conditioned_samples_find_their_task_cluster():
    T.set_float_mode(32)
    emb = HashEmbedder(16)
    rng = np.random.default_rng(0)
    n, H, D = 200, 4, 4
    ramp = np.linspace(0, 1, H)[:, None]
    sign = np.repeat([1.0, -1.0], n)
    end = np.zeros((2 * n, 1, D))
    end[:, 0, 0], end[:, 0, 1] = sign, -sign
    plans = rng.normal(0, 0.3, (2 * n, 1, D)) * (1 - ramp) + end * ramp + rng.normal(0, 0.05, (2 * n, H, D))
    cond = emb.embed_many(["push the red block left"] * n + ["reach the top right corner"] * n)
    cfg = Hp.HLPConfig(TINY, steps=2500, lr=1e-3, batch=32)
    policy, _ = Hp.train_hlp(plans, cond, cfg, np.random.default_rng(1))
    pick = np.r_[0:50, n:n + 50]
    out = policy.sample(cond[pick], plans[pick, 0], np.random.default_rng(2), 10)
    centers = np.array([[1.0, -1.0, 0.0, 0.0], [-1.0, 1.0, 0.0, 0.0]])
    nearest = np.argmin(np.linalg.norm(out[:, -1, None, :] - centers[None], axis=-1), axis=1)
    assert np.mean(nearest == np.repeat([0, 1], 50)) >= 0.9


# -- instruction augmentation --------------------------------------------------------------


def test_augmenter_without_noise_is_the_plain_embedding():
    emb = HashEmbedder(16)
    texts = ["push the red block left", "reach the top right corner", "push the red block left"]
    aug = Hp.InstructionAugmenter(emb, texts, 0.0, 0.0)
    out = aug(np.array([0, 1, 2]), np.random.default_rng(0))
    np.testing.assert_allclose(out, emb.embed_many(texts), atol=1e-12)


def test_augmenter_only_drops_filler_tokens():
    emb = HashEmbedder(16)
    text = "push the red block left"
    rows = emb.token_rows(text)
    untouched = Hp.InstructionAugmenter(emb, [text], 0.999, 0.0)
    np.testing.assert_allclose(untouched(np.zeros(5, dtype=int), np.random.default_rng(0)), emb.embed_many([text] * 5),
                               atol=1e-12)
    aug = Hp.InstructionAugmenter(emb, [text], 0.999, 0.0, filler=frozenset({"the"}))
    out = aug(np.zeros(60, dtype=int), np.random.default_rng(1))
    kept = rows[[0, 2, 3, 4]].mean(axis=0)
    kept /= np.linalg.norm(kept)
    exact = np.linalg.norm(out - kept, axis=1) < 1e-12
    # "the" is dropped and replaced by an unknown row half of the time
    assert 15 <= exact.sum() <= 45
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)


def test_filler_tokens_are_shared_by_every_task_of_a_kind():
    texts = ["push the red block left", "shove the green block up", "reach the top left corner",
             "go to the bottom right corner"]
    tids = ["push-red-left", "push-green-up", "reach-top-left", "reach-bottom-right"]
    assert Hp.filler_tokens(texts, tids) == {"the", "block", "corner"}


def test_augmenter_is_seeded_and_leaves_external_texts_alone():
    vec = np.ones(16) / 4.0
    emb = HashEmbedder(16, external={"custom words": vec})
    aug = Hp.InstructionAugmenter(emb, ["custom words", "reach the top left corner"], 0.5, 1.0)
    a = aug(np.array([0, 1, 1]), np.random.default_rng(3))
    b = aug(np.array([0, 1, 1]), np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a[0], vec)
    assert not np.allclose(a[1], a[2])


def test_augmentation_requires_texts(rng):
    plans = rng.standard_normal((6, 4, 4))
    cond = HashEmbedder(16).embed_many(["reach the top left corner"] * 6)
    with pytest.raises(ValueError, match="augmentation"):
        Hp.train_hlp(plans, cond, tiny_config(token_dropout=0.2), rng)
    policy, hist = Hp.train_hlp(plans, cond, tiny_config(token_dropout=0.2, unknown_tokens=0.5), np.random.default_rng(0),
                                texts=["reach the top left corner"] * 6, embedder=HashEmbedder(16))
    assert len(hist.losses) == 30 and np.all(np.isfinite(hist.losses))
