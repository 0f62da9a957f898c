import numpy as np
import pytest

from lcd_forge import data as Dm
from lcd_forge import env
from lcd_forge.language import HELD_OUT, TRAIN
from lcd_forge.tasks import TRAIN_TASKS


@pytest.fixture(scope="module")
def corpus():
    return Dm.generate_expert(TRAIN_TASKS[:3], 4, 20, 6, np.random.default_rng(0))


def test_generated_episodes(corpus):
    assert len(corpus) == 12
    for ep in corpus.episodes:
        assert ep.states.shape == (20, env.OBS_DIM) and ep.actions.shape == (19, env.ACT_DIM)
        assert ep.split == TRAIN
        np.testing.assert_allclose(env.dynamics(ep.states[:-1], ep.actions)[0], ep.states[1:])


def test_generation_is_seeded():
    a = Dm.generate_expert(TRAIN_TASKS[:2], 3, 10, 6, np.random.default_rng(4))
    b = Dm.generate_expert(TRAIN_TASKS[:2], 3, 10, 6, np.random.default_rng(4))
    assert all(np.array_equal(x.states, y.states) and x.text == y.text for x, y in zip(a.episodes, b.episodes))


def test_round_trip(tmp_path, corpus):
    corpus.meta["source"] = "unit"
    Dm.save_dataset(tmp_path / "d", corpus, "abc")
    back = Dm.load_dataset(tmp_path / "d", expect_hash="abc")
    assert back.meta == {"source": "unit"}
    for x, y in zip(corpus.episodes, back.episodes):
        np.testing.assert_allclose(x.states, y.states, atol=1e-7)
        assert (x.task_id, x.text, x.split, x.success) == (y.task_id, y.text, y.split, y.success)


def test_hash_mismatch_and_missing(tmp_path, corpus):
    Dm.save_dataset(tmp_path / "d", corpus, "abc")
    with pytest.raises(Dm.DatasetError, match="config hash"):
        Dm.load_dataset(tmp_path / "d", expect_hash="zzz")
    with pytest.raises(FileNotFoundError):
        Dm.load_dataset(tmp_path / "none")


def test_corrupt_blob_detected(tmp_path, corpus):
    Dm.save_dataset(tmp_path / "d", corpus, "abc")
    blob = tmp_path / "d" / "states.f32"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(Dm.DatasetError, match="blob sizes"):
        Dm.load_dataset(tmp_path / "d")


def test_held_out_instructions_refused_in_training_data(tmp_path, corpus):
    ep = corpus.episodes[0]
    bad = Dm.TrajectoryDataset([Dm.Episode(ep.states, ep.actions, ep.task_id, "please push the red block left", HELD_OUT)])
    with pytest.raises(Dm.DatasetError, match="held-out"):
        Dm.save_dataset(tmp_path / "bad", bad, "h")
    Dm.save_dataset(tmp_path / "ok", bad, "h", training=False)


def test_episode_shape_check():
    with pytest.raises(Dm.DatasetError):
        Dm.Episode(np.zeros((5, 8)), np.zeros((5, 3)), "push-red-left", "x")


def test_successful_filter(corpus):
    eps = [Dm.Episode(e.states, e.actions, e.task_id, e.text, e.split, i % 2 == 0) for i, e in enumerate(corpus.episodes)]
    assert len(Dm.TrajectoryDataset(eps).successful()) == 6
