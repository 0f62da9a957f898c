import numpy as np
import pytest

from lcd_forge import tasks as Tk


def test_family_shape():
    assert len(Tk.ALL_TASKS) == 16
    assert len(Tk.TRAIN_TASKS) == 12 and len(Tk.HELD_OUT) == 4
    assert all(t.held_out for t in Tk.HELD_OUT)
    assert {t.task_id for t in Tk.TRAIN_TASKS}.isdisjoint(Tk.HELD_OUT_TASKS)


def test_unknown_task_id():
    with pytest.raises(KeyError, match="push-pink-left"):
        Tk.get_task("push-pink-left")


def test_push_target_is_relative_to_start():
    obs = np.array([0.5, 0.5, 0.3, 0.4, 0.6, 0.6, 0.7, 0.3])
    np.testing.assert_allclose(Tk.get_task("push-green-right").target(obs), [0.8, 0.6])
    np.testing.assert_allclose(Tk.get_task("push-blue-down").target(obs), [0.7, 0.1])


def test_target_is_clipped_to_table():
    obs = np.array([0.5, 0.5, 0.1, 0.4, 0.6, 0.6, 0.7, 0.3])
    np.testing.assert_allclose(Tk.get_task("push-red-left").target(obs), [0.0, 0.4])


def test_predicate_inside_and_outside_threshold():
    task = Tk.get_task("reach-top-right")
    obs = np.zeros((2, 8))
    obs[0, :2] = [0.8, 0.7501]
    obs[1, :2] = [0.8, 0.7499]
    assert task.satisfied(obs, task.target(obs[0])).tolist() == [True, False]
