import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcd_forge import language as Lg
from lcd_forge.tasks import ALL_TASKS, get_task


def test_train_instruction_for_push_red_left():
    instr = Lg.sample_instruction(get_task("push-red-left"), Lg.TRAIN, np.random.default_rng(0))
    assert instr.task_id == "push-red-left"
    assert instr.text in Lg.templates(get_task("push-red-left"), Lg.TRAIN)
    assert "push the red block left" in Lg.templates(get_task("push-red-left"), Lg.TRAIN)
    assert instr.split == Lg.TRAIN


def test_same_seed_same_instruction():
    task = get_task("reach-top-left")
    a = Lg.sample_instruction(task, Lg.HELD_OUT, np.random.default_rng(3))
    b = Lg.sample_instruction(task, Lg.HELD_OUT, np.random.default_rng(3))
    assert a.text == b.text and np.array_equal(a.embedding, b.embedding)


def test_every_template_eventually_drawn():
    rng = np.random.default_rng(11)
    for task in (get_task("push-blue-up"), get_task("reach-bottom-right")):
        for split in Lg.SPLITS:
            seen = {Lg.sample_instruction(task, split, rng).text for _ in range(10_000)}
            assert seen == set(Lg.templates(task, split))


def test_template_counts_and_disjoint_splits():
    for task in ALL_TASKS:
        train, held = Lg.templates(task, Lg.TRAIN), Lg.templates(task, Lg.HELD_OUT)
        assert len(train) >= 4 and len(held) >= 2
        assert not set(train) & set(held)


def test_unknown_split_rejected():
    with pytest.raises(ValueError):
        Lg.templates(get_task("push-red-left"), "dev")


def test_embedding_is_deterministic_unit_norm():
    a, b = Lg.embed("push the red block left"), Lg.embed("push the red block left")
    assert np.array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1) < 1e-6
    assert a.shape == (Lg.EMBED_WIDTH,)


def test_color_changes_embedding():
    a, b = Lg.embed("push the red block left"), Lg.embed("push the blue block left")
    assert float(a @ b) < 1 - 1e-4


def test_embedding_ignores_case_and_punctuation():
    assert np.array_equal(Lg.embed("Push the red block, left!"), Lg.embed("push the red block left"))


def test_empty_text_rejected():
    with pytest.raises(ValueError):
        Lg.embed("   ...")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["push", "red", "block", "left", "the", "go", "corner"]), min_size=1, max_size=8))
def test_embedding_is_pure_function_of_text(words):
    text = " ".join(words)
    first = Lg.HashEmbedder()(text)
    assert np.array_equal(first, Lg.HashEmbedder()(text))
    assert abs(np.linalg.norm(first) - 1) < 1e-9


def test_external_table_single_entry(tmp_path):
    vec = np.linspace(-1, 1, 8)
    Lg.write_embedding_table(tmp_path / "t.txt", {"hello there": vec})
    table = Lg.load_external_embeddings(tmp_path / "t.txt")
    emb = Lg.HashEmbedder(8, table)
    assert np.array_equal(emb("hello there"), vec)


def test_fallback_contract(tmp_path):
    table = {"known": np.ones(8) / np.sqrt(8)}
    assert np.array_equal(Lg.HashEmbedder(8, table)("other text"), Lg.HashEmbedder(8).hashed("other text"))
    with pytest.raises(Lg.EmbeddingError):
        Lg.HashEmbedder(8, table, fallback=False)("other text")


def test_table_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    table = {f"text number {i}": rng.standard_normal(16) * 10.0 ** rng.integers(-8, 8) for i in range(100)}
    Lg.write_embedding_table(tmp_path / "t.txt", table)
    back = Lg.load_external_embeddings(tmp_path / "t.txt", width=16)
    assert list(back) == list(table)
    assert all(np.array_equal(back[k], table[k]) for k in table)


def test_table_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        Lg.load_external_embeddings(tmp_path / "missing.txt")
    Lg.write_embedding_table(tmp_path / "t.txt", {"a": np.zeros(4)})
    with pytest.raises(Lg.EmbeddingError):
        Lg.load_external_embeddings(tmp_path / "t.txt", width=8)
    with pytest.raises(Lg.EmbeddingError):
        Lg.HashEmbedder(8, {"a": np.zeros(4)})
    with pytest.raises(Lg.EmbeddingError):
        Lg.write_embedding_table(tmp_path / "u.txt", {"a": np.zeros(4), "b": np.zeros(5)})


def test_held_out_texts_cover_only_held_out_split():
    texts = Lg.held_out_texts(ALL_TASKS)
    assert all(t not in texts for task in ALL_TASKS for t in Lg.templates(task, Lg.TRAIN))
