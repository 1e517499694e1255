import json
import threading

import numpy as np
import pytest

from sdgod_lab.data import CATEGORY_NAMES, render_prompts
from sdgod_lab.text_embed import EmbeddingProvider, MissingPromptError, embed, hashed_direction, save_table


def test_rows_are_unit_and_repeatable():
    p = EmbeddingProvider(seed=3)
    prompts = render_prompts(["car", "person", "background"], "original")
    a = embed(p, prompts)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(a, EmbeddingProvider(seed=3).embed(prompts))


def test_cached_vectors_are_read_only():
    p = EmbeddingProvider()
    v = p.vector("a photo of a car in clear conditions")
    with pytest.raises(ValueError):
        v[0] = 1.0


def test_different_categories_are_near_orthogonal():
    cos = np.array([hashed_direction(s, "category", "a", 64) @ hashed_direction(s, "category", "b", 64)
                    for s in range(1000)])
    assert np.mean(np.abs(cos) < 0.5) >= 0.99
    assert abs(cos.mean()) < 0.02


def test_same_category_stays_closer_across_conditions():
    wins, total = 0, 0
    for seed in range(20):
        p = EmbeddingProvider(seed=seed)
        for c in CATEGORY_NAMES:
            for d in CATEGORY_NAMES:
                if c == d:
                    continue
                ori = p.embed(render_prompts([c], "original"))[0]
                same = p.embed(render_prompts([c], "augmented"))[0]
                other = p.embed(render_prompts([d], "augmented"))[0]
                wins += ori @ same > ori @ other
                total += 1
    assert wins / total >= 0.95


def test_parse_recognises_templates():
    p = EmbeddingProvider()
    assert p.parse("a photo of a bus in adverse conditions") == ("bus", "augmented")
    assert p.parse("free text") == ("free text", None)


def test_file_mode(tmp_path):
    path = tmp_path / "emb.json"
    save_table(path, ["x", "y"], [[3.0, 4.0], [0.0, 2.0]])
    p = EmbeddingProvider.from_file(path)
    assert p.dim == 2
    np.testing.assert_allclose(p.embed(["x", "y"]), [[0.6, 0.8], [0.0, 1.0]])
    with pytest.raises(MissingPromptError, match="'z'"):
        p.embed(["z"])


def test_file_mode_rejects_ragged(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"a": [1.0, 0.0], "b": [1.0]}))
    with pytest.raises(ValueError, match="inconsistent"):
        EmbeddingProvider.from_file(path)


def test_empty_prompt_list_raises():
    with pytest.raises(ValueError):
        EmbeddingProvider().embed([])


def test_concurrent_embedding_is_consistent():
    p = EmbeddingProvider(seed=1)
    prompts = render_prompts(list(CATEGORY_NAMES), "augmented")
    results = [None] * 8

    def work(i):
        results[i] = p.embed(prompts)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for r in results[1:]:
        np.testing.assert_array_equal(r, results[0])
