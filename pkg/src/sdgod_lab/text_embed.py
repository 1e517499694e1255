"""Frozen text-embedding provider standing in for a CLIP text encoder.

Pseudo mode builds each prompt's vector from two hash-seeded Gaussian
directions, one for the category token and one for the condition token, so
the same category under both conditions stays correlated while distinct
categories are near orthogonal.  File mode serves precomputed embeddings from
a JSON map ``prompt -> [floats]``.
"""
from __future__ import annotations

import hashlib
import json
import re
import threading
from pathlib import Path

import numpy as np

from .data import PromptTemplates


class MissingPromptError(KeyError):
    def __str__(self):
        return f"no embedding for prompt {self.args[0]!r}"


def _unit(v):
    return v / np.linalg.norm(v)


def hashed_direction(seed: int, kind: str, token: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}|{kind}|{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return _unit(rng.normal(size=dim))


class EmbeddingProvider:
    def __init__(self, mode="pseudo", dim=64, seed=0, path=None, offset_scale=0.3, templates=None):
        if mode not in ("pseudo", "file"):
            raise ValueError(f"mode must be 'pseudo' or 'file', got {mode!r}")
        self.mode = mode
        self.seed = seed
        self.offset_scale = offset_scale
        self.templates = templates or PromptTemplates()
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self._table = None
        if mode == "file":
            if path is None:
                raise ValueError("file mode needs a path")
            self._table, dim = _load_table(path)
        self.dim = int(dim)
        self._patterns = {
            cond: re.compile("^" + re.escape(self.templates.get(cond)).replace(r"\{\}", "(.+)") + "$")
            for cond in ("original", "augmented")
        }

    @classmethod
    def from_file(cls, path, **kw):
        return cls(mode="file", path=path, **kw)

    def parse(self, prompt):
        """(category, condition) for a templated prompt; unknown prompts map to (prompt, None)."""
        for cond, pat in self._patterns.items():
            m = pat.match(prompt)
            if m:
                return m.group(1), cond
        return prompt, None

    def _compute(self, prompt):
        if self.mode == "file":
            if prompt not in self._table:
                raise MissingPromptError(prompt)
            return self._table[prompt]
        category, condition = self.parse(prompt)
        v = hashed_direction(self.seed, "category", category, self.dim)
        if condition is not None:
            v = v + self.offset_scale * hashed_direction(self.seed, "condition", condition, self.dim)
        return _unit(v)

    def vector(self, prompt):
        v = self._cache.get(prompt)
        if v is None:
            with self._lock:
                v = self._cache.get(prompt)
                if v is None:
                    v = self._compute(prompt)
                    v.setflags(write=False)
                    self._cache[prompt] = v
        return v

    def embed(self, prompts) -> np.ndarray:
        if len(prompts) == 0:
            raise ValueError("no prompts to embed")
        return np.stack([self.vector(p) for p in prompts])


def embed(provider: EmbeddingProvider, prompts) -> np.ndarray:
    return provider.embed(prompts)


def _load_table(path):
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict) or not raw:
        raise ValueError(f"{path}: expected a non-empty JSON object prompt -> vector")
    dims = {len(v) for v in raw.values()}
    if len(dims) != 1:
        raise ValueError(f"{path}: inconsistent embedding dimensions {sorted(dims)}")
    table = {}
    for prompt, vec in raw.items():
        v = np.asarray(vec, dtype=np.float64)
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise ValueError(f"{path}: embedding for {prompt!r} is zero or non-finite")
        v = v / n
        v.setflags(write=False)
        table[prompt] = v
    return table, dims.pop()


def save_table(path, prompts, vectors):
    Path(path).write_text(json.dumps({p: [float(x) for x in v] for p, v in zip(prompts, vectors)}))
