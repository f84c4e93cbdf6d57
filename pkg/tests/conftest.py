"""Shared corpus builders and CLI helpers for the test suite."""

import os
import subprocess

import numpy as np
import pytest

from kalign import store
from kalign.verify import make_rank_collapsed_corpus  # noqa: F401  re-export


def paired_from_arrays(S, G):
    return store.PairedEmbeddings(store.EmbeddingSet(data=S),
                                  store.EmbeddingSet(data=G))


@pytest.fixture(scope="session")
def synthetic_paired():
    S, T = make_rank_collapsed_corpus()
    return paired_from_arrays(S, T)


def run_cli(args, cwd=None, env_extra=None, timeout=300):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(["kalign", *args], cwd=cwd, env=env,
                          capture_output=True, text=True, timeout=timeout)


def write_kemb(tmp_path, name, data, labels=None, ids=None, meta=None):
    path = tmp_path / name
    eset = store.EmbeddingSet(data=data, labels=labels, ids=ids,
                              meta=meta or {})
    store.save(eset, path)
    return path
