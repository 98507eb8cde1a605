"""Shared fixtures: one smoke corpus plus lazily trained per-kind checkpoints.

Training 2000 steps is the expensive part of the end-to-end tests, so each
kind is trained at most once per session, through the real CLI, and every
test that needs that checkpoint shares it.
"""

import configparser
import time

import pytest

from grammar import gen_corpus

SMOKE_STEPS = 2000
SMOKE_SEED = 0

# options beyond the shared template, per forward-process kind
KIND_MODEL_OPTIONS = {
    "static": {},
    "mulan": {"fixed_average": "true", "use_context": "true"},
    "nfdm": {},
}


def write_smoke_ini(path, kind, corpus, steps=SMOKE_STEPS, seed=SMOKE_SEED):
    ini = configparser.ConfigParser()
    ini["model"] = {
        "kind": kind,
        "dim": "64",
        "seq_len": "32",
        "predictor_layers": "2",
        "forward_layers": "2",
        "heads": "4",
        **KIND_MODEL_OPTIONS[kind],
    }
    ini["train"] = {
        "corpus": str(corpus),
        "tokenizer": "char",
        "vocab_cap": "24",
        "steps": str(steps),
        "batch_size": "32",
        "lr": "2e-3",
        "seed": str(seed),
    }
    with open(path, "w", encoding="utf-8") as fh:
        ini.write(fh)


@pytest.fixture(scope="session")
def smoke_corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("corpus") / "smoke.txt"
    path.write_text("\n".join(gen_corpus(512, seed=11)) + "\n", encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory, smoke_corpus):
    """Callable kind -> {ckpt, log, ini, wall}; trains through the CLI once."""
    from latdiff.cli import main

    cache = {}

    def train(kind):
        if kind not in cache:
            work = tmp_path_factory.mktemp(f"smoke_{kind}")
            ini = work / "run.ini"
            write_smoke_ini(ini, kind, smoke_corpus)
            ckpt, log = work / "model.ckpt", work / "train.csv"
            t0 = time.monotonic()
            rc = main(["train", "--config", str(ini), "--out", str(ckpt),
                       "--log", str(log)])
            wall = time.monotonic() - t0
            assert rc == 0
            cache[kind] = {"ckpt": ckpt, "log": log, "ini": ini, "wall": wall,
                           "work": work}
        return cache[kind]

    return train
