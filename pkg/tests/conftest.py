import os
from pathlib import Path

import pytest

from kflora import gen_data

CACHE = Path(os.environ.get("KFLORA_TEST_CACHE",
                            Path.home() / ".cache" / "kflora-tests"))


def corpus(n_train, n_test, seed=0, strength=1.0):
    """Generate (or reuse) a digit corpus; cached across test sessions."""
    out = CACHE / f"digits-{n_train}-{n_test}-s{seed}-g{strength}-v1"
    names = ("train-images.idx3-ubyte", "train-labels.idx1-ubyte",
             "test-images.idx3-ubyte", "test-labels.idx1-ubyte")
    if not all((out / n).exists() for n in names):
        gen_data.generate(out, n_train=n_train, n_test=n_test,
                          seed=seed, strength=strength)
    return {"train_images": str(out / names[0]), "train_labels": str(out / names[1]),
            "test_images": str(out / names[2]), "test_labels": str(out / names[3]),
            "dir": str(out)}


@pytest.fixture(scope="session")
def corpus_small():
    return corpus(4000, 800)


@pytest.fixture(scope="session")
def corpus_full():
    return corpus(30000, 10000)
