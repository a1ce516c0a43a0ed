from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from diffmix.label_space import ClassVocabulary, SemanticLabelMap

REPO = Path(__file__).resolve().parents[1]

VOCAB3 = ClassVocabulary(("background", "lymphocyte", "epithelial", "miscellaneous"))
CONSEP = ClassVocabulary(("background", "epithelial", "inflammatory", "miscellaneous", "spindle"))
GLYSAC = ClassVocabulary(("background", "lymphocyte", "epithelial", "miscellaneous"))


def random_rect_map(rng: np.random.Generator, shape=(32, 32), n=8, n_classes=4, max_side=8,
                    vocab: ClassVocabulary | None = None) -> SemanticLabelMap:
    """Non-overlapping random rectangles with random IDs and classes."""
    h, w = shape
    inst = np.zeros(shape, dtype=np.int64)
    cls = np.zeros(shape, dtype=np.int64)
    ids = rng.permutation(np.arange(1, 4 * n + 1))[:n]
    placed = 0
    for _ in range(n * 50):
        if placed == n:
            break
        rh, rw = rng.integers(1, max_side + 1, 2)
        r, c = rng.integers(0, h - rh + 1), rng.integers(0, w - rw + 1)
        if inst[r:r + rh, c:c + rw].any():
            continue
        inst[r:r + rh, c:c + rw] = ids[placed]
        cls[r:r + rh, c:c + rw] = rng.integers(1, n_classes)
        placed += 1
    if vocab is None:
        vocab = ClassVocabulary(("background",) + tuple(f"c{i}" for i in range(1, n_classes)))
    return SemanticLabelMap(inst, cls, vocab)


def counts_fixture(vocab: ClassVocabulary, counts: dict[str, int]) -> list[SemanticLabelMap]:
    """Maps with the given number of single-pixel nuclei per class."""
    classes = [vocab.index(name) for name, k in counts.items() for _ in range(k)]
    n = len(classes)
    side = int(np.ceil(np.sqrt(n))) * 2
    inst = np.zeros((side, side), dtype=np.int64)
    cls = np.zeros((side, side), dtype=np.int64)
    for i, c in enumerate(classes):
        r, col = divmod(i, side // 2)
        inst[2 * r, 2 * col] = i + 1
        cls[2 * r, 2 * col] = c
    return [SemanticLabelMap(inst, cls, vocab)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_run():
    """Trained toy model and experiment result, cached under .cache/."""
    from diffmix.toy_experiment import cached_toy_experiment

    return cached_toy_experiment(REPO / ".cache", log=print)


def grid_nuclei_tile(rng: np.random.Generator, vocab: ClassVocabulary, class_probs, size=64, cell=16,
                     fill=0.8, radius=(2.5, 5.0)) -> SemanticLabelMap:
    """One disk per occupied grid cell; cells keep nuclei well apart."""
    inst = np.zeros((size, size), dtype=np.int64)
    cls = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[:size, :size]
    probs = np.asarray(class_probs, float) / np.sum(class_probs)
    nid = 1
    for r0 in range(0, size, cell):
        for c0 in range(0, size, cell):
            if rng.random() > fill:
                continue
            rad = rng.uniform(*radius)
            cy, cx = r0 + cell / 2 + rng.uniform(-1, 1), c0 + cell / 2 + rng.uniform(-1, 1)
            disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
            inst[disk] = nid
            cls[disk] = rng.choice(len(probs), p=probs) + 1
            nid += 1
    return SemanticLabelMap(inst, cls, vocab)


CONSEP_COUNTS = (3941, 5537, 371, 5700)


def consep_like(seed=0, n_tiles=80) -> dict[str, SemanticLabelMap]:
    """Grid tiles whose class mix matches the CoNSeP training composition
    (miscellaneous 2.4%) up to rounding."""
    rng = np.random.default_rng(seed)
    maps = [grid_nuclei_tile(rng, CONSEP, (1,)) for _ in range(n_tiles)]
    sizes = [int(m.instance_ids.max()) for m in maps]
    total = sum(sizes)
    quota = np.floor(np.asarray(CONSEP_COUNTS) / sum(CONSEP_COUNTS) * total).astype(int)
    quota[np.argmax(quota)] += total - quota.sum()
    classes = rng.permutation(np.repeat(np.arange(1, len(quota) + 1), quota))
    out, k = {}, 0
    for i, (m, n) in enumerate(zip(maps, sizes)):
        lut = np.r_[0, classes[k:k + n]]
        out[f"c{i:03d}"] = SemanticLabelMap(m.instance_ids, lut[m.instance_ids], CONSEP)
        k += n
    return out


def tiny_config_text(dataset, output, seed=0) -> str:
    """A config small enough for an end-to-end run in seconds."""
    return f"""
[data]
dataset = {dataset}
output = {output}
patch_size = 16
stride = 16

[denoiser]
base_width = 8
depth = 2
timestep_embedding_dim = 16
channel_mult = 1,2
spade_hidden = 8

[train]
lr = 0.001
batch_size = 4
steps = 10

[maps]
max_shift = 4

[sampler]
ddim_steps = 10
t_noise = 5
batch_size = 8

[experiment]
seed = {seed}
downstream_steps = 100
"""


@pytest.fixture
def toy_dataset(tmp_path):
    from diffmix.tiles import write_dataset
    from diffmix.toy import TOY_VOCAB, ToySpec, make_toy_dataset

    root = tmp_path / "toy"
    write_dataset(root, make_toy_dataset(ToySpec(n_tiles=6, size=32, nuclei_per_tile=(3, 6))), TOY_VOCAB)
    return root


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert."""
    def record(number: int, title: str, failures: list[str], seconds: float, detail: str = ""):
        status = "PASS" if not failures else "FAIL"
        line = f"{status} criterion {number} ({title}) in {seconds:.1f}s"
        if detail:
            line += f": {detail}"
        if failures:
            line += " | " + "; ".join(failures)
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert not failures, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
