import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from groupbnn import binary_ops

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BACKENDS = binary_ops.available_backends()


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return BACKENDS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def naive_conv2d(x, w, stride, padding, groups):
    """Nested-loop group convolution with zero padding, float64 accumulation."""
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    og = o // groups
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for i in range(kh):
                            for j in range(kw):
                                iy, ix = oy * sh - ph + i, ox * sw - pw + j
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += float(x[b, g * cg + ci, iy, ix]) * float(w[oc, ci, i, j])
                    out[b, oc, oy, ox] = acc
    return out


def planted_problem(seed: int):
    """13-slot space with 4-6 power-of-two choices per slot and a hidden optimum.

    Fitness is minus the Hamming distance to the hidden genome; FLOPs are the
    sum of 1/g, with a budget the hidden genome meets.
    """
    from groupbnn.evolution import SearchSpace

    r = np.random.default_rng(1000 + seed)
    choices = [[2**k for k in range(int(r.integers(4, 7)))] for _ in range(13)]
    hidden = tuple(int(c[r.integers(len(c))]) for c in choices)

    def cost(g):
        return sum(1.0 / x for x in g)

    space = SearchSpace(choices, cost, budget=cost(hidden) + 3)

    def fitness(g):
        return -float(sum(a != b for a, b in zip(g, hidden)))

    return space, fitness, hidden


def write_tiny_mnist(root, n_train=120, n_test=40, side=8, seed=0):
    """Synthetic IDX files in the MNIST layout: one bright cell per class plus noise."""
    from groupbnn.pipeline.data import write_idx

    r = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)

    def make(n):
        labels = r.integers(0, 10, n).astype(np.uint8)
        images = r.integers(0, 60, (n, side, side)).astype(np.uint8)
        for i, c in enumerate(labels):
            y, x = divmod(int(c), 4)
            images[i, 2 * y:2 * y + 2, 2 * x:2 * x + 2] = 255
        return images, labels

    for prefix, n in (("train", n_train), ("t10k", n_test)):
        images, labels = make(n)
        write_idx(root / f"{prefix}-images-idx3-ubyte.gz", images)
        write_idx(root / f"{prefix}-labels-idx1-ubyte.gz", labels)
    return root


TINY_TOML = """\
seed = {seed}
supernet_epochs = 2
retrain_epochs = 2
deterministic = true
out_dir = "out"

[data]
name = "mnist"
path = "data"
val_size = 24

[model]
module_kind = "M1"
width_multiplier = 0.125
stem_stride = 2

[train]
learning_rate = 0.005
batch_size = 16
eval_batch_size = 32

[search]
population_size = 10
top_k = 3
num_crossover = 5
num_mutation = 5
max_iterations = 2
fitness_samples = 24
calibration_size = 32
random_controls = 6
"""


@pytest.fixture
def tiny_run(tmp_path):
    """(config path, RunConfig, splits) for a tiny synthetic dataset."""
    from groupbnn.pipeline.config import load_run_config
    from groupbnn.pipeline.data import load_dataset

    write_tiny_mnist(tmp_path / "data")
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML.format(seed=7))
    run = load_run_config(path)
    run.out_dir = str(tmp_path / "out")
    return path, run, load_dataset("mnist", run.data.path, run.data.val_size)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """``report(number, ok, detail)`` records one line for the acceptance summary."""

    def report(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append((number, line))
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda item: item[0]):
            terminalreporter.write_line(line)
