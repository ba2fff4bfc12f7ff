"""Independent reference run for the training-sanity acceptance thresholds.

Uses PyTorch (autograd, torch.nn layers with their default initialisation,
torch.optim) and none of the optbench code.  The quadratic problem is rebuilt
from the same Philox streams so that both implementations see the same
Hessian and data; everything else is implemented from scratch here.

The protocol matches tests/test_acceptance.py:

* mnist_logreg / SGD: 36-point grid on [1e-5, 1e2], 3 screening epochs on
  seed 0, winner trained for 25 epochs on seeds 0..9.
* mnist_mlp / Adam: same grid, 1 screening epoch, winner trained for 25
  epochs on seed 0.
* quadratic_deep / SGD, Momentum (0.99), Adam: same grid, full 100-epoch
  screening, winner trained on seeds 0..9.

Writes tests/reference_values.json.  Usage:

    python scripts/reference_torch.py [--cache DIR] [--out FILE]
"""

from __future__ import annotations

import argparse
import json
import math
import os
import struct
import time
import zlib
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

torch.set_num_threads(1)

GRID = [10.0 ** (-5 + 7 * k / 35) for k in range(36)]
GRID[0], GRID[-1] = 1e-5, 1e2
BATCH = 128


# -- data --------------------------------------------------------------------------------

def read_idx(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    assert zero == 0 and dtype == 0x08, path
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    return np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def load_mnist(cache: Path):
    d = cache / "mnist"
    xtr = torch.tensor(read_idx(d / "train-images-idx3-ubyte").reshape(-1, 784), dtype=torch.float32) / 255
    ytr = torch.tensor(read_idx(d / "train-labels-idx1-ubyte"), dtype=torch.long)
    xte = torch.tensor(read_idx(d / "t10k-images-idx3-ubyte").reshape(-1, 784), dtype=torch.float32) / 255
    yte = torch.tensor(read_idx(d / "t10k-labels-idx1-ubyte"), dtype=torch.long)
    return xtr, ytr, xte, yte


def philox(seed: int, stream: str) -> np.random.Generator:
    sid = zlib.crc32(stream.encode()) & 0xFFFFFFFF
    return np.random.Generator(np.random.Philox(key=np.array([seed, sid << 32], dtype=np.uint64)))


def quadratic_problem():
    rng = philox(42, "quadratic/spectrum")
    eig = np.concatenate([rng.uniform(0, 1, 90), rng.uniform(30, 60, 10)])
    g = philox(42, "quadratic/rotation").standard_normal((100, 100))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    h = (q * eig) @ q.T
    h = 0.5 * (h + h.T)
    xtr = philox(1729, "quadratic/train").standard_normal((1000, 100)).astype(np.float32)
    xte = philox(1729, "quadratic/test").standard_normal((1000, 100)).astype(np.float32)
    return torch.tensor(h, dtype=torch.float32), torch.tensor(xtr), torch.tensor(xte)


# -- training ------------------------------------------------------------------------------

def make_optimizer(name, params, lr):
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    if name == "momentum":
        return torch.optim.SGD(params, lr=lr, momentum=0.99)
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def batches(n: int, seed: int, epoch: int):
    g = torch.Generator().manual_seed(seed * 100003 + epoch)
    perm = torch.randperm(n, generator=g)
    return [perm[i * BATCH:(i + 1) * BATCH] for i in range(n // BATCH)]


def train_classifier(model_fn, data, opt_name, lr, seed, epochs):
    """Final test accuracy, or NaN when the loss became non-finite."""
    xtr, ytr, xte, yte = data
    torch.manual_seed(seed)
    model = model_fn()
    opt = make_optimizer(opt_name, model.parameters(), lr)
    for epoch in range(1, epochs + 1):
        for idx in batches(len(xtr), seed, epoch):
            loss = F.cross_entropy(model(xtr[idx]), ytr[idx])
            if not torch.isfinite(loss):
                return math.nan
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        logits = model(xte)
        if not torch.isfinite(logits).all():
            return math.nan
        return float((logits.argmax(1) == yte).double().mean())


def train_quadratic(problem, opt_name, lr, seed, epochs):
    """(initial test loss, final test loss); final is NaN on divergence."""
    h, xtr, xte = problem
    theta = torch.full((100,), 10.0, requires_grad=True)

    def loss_on(x):
        d = theta - x
        return 0.5 * ((d @ h) * d).sum(1).mean()

    with torch.no_grad():
        initial = float(loss_on(xte))
    opt = make_optimizer(opt_name, [theta], lr)
    for epoch in range(1, epochs + 1):
        for idx in batches(len(xtr), seed, epoch):
            loss = loss_on(xtr[idx])
            if not torch.isfinite(loss):
                return initial, math.nan
            opt.zero_grad()
            loss.backward()
            opt.step()
    with torch.no_grad():
        final = float(loss_on(xte))
    return initial, final if math.isfinite(final) else math.nan


def pick(finals, maximize):
    best = None
    for i, v in enumerate(finals):
        if not math.isfinite(v):
            continue
        if best is None or (v > finals[best] if maximize else v < finals[best]):
            best = i
    return best


def logreg():
    return torch.nn.Linear(784, 10)


def mlp():
    return torch.nn.Sequential(torch.nn.Linear(784, 1000), torch.nn.ReLU(), torch.nn.Linear(1000, 500),
                               torch.nn.ReLU(), torch.nn.Linear(500, 100), torch.nn.ReLU(),
                               torch.nn.Linear(100, 10))


def classifier_protocol(name, model_fn, data, opt, screen_epochs, final_epochs, seeds):
    t0 = time.time()
    finals = [train_classifier(model_fn, data, opt, lr, 0, screen_epochs) for lr in GRID]
    w = pick(finals, maximize=True)
    accs = [train_classifier(model_fn, data, opt, GRID[w], s, final_epochs) for s in seeds]
    out = {"optimizer": opt, "screening_epochs": screen_epochs, "epochs": final_epochs, "seeds": list(seeds),
           "learning_rate": GRID[w], "screening": finals, "final_test_accuracies": accs,
           "final_test_accuracy_mean": float(np.mean(accs)), "seconds": round(time.time() - t0, 1)}
    print(name, json.dumps({k: out[k] for k in ("learning_rate", "final_test_accuracy_mean", "seconds")}))
    return out


def quadratic_protocol(problem, opt, epochs=100, seeds=range(10)):
    t0 = time.time()
    finals = [train_quadratic(problem, opt, lr, 0, epochs)[1] for lr in GRID]
    w = pick(finals, maximize=False)
    runs = [train_quadratic(problem, opt, GRID[w], s, epochs) for s in seeds]
    out = {"optimizer": opt, "epochs": epochs, "seeds": list(seeds), "learning_rate": GRID[w],
           "initial_test_loss": runs[0][0], "final_test_losses": [f for _, f in runs],
           "final_test_loss_mean": float(np.mean([f for _, f in runs])), "seconds": round(time.time() - t0, 1)}
    print("quadratic_deep", opt, json.dumps({k: out[k] for k in ("learning_rate", "initial_test_loss",
                                                                  "final_test_loss_mean", "seconds")}))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", default=os.environ.get("OPTBENCH_CACHE", Path.home() / ".cache" / "optbench"))
    ap.add_argument("--out", default=Path(__file__).resolve().parent.parent / "tests" / "reference_values.json")
    args = ap.parse_args()
    data = load_mnist(Path(args.cache))
    problem = quadratic_problem()
    values = {
        "generator": "scripts/reference_torch.py",
        "torch_version": torch.__version__,
        "grid": GRID,
        "mnist_logreg_sgd": classifier_protocol("mnist_logreg", logreg, data, "sgd", 3, 25, range(10)),
        "mnist_mlp_adam": classifier_protocol("mnist_mlp", mlp, data, "adam", 1, 25, range(1)),
        "quadratic_deep": {o: quadratic_protocol(problem, o) for o in ("sgd", "momentum", "adam")},
    }
    Path(args.out).write_text(json.dumps(values, indent=1) + "\n")
    print("wrote", args.out)


if __name__ == "__main__":
    main()
