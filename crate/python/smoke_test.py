"""Smoke test for the marginal_lmm extension module.

Build and install it first, for example with
`maturin develop --release -m crates/python/Cargo.toml`, then run
`python python/smoke_test.py`.
"""

import math
import random
import tempfile
from pathlib import Path

import marginal_lmm

ROOT = Path(__file__).resolve().parent.parent
CONFIG = ROOT / "configs" / "dutch.toml"


def main():
    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "dutch.csv"
        truth = marginal_lmm.synth(str(CONFIG), str(data), seed=3)
        assert "sigma" in truth and truth["sigma"] > 0

        model = marginal_lmm.Model.load(str(CONFIG), str(data))
        assert model.strategy == "config"
        joint = model.with_strategy("none")
        assert joint.dim > model.dim

        x = [0.1] * model.dim
        value, grad = model.grad_log_density(x)
        assert math.isclose(value, model.log_density(x), rel_tol=1e-12)
        h = 1e-6
        for j in range(model.dim):
            up, down = list(x), list(x)
            up[j] += h
            down[j] -= h
            fd = (model.log_density(up) - model.log_density(down)) / (2 * h)
            assert abs(fd - grad[j]) <= 1e-4 * max(1.0, abs(fd)), (j, fd, grad[j])
        assert len(model.constrain(x)) == len(model.names())

        fit = model.sample(chains=2, warmup=300, samples=300, seed=7)
        assert len(fit.draws) == 2 and len(fit.draws[0]) == 300
        assert len(fit.recovered_names) == 2 * 24
        rows = {row[0]: row for row in fit.summary()}
        print(f"alpha {rows['alpha'][1]:.3f} (truth {truth['alpha']:.3f}), divergences {fit.divergences}")

        try:
            model.with_strategy("marginalize:nobody")
        except ValueError as err:
            print(f"rejected: {err}")
        else:
            raise AssertionError("unknown class accepted")

    rng = random.Random(1)
    chains = [[rng.gauss(0.0, 1.0) for _ in range(4000)] for _ in range(4)]
    assert 0.8 <= marginal_lmm.ess(chains) / 16000 <= 1.2
    assert abs(marginal_lmm.r_hat(chains) - 1.0) < 0.01
    print("smoke test passed")


if __name__ == "__main__":
    main()
