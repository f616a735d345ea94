import json
from pathlib import Path

import numpy as np
import pytest

from eosprobe.data import LabeledDataset, synth_dataset
from eosprobe.models import ModelLoss, ModelSpec, init_kaiming, tiny_mlp

REFERENCE = Path(__file__).parent / "oracles" / "reference.json"


def load_reference():
    fixtures = json.loads(REFERENCE.read_text())["fixtures"]
    out = []
    for fx in fixtures:
        spec = ModelSpec.from_dict({"activation": fx["activation"], "input_shape": fx["input_shape"],
                                    "layers": fx["layers"], "n_c": fx["n_c"], "seed": 0})
        data = LabeledDataset(np.array(fx["inputs"]), np.array(fx["labels"]), fx["n_c"])
        out.append((fx, spec, np.array(fx["theta"]), data))
    return out


@pytest.fixture(scope="session")
def reference():
    return load_reference()


def small_problem(seed=0, hidden=(8, 8), dim=4, n_c=3, n_D=12, activation="tanh"):
    spec = tiny_mlp(dim, n_c, hidden, activation, seed=seed)
    data = synth_dataset(n_D, n_c, dim, 2.0, seed=100 + seed)
    return ModelLoss(spec), init_kaiming(spec), data


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def mlp_preactivations(spec, theta, x):
    """Hidden-layer preactivations of a dense-only spec, by plain numpy."""
    h, pos, out = np.asarray(x, dtype=np.float64), 0, []
    for i, layer in enumerate(spec.layers):
        W = theta[pos:pos + layer.n_in * layer.n_out].reshape(layer.n_in, layer.n_out)
        pos += W.size
        b = theta[pos:pos + layer.n_out]
        pos += b.size
        z = h @ W + b
        if i < len(spec.layers) - 1:
            out.append(z)
            h = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
    return out


def fold_margin(spec, theta, x):
    pre = mlp_preactivations(spec, theta, x)
    return min(float(np.min(np.abs(z))) for z in pre) if pre else np.inf


def _odd_float(rng):
    kind = rng.integers(6)
    if kind == 0:
        return float(rng.choice([0.0, -0.0, 5e-324, 1.7976931348623157e308, -2.2250738585072014e-308]))
    if kind == 1:
        return float(np.frombuffer(rng.bytes(8), dtype="<f8")[0])
    return float(rng.standard_normal() * 10.0 ** rng.integers(-300, 300))


def random_record(rng):
    """A telemetry record with awkward but finite floats, Nones and varied lengths."""
    from eosprobe.storage import TelemetryRecord

    def num(allow_none=True):
        if allow_none and rng.random() < 0.15:
            return None
        x = _odd_float(rng)
        while not np.isfinite(x):
            x = _odd_float(rng)
        return x

    k = int(rng.integers(0, 6))
    return TelemetryRecord(
        iteration=int(rng.integers(0, 2 ** 53)), t=num(False), eta=num(False), loss=num(False),
        eigenvalues=[num(False) for _ in range(k)], eta_star=[num() for _ in range(k)],
        rho=[num() for _ in range(k)], coords=[num(False) for _ in range(k)],
        grad_norm=num(), top_norm=num(), bulk_norm=num(), delta_top=num(), delta_bulk=num(),
        k_top=int(rng.integers(0, 6)), cadence=int(rng.integers(1, 500)),
        converged=bool(rng.integers(2)), stale=bool(rng.integers(2)))


def random_vector(rng):
    n = int(rng.integers(0, 64))
    v = np.frombuffer(rng.bytes(8 * n), dtype="<f8").copy()
    if rng.random() < 0.5:
        v = rng.standard_normal(n)
    return v


# -- acceptance reporting -----------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}
_ACCEPTANCE_NAMES: dict[int, str] = {}


@pytest.fixture(scope="session")
def report():
    """``report(n, name, passed, detail)`` records one acceptance line and returns ``passed``."""
    def _report(n, name, passed, detail):
        passed = bool(passed)
        _ACCEPTANCE[n] = (name, passed, detail)
        print(f"{'PASS' if passed else 'FAIL'} [{n:2d}] {name}: {detail}")
        return passed
    return _report


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark:
            _ACCEPTANCE_NAMES[mark.args[0]] = mark.args[1]


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_NAMES:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE_NAMES):
        if n in _ACCEPTANCE:
            name, passed, detail = _ACCEPTANCE[n]
            tr.write_line(f"{'PASS' if passed else 'FAIL'} [{n:2d}] {name}: {detail}")
        else:
            tr.write_line(f"FAIL [{n:2d}] {_ACCEPTANCE_NAMES[n]}: did not report (errored or skipped)")
