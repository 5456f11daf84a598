import json

import numpy as np
import pytest

from m2m.datamodel import ModalitySchema, MultimodalDataset


def make_dataset(values, modalities=None, row_ids=None):
    """Dataset from an array with NaN for missing cells.

    ``modalities`` is a list of ``(name, kind, n_features)``; by default a
    single continuous modality spans every column.
    """
    values = np.asarray(values, dtype=float)
    n, p = values.shape
    modalities = modalities or [("mod1", "continuous", p)]
    schema, start = [], 0
    for k, (name, kind, width) in enumerate(modalities, start=1):
        schema.append(
            ModalitySchema(k, name, kind, tuple(f"{name}_c{j}" for j in range(width)))
        )
        start += width
    assert start == p
    ids = row_ids or [f"r{i}" for i in range(n)]
    return MultimodalDataset(tuple(schema), values, np.isfinite(values), tuple(ids))


@pytest.fixture
def write_schema(tmp_path):
    def write(modalities, targets=("y0",), confounders=("age",)):
        doc = {
            "modalities": [
                {"name": n, "kind": k, "features": list(f)} for n, k, f in modalities
            ],
            "targets": list(targets),
            "confounders": list(confounders),
        }
        path = tmp_path / "schema.json"
        path.write_text(json.dumps(doc))
        return path

    return write


# ---------------------------------------------------------------------------
# residual orthogonality watch: every OLS fit made by any test is checked

ORTHOGONALITY_LOG = []


@pytest.fixture(autouse=True, scope="session")
def _watch_ols_fits():
    import m2m.residual as residual

    original = residual.fit_ols

    def checked(Z, T):
        coef = original(Z, T)
        T2 = np.asarray(T, dtype=float)
        T2 = T2[:, None] if T2.ndim == 1 else T2
        D = residual.design(Z)
        eps = T2 - D @ coef
        ORTHOGONALITY_LOG.append(float(np.max(np.abs(D.T @ eps))) if eps.size else 0.0)
        return coef

    residual.fit_ols = checked
    yield
    residual.fit_ols = original


# ---------------------------------------------------------------------------
# one pass/fail line per acceptance criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    crit = dict(report.user_properties).get("criterion")
    if crit is not None:
        _CRITERIA[crit] = (report.passed, report.duration)


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", (mark.args[0], mark.args[1])))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (ok, secs) in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {number:2d}. {title} ({secs:.1f}s)")
