import pytest

from mml.data import build_dataset
from mml.synthvid import DatasetConfig


def tiny_config(**kw):
    d = dict(num_clips_train=16, num_clips_val=8, t_total=8, height=16, width=16, n_cls=4, seed=11)
    d.update(kw)
    return DatasetConfig(**d)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    return build_dataset(tiny_config(), cache_dir=tmp_path_factory.mktemp("flow"))


@pytest.fixture(scope="session")
def tiny_multi(tmp_path_factory):
    return build_dataset(tiny_config(mode="multi", n_cls=6), cache_dir=tmp_path_factory.mktemp("flowm"))


# --------------------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


@pytest.fixture
def acceptance_note(request):
    """Attach a free-text line to the criterion of the running test."""
    marker = request.node.get_closest_marker("criterion")

    def note(text):
        if marker is not None:
            _CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "ok": True, "notes": []})
            _CRITERIA[marker.args[0]]["notes"].append(text)
    return note


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA.setdefault(m.args[0], {"title": m.args[1], "ok": True, "notes": []})
            item.user_properties.append(("criterion", m.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call":
        _CRITERIA[crit]["ran"] = True
    if report.failed or (report.when == "call" and report.skipped):
        _CRITERIA[crit]["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        c = _CRITERIA[n]
        status = "NOT RUN" if not c.get("ran") and c["ok"] else ("PASS" if c["ok"] else "FAIL")
        tr.write_line(f"{status}  criterion {n}: {c['title']}")
        for line in c["notes"]:
            tr.write_line(f"      {line}")
