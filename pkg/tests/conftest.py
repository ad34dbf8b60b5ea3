import pytest

from smetod.corpus import CorpusSpec, generate_corpus


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(CorpusSpec(num_dialogues=400, seed=11))


@pytest.fixture(scope="session")
def full_corpus():
    return generate_corpus(CorpusSpec())


# --- acceptance reporting ------------------------------------------------------

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "details": []})
    entry["ok"] &= rep.passed
    if rep.when == "call":
        entry["seconds"] += rep.duration
        entry["details"] += [str(v) for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["details"])
        line = f"[{status}] criterion {number}: {e['title']} ({e['seconds']:.1f} s)"
        terminalreporter.write_line(line + (f" -- {detail}" if detail else ""))
