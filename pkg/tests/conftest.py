import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vlpretrain.synthgen import GeneratorConfig, generate_corpus

TINY = GeneratorConfig(image_size=24, n_mimic=160, n_chexpert=160, n_padchest=120,
                       train_per_class=16, test_per_class=12)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    return generate_corpus(TINY, tmp_path_factory.mktemp("tiny_corpus"))


@pytest.fixture(scope="session")
def tiny_runs(tiny_corpus, tmp_path_factory):
    """One short training run per objective on the tiny corpus."""
    from vlpretrain.harness.config import make_config
    from vlpretrain.harness.train import pretrain, prepare_data

    root = tmp_path_factory.mktemp("tiny_runs")
    manifests = [tiny_corpus.pretrain["mimic"], tiny_corpus.pretrain["chexpert"]]
    runs = {}
    cache = {}
    for kind in ("clip", "unicl", "unimodal", "dlilp"):
        cfg = make_config("desk", objective=kind, image_size=24, max_epochs=2, batch_size=32)
        data = prepare_data(manifests, cfg, cache)
        runs[kind] = pretrain(cfg, manifests, root / kind, data=data)
    return runs


# ------------------------------------------------------------ acceptance lines

_CRITERIA: dict = {}


@pytest.fixture
def report(request):
    """Record the one-line verdict for the criterion this test is marked with."""
    n = request.node.get_closest_marker("criterion").args[0]

    def record(passed: bool, detail: str) -> bool:
        _CRITERIA[n] = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[n])
        return passed

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark and rep.when == "call" and rep.failed and mark.args[0] not in _CRITERIA:
        exc = call.excinfo.typename if call.excinfo else "error"
        _CRITERIA[mark.args[0]] = f"criterion {mark.args[0]}: FAIL  ({exc} before a verdict)"


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
