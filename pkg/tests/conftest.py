import numpy as np
import pytest

from nucleistyle.data import SynthCorpusConfig, generate_synth_corpus
from nucleistyle.gan import StyleTransferGAN


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synth_corpus(SynthCorpusConfig(num_domains=3, images_per_domain=4, seed=11))


@pytest.fixture(scope="session")
def tiny_gan():
    """An untrained but fitted miniature model: 16x16 images, 3 domains."""
    rng = np.random.default_rng(0)
    X = rng.random((6, 16, 16, 3))
    y = np.array([0, 0, 1, 1, 2, 2])
    return StyleTransferGAN(image_size=16, content_channels=4, attr_dim=3, width=4, dis_width=4,
                            n_res=1, batch_size=2, n_iter=1, seed=0).fit(X, y)


def disc(shape, cy, cx, r):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= not report.failed
    details = [v for k, v in item.user_properties if k == "detail"]
    if report.failed:
        details.append(f"{item.name} failed")
    elif report.skipped:
        details.append(f"{item.name} skipped ({report.longrepr[2] if isinstance(report.longrepr, tuple) else 'n/a'})")
    entry["details"].extend(details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"[{status}] {number}. {e['title']}" + (f": {detail}" if detail else ""))
