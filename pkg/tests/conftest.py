import pytest

from capita import datagen, env


@pytest.fixture(scope="session")
def tasks():
    return datagen.generate_tasks(28, seed=3)


@pytest.fixture(scope="session")
def scene():
    return env.build_scene(0)


def first_of(scene, cls):
    return scene.instances(cls)[0].id


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
