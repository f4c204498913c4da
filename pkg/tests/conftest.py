import numpy as np
import pytest

from surrogate_sdr.manifold import GrassmannPoint


def random_spd(rng, p, cond=10.0):
    Q = np.linalg.qr(rng.standard_normal((p, p)))[0]
    lam = np.geomspace(1.0, cond, p)
    return (Q * lam) @ Q.T


def random_point(rng, p, d):
    return GrassmannPoint.from_matrix(rng.standard_normal((p, d)))


def random_orthogonal(rng, d):
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def proj_dist(A, B):
    A = A.basis if isinstance(A, GrassmannPoint) else A
    B = B.basis if isinstance(B, GrassmannPoint) else B
    return float(np.linalg.norm(A @ A.T - B @ B.T))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record and print one pass/fail line per acceptance criterion."""

    def report(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
