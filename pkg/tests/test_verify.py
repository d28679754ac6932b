import pytest

from attnzoo import attention as A
from attnzoo import verify as V


def test_equivalence_suite_passes_two_seeds():
    for seed in (0, 11):
        results = V.equivalence_suite(seed, instances=30)
        assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_corrupted_kernel_is_caught():
    results = {r.name: r for r in V.equivalence_suite(0, corrupt=True, instances=30)}
    assert not results["equiv/la(m=N,I)==sa"].passed
    assert not results["equiv/window(w=sqrt N)==sa"].passed
    assert not results["transcription/sa"].passed


def test_transcription_catches_wrong_kernel():
    res = V.transcription_check("ea", instances=10, kernel=lambda q, k, v: A.sa(q, k, v))
    assert not res.passed


@pytest.mark.parametrize("kind", A.KINDS)
def test_kernel_gradchecks(kind):
    rep = V.kernel_gradcheck(kind)
    assert rep.probes >= 64 and rep.passed(V.GRAD_TOL)


def test_component_gradchecks():
    for rep in (V.block_gradcheck(lpi=True), V.block_gradcheck(kind="pa", lpi=False),
                V.merge_gradcheck(), V.lpi_gradcheck()):
        assert rep.passed(V.GRAD_TOL), rep
