import pytest
from hypothesis import settings

from casmkit import symexec
from casmkit.parser import parse_or_raise
from casmkit.programs import traffic_light_source

settings.register_profile("suite", derandomize=True, max_examples=60,
                          deadline=None)
settings.load_profile("suite")


@pytest.fixture(autouse=True)
def oracle_checked_simplification():
    """Every simplification in a test build is re-verified against the
    enumeration oracle."""
    previous = symexec.ORACLE_CHECK
    symexec.ORACLE_CHECK = True
    yield
    symexec.ORACLE_CHECK = previous


@pytest.fixture(scope="session")
def traffic():
    return parse_or_raise(traffic_light_source())


FAULTY_TRAFFIC = traffic_light_source().replace(
    """  if phase in { Stop1Stop2, Go1Stop2 } and Passed(phase) then
    StopLight(1) := not StopLight(1)
    GoLight(1) := not GoLight(1)
    if phase = Stop1Stop2 then
      phase := Go1Stop2
    else
      phase := Stop2Stop1
    endif
  endif""",
    """  if phase in { Stop1Stop2, Go1Stop2 } and Passed(phase) then
    if phase = Stop1Stop2 then
      StopLight(1) := not StopLight(1)
      GoLight(1) := not GoLight(1)
      phase := Go1Stop2
    else
      phase := Go2Stop1
    endif
  endif""")


@pytest.fixture(scope="session")
def faulty_traffic():
    """Variant that jumps Go1Stop2 -> Go2Stop1 without toggling the
    lane-1 lights, so both go-lights can end up on."""
    return parse_or_raise(FAULTY_TRAFFIC)
