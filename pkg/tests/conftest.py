import pytest

# Filled by the acceptance tests; one (criterion, passed, detail) per check.
ACCEPTANCE = []


@pytest.fixture
def verdict():
  """Records a criterion outcome, prints it, and fails the test on FAIL."""

  def record(number: int, passed: bool, detail: str):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert passed, line

  return record


def pytest_terminal_summary(terminalreporter):
  if ACCEPTANCE:
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE):
      terminalreporter.write_line(line)
