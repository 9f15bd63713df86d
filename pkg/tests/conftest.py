import pytest


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line to the terminal, then assert."""

    def emit(label: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {label}: {detail}")
        assert ok, f"{label}: {detail}"

    return emit
