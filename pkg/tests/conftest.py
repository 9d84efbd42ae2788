import sys
from pathlib import Path

import pytest

REPO_ROOT = Path(__file__).resolve().parents[1]
FIXTURES = REPO_ROOT / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


def load_hex_fixture(name: str) -> bytes:
    """Read a whitespace/comment-tolerant hex dump fixture."""
    tokens = []
    for line in (FIXTURES / name).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    return bytes(int(t, 16) for t in tokens)
