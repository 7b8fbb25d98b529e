from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from alignpref.corpus import LangDirection


@pytest.fixture
def de_en() -> LangDirection:
    return LangDirection("de", "en")


@pytest.fixture
def zh_en() -> LangDirection:
    return LangDirection("zh", "en")
