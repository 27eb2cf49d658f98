"""The engine package supplies the cross-component oracle in these tests.
It is consumed only through its public embedding-file interface; when it is
not installed, fall back to the sibling checkout in this repository.
"""

import sys
from pathlib import Path

try:
    import adapterfuse  # noqa: F401
except ImportError:
    sys.path.insert(0, str(Path(__file__).resolve().parents[2] / "src"))
