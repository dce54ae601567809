from __future__ import annotations

import stat
import sys
from pathlib import Path

import pytest

FAKE_TSHARK = r'''#!{python}
"""Minimal stand-in for tshark: -r FILE with -T fields (-e NAME ...) or -T json."""
import json
import sys

from shortcut_audit.ingest import dissect_capture

args = sys.argv[1:]
path = args[args.index("-r") + 1]
mode = args[args.index("-T") + 1]
names = [args[i + 1] for i, a in enumerate(args) if a == "-e"]
try:
    batch = dissect_capture(path)
except Exception as exc:
    sys.stderr.write(f"tshark: {{exc}}\n")
    sys.exit(2)
if mode == "fields":
    print("\t".join(names))
    for rec in batch.records:
        print("\t".join(rec.fields.get(n, "") for n in names))
else:
    out = []
    for rec in batch.records:
        layers = {{}}
        for k, v in rec.fields.items():
            layers.setdefault(k.split(".")[0], {{}})[k] = v
        out.append({{"_index": "packets", "_source": {{"layers": layers}}}})
    print(json.dumps(out, indent=2))
'''


@pytest.fixture
def fake_tshark(tmp_path) -> str:
    """Path to an executable that mimics the dissector's field and JSON exports."""
    path = Path(tmp_path) / "tshark"
    path.write_text(FAKE_TSHARK.format(python=sys.executable))
    path.chmod(path.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
    return str(path)

