#!/usr/bin/env python3
"""
check_reproducibility.py

Compare two metric JSON-lines files record by record, ignoring timing fields.

Usage:

python scripts/check_reproducibility.py --first runs/a/metrics.jsonl --second runs/b/metrics.jsonl

Exit code 0 when every record matches exactly, 1 otherwise.
"""

import argparse
import logging
import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(project_root))

from core.report import read_jsonl  # noqa: E402
from schemas import TIMING_FIELDS  # noqa: E402

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
log = logging.getLogger("check_reproducibility")


def strip_timings(rows: list[dict]) -> list[dict]:
    return [{k: v for k, v in row.items() if k not in TIMING_FIELDS} for row in rows]


def compare_metric_files(first: Path, second: Path, limit: int = 10) -> list[str]:
    """Human-readable mismatches between two metric files (empty when identical)."""
    a, b = strip_timings(read_jsonl(first)), strip_timings(read_jsonl(second))
    mismatches = []
    if len(a) != len(b):
        mismatches.append(f"record count differs: {len(a)} vs {len(b)}")
    for i, (ra, rb) in enumerate(zip(a, b)):
        if ra != rb:
            keys = sorted(k for k in set(ra) | set(rb) if ra.get(k) != rb.get(k))
            mismatches.append(f"record {i}: " + ", ".join(f"{k}={ra.get(k)!r} vs {rb.get(k)!r}" for k in keys))
            if len(mismatches) >= limit:
                break
    return mismatches


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--first", type=Path, required=True, help="First metrics.jsonl")
    parser.add_argument("--second", type=Path, required=True, help="Second metrics.jsonl")
    args = parser.parse_args()

    for path in (args.first, args.second):
        if not path.is_file():
            log.error(f"🔴 {path} does not exist")
            return 1

    mismatches = compare_metric_files(args.first, args.second)
    if mismatches:
        log.error("🔴 Metric files differ:")
        for m in mismatches:
            log.error(f"   {m}")
        return 1
    log.info("🟢 Metric files match (timing fields excluded)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
