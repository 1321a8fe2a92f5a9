#!/usr/bin/env python3
"""Minimal predictor backend speaking the JSON-lines protocol on stdio.

Returns fixed or SMILES-length-derived values; useful as a test double and
as a template for wrapping real predictors.
"""

import json
import sys


def main():
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        req = json.loads(line)
        n = len(req["smiles"])
        resp = {
            "id": req["id"],
            "bde": 70.0 + (n % 10),
            "ip": 150.0 + (n % 20),
            "valid3d": True,
            "sa": 2.0 + (n % 5) * 0.1,
        }
        sys.stdout.write(json.dumps(resp) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
