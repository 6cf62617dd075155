# Copyright (c) 2026, The flora-adapters Authors
# SPDX-License-Identifier: Apache-2.0
"""Validates a JSON document against a schema file: validate.py SCHEMA DOC."""

import json
import sys

import jsonschema


def main() -> int:
    schema_path, doc_path = sys.argv[1], sys.argv[2]
    with open(schema_path, encoding="utf-8") as f:
        schema = json.load(f)
    with open(doc_path, encoding="utf-8") as f:
        doc = json.load(f)
    jsonschema.Draft202012Validator.check_schema(schema)
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc), key=lambda e: list(e.path))
    for e in errors:
        print(f"{doc_path}: {'/'.join(map(str, e.path)) or '<root>'}: {e.message}")
    if not errors:
        print(f"{doc_path}: valid against {schema_path}")
    return 1 if errors else 0


if __name__ == "__main__":
    sys.exit(main())
