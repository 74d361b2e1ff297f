#!/usr/bin/env python3
"""Write the run-config JSON Schema to configs/config.schema.json."""
import json
from pathlib import Path

from ccspred.config import config_schema

out = Path(__file__).resolve().parents[1] / "configs" / "config.schema.json"
out.write_text(json.dumps(config_schema(), indent=2) + "\n")
print(out)
